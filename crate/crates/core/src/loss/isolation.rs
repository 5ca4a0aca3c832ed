//! Center isolation loss over a set of center pairs.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::indexed_map;
use super::types::{CenterBank, GradientSet};
use crate::error::{DdclError, Result};

/// Which center pairs enter the isolation loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CenterParticipation {
    /// Pairs among the classes present in the batch.
    Method1,
    /// Pairs between a batch class and any other class.
    Method2,
    /// All `N(N-1)/2` pairs.
    #[default]
    Method3,
}

impl CenterParticipation {
    pub const ALL: [CenterParticipation; 3] = [Self::Method1, Self::Method2, Self::Method3];

    pub fn name(self) -> &'static str {
        match self {
            Self::Method1 => "method1",
            Self::Method2 => "method2",
            Self::Method3 => "method3",
        }
    }
}

/// Unordered center pairs, each stored as `(i, j)` with `i < j`, sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pairs: Vec<(usize, usize)>,
}

impl PairSet {
    pub fn all(num_classes: usize) -> Self {
        let mut pairs = Vec::with_capacity(num_classes * num_classes.saturating_sub(1) / 2);
        for i in 0..num_classes {
            for j in i + 1..num_classes {
                pairs.push((i, j));
            }
        }
        Self { pairs }
    }

    /// `present` lists the batch classes; duplicates are fine.
    pub fn for_participation(
        method: CenterParticipation,
        present: &[usize],
        num_classes: usize,
    ) -> Self {
        let mut in_batch = vec![false; num_classes];
        for &c in present {
            if c < num_classes {
                in_batch[c] = true;
            }
        }
        let mut pairs = Vec::new();
        for i in 0..num_classes {
            for j in i + 1..num_classes {
                let keep = match method {
                    CenterParticipation::Method1 => in_batch[i] && in_batch[j],
                    CenterParticipation::Method2 => in_batch[i] || in_batch[j],
                    CenterParticipation::Method3 => true,
                };
                if keep {
                    pairs.push((i, j));
                }
            }
        }
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().copied()
    }

    fn check(&self, num_classes: usize) -> Result<()> {
        match self.pairs.iter().find(|&&(_, j)| j >= num_classes) {
            Some(&(i, j)) => Err(DdclError::Dimension(format!(
                "pair ({i}, {j}) outside a bank of {num_classes} centers"
            ))),
            None => Ok(()),
        }
    }
}

/// Bookkeeping from one isolation-loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IsolationStats {
    pub loss: f64,
    /// Number of pairs evaluated.
    pub pairs_evaluated: usize,
    /// Pairs whose squared distance is below the threshold.
    pub violating: usize,
    /// Center rows that belong to at least one violating pair.
    pub touched_rows: usize,
}

fn check_params(d_e: f64, nu: f64) -> Result<()> {
    if !(nu > 0.0) || !nu.is_finite() {
        return Err(DdclError::config("nu", format!("must be positive, got {nu}")));
    }
    if !(d_e >= 0.0) || !d_e.is_finite() {
        return Err(DdclError::config("d_e", format!("must be non-negative, got {d_e}")));
    }
    Ok(())
}

struct Violations {
    pairs: Vec<(usize, usize, f64)>,
    evaluated: usize,
}

fn find_violations(bank: &CenterBank, pairs: &PairSet, d_e: f64) -> Violations {
    let list: Vec<(usize, usize)> = pairs.iter().collect();
    let dists = indexed_map(list.len(), |k| {
        let (i, j) = list[k];
        bank.pair_sq_distance(i, j)
    });
    let pairs = list
        .iter()
        .zip(dists)
        .filter(|&(_, d)| d < d_e)
        .map(|(&(i, j), d)| (i, j, d))
        .collect();
    Violations {
        pairs,
        evaluated: list.len(),
    }
}

fn stats_from(v: &Violations, num_classes: usize, nu: f64) -> IsolationStats {
    let k = v.pairs.len();
    let numerator = v.pairs.iter().fold(0.0, |acc, &(_, _, d)| acc + d);
    let mut touched = vec![false; num_classes];
    for &(i, j, _) in &v.pairs {
        touched[i] = true;
        touched[j] = true;
    }
    IsolationStats {
        loss: if k == 0 { 0.0 } else { numerator / (nu + k as f64) },
        pairs_evaluated: v.evaluated,
        violating: k,
        touched_rows: touched.iter().filter(|&&t| t).count(),
    }
}

/// Isolation loss over all center pairs.
pub fn center_isolation_loss(bank: &CenterBank, d_e: f64, nu: f64) -> Result<f64> {
    Ok(center_isolation_loss_over(bank, &PairSet::all(bank.num_classes()), d_e, nu)?.loss)
}

pub fn center_isolation_loss_over(
    bank: &CenterBank,
    pairs: &PairSet,
    d_e: f64,
    nu: f64,
) -> Result<IsolationStats> {
    check_params(d_e, nu)?;
    pairs.check(bank.num_classes())?;
    let v = find_violations(bank, pairs, d_e);
    Ok(stats_from(&v, bank.num_classes(), nu))
}

/// Gradient over all pairs, packaged as a [`GradientSet`] with an empty
/// feature block.
pub fn center_isolation_grad(bank: &CenterBank, d_e: f64, nu: f64) -> Result<GradientSet> {
    let (grad, _) = center_isolation_grad_over(bank, &PairSet::all(bank.num_classes()), d_e, nu)?;
    let mut set = GradientSet::zeros(0, bank.dim(), bank.num_classes());
    set.grad_centers = grad;
    Ok(set)
}

/// Center gradient with the indicator and the violating count held fixed:
/// row `i` gets `sum_j 2 (c_i - c_j) / (nu + K)` over violating partners `j`.
pub fn center_isolation_grad_over(
    bank: &CenterBank,
    pairs: &PairSet,
    d_e: f64,
    nu: f64,
) -> Result<(Array2<f64>, IsolationStats)> {
    check_params(d_e, nu)?;
    pairs.check(bank.num_classes())?;
    let v = find_violations(bank, pairs, d_e);
    let stats = stats_from(&v, bank.num_classes(), nu);
    let mut grad = Array2::zeros(bank.centers().dim());
    if stats.violating == 0 {
        return Ok((grad, stats));
    }
    let scale = 2.0 / (nu + stats.violating as f64);
    for &(i, j, _) in &v.pairs {
        let diff = &bank.center(i) - &bank.center(j);
        grad.row_mut(i).scaled_add(scale, &diff);
        grad.row_mut(j).scaled_add(-scale, &diff);
    }
    Ok((grad, stats))
}

/// Violating pairs of `pairs`, in pair order.
pub fn violating_pair_list(bank: &CenterBank, pairs: &PairSet, d_e: f64) -> Vec<(usize, usize)> {
    find_violations(bank, pairs, d_e)
        .pairs
        .into_iter()
        .map(|(i, j, _)| (i, j))
        .collect()
}

/// Number of center pairs, among all pairs, with squared distance below `d_e`.
pub fn violating_pairs(bank: &CenterBank, d_e: f64) -> usize {
    find_violations(bank, &PairSet::all(bank.num_classes()), d_e)
        .pairs
        .len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn two_centers() {
        let bank = CenterBank::new(array![[0.0, 0.0], [2.0, 0.0]]).unwrap();
        assert_eq!(center_isolation_loss(&bank, 10.0, 1.0).unwrap(), 2.0);
        let g = center_isolation_grad(&bank, 10.0, 1.0).unwrap();
        assert_eq!(g.grad_centers.row(0).to_vec(), vec![-2.0, 0.0]);
        assert_eq!(g.grad_centers.row(1).to_vec(), vec![2.0, 0.0]);
        assert!(g.grad_features.is_empty());
    }

    #[test]
    fn no_violations_means_zero() {
        let bank = CenterBank::new(array![[0.0, 0.0], [2.0, 0.0], [0.0, 5.0]]).unwrap();
        assert_eq!(center_isolation_loss(&bank, 4.0, 1.0).unwrap(), 0.0);
        let g = center_isolation_grad(&bank, 4.0, 1.0).unwrap();
        assert!(g.grad_centers.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn collinear_threshold_excludes_far_pair() {
        let bank = CenterBank::new(array![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]).unwrap();
        let l = center_isolation_loss(&bank, 2.0, 0.5).unwrap();
        assert!((l - 0.8).abs() < 1e-15);
    }

    #[test]
    fn nonpositive_nu_rejected() {
        let bank = CenterBank::new(array![[0.0, 0.0], [2.0, 0.0]]).unwrap();
        assert!(center_isolation_loss(&bank, 1.0, 0.0).is_err());
        assert!(center_isolation_grad(&bank, 1.0, -1.0).is_err());
    }

    #[test]
    fn pair_sets_are_nested() {
        let present = [1, 3, 3];
        let p1 = PairSet::for_participation(CenterParticipation::Method1, &present, 5);
        let p2 = PairSet::for_participation(CenterParticipation::Method2, &present, 5);
        let p3 = PairSet::for_participation(CenterParticipation::Method3, &present, 5);
        assert_eq!(p1.iter().collect::<Vec<_>>(), vec![(1, 3)]);
        // 1 with {0,2,3,4}, 3 with {0,2,4}: 7 pairs
        assert_eq!(p2.len(), 7);
        assert_eq!(p3.len(), 10);
        assert!(p1.iter().all(|p| p2.iter().any(|q| q == p)));
        assert!(p2.iter().all(|p| p3.iter().any(|q| q == p)));
    }

    #[test]
    fn stats_count_touched_rows() {
        let bank = CenterBank::new(array![[0.0, 0.0], [1.0, 0.0], [9.0, 0.0]]).unwrap();
        let s = center_isolation_loss_over(&bank, &PairSet::all(3), 2.0, 1.0).unwrap();
        assert_eq!(s.violating, 1);
        assert_eq!(s.touched_rows, 2);
        assert_eq!(s.pairs_evaluated, 3);
        assert_eq!(violating_pairs(&bank, 2.0), 1);
    }
}
