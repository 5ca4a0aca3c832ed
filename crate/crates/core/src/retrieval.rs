//! Open-set retrieval evaluation: Euclidean ranking, AP/mAP and CMC.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DdclError, Result};

/// Gallery indices by ascending Euclidean distance to `query`; equal
/// distances keep ascending index order.
pub fn rank_gallery(query: ArrayView1<'_, f64>, gallery: &Array2<f64>) -> Result<Vec<usize>> {
    if query.len() != gallery.ncols() {
        return Err(DdclError::Dimension(format!(
            "query dim {}, gallery dim {}",
            query.len(),
            gallery.ncols()
        )));
    }
    let dist: Vec<f64> = gallery
        .rows()
        .into_iter()
        .map(|g| {
            g.iter()
                .zip(query.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .collect();
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    Ok(order)
}

/// Precision summed at each hit rank, divided by `num_relevant`.
pub fn average_precision(flags: &[bool], num_relevant: usize) -> Result<f64> {
    if num_relevant == 0 {
        return Err(DdclError::Empty("average precision needs a relevant item".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in flags.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    if hits != num_relevant {
        return Err(DdclError::Dimension(format!(
            "{hits} relevant flags, num_relevant = {num_relevant}"
        )));
    }
    Ok(sum / num_relevant as f64)
}

/// The unnormalized variant that adds P(k) whenever precision changes from
/// rank k-1 to k, with P(0) = 0. Kept for comparison only.
pub fn ap_literal(flags: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut prev_hits = 0usize;
    let mut hits = 0usize;
    for (i, &rel) in flags.iter().enumerate() {
        let k = i + 1;
        hits += usize::from(rel);
        // hits/k != prev_hits/(k-1), compared exactly.
        let changed = if k == 1 {
            hits != 0
        } else {
            hits * (k - 1) != prev_hits * k
        };
        if changed {
            sum += hits as f64 / k as f64;
        }
        prev_hits = hits;
    }
    sum
}

pub fn mean_average_precision(aps: &[f64]) -> Result<f64> {
    if aps.is_empty() {
        return Err(DdclError::Empty("no valid queries".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// CMC@k for k = 1..=gallery_size from 1-based first-hit ranks.
pub fn cmc_curve(first_hit_ranks: &[usize], gallery_size: usize) -> Result<Vec<f64>> {
    if first_hit_ranks.is_empty() {
        return Err(DdclError::Empty("no valid queries".into()));
    }
    let mut counts = vec![0usize; gallery_size];
    for &r in first_hit_ranks {
        if r == 0 || r > gallery_size {
            return Err(DdclError::Dimension(format!(
                "hit rank {r} outside 1..={gallery_size}"
            )));
        }
        counts[r - 1] += 1;
    }
    let q = first_hit_ranks.len() as f64;
    let mut acc = 0usize;
    Ok(counts
        .into_iter()
        .map(|c| {
            acc += c;
            acc as f64 / q
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub query: Array2<f64>,
    pub query_labels: Vec<usize>,
    pub gallery: Array2<f64>,
    pub gallery_labels: Vec<usize>,
}

impl EvalSet {
    pub fn new(
        query: Array2<f64>,
        query_labels: Vec<usize>,
        gallery: Array2<f64>,
        gallery_labels: Vec<usize>,
    ) -> Result<Self> {
        if query.nrows() == 0 || gallery.nrows() == 0 {
            return Err(DdclError::Empty("query and gallery must be non-empty".into()));
        }
        if query.nrows() != query_labels.len() || gallery.nrows() != gallery_labels.len() {
            return Err(DdclError::Dimension("label count does not match rows".into()));
        }
        if query.ncols() != gallery.ncols() {
            return Err(DdclError::Dimension(format!(
                "query dim {}, gallery dim {}",
                query.ncols(),
                gallery.ncols()
            )));
        }
        Ok(Self {
            query,
            query_labels,
            gallery,
            gallery_labels,
        })
    }
}

/// One random sample per label goes to the gallery, everything else to the
/// query set. Gallery rows are ordered by label; query rows keep input order.
pub fn split_query_gallery(features: &Array2<f64>, labels: &[usize], seed: u64) -> Result<EvalSet> {
    if labels.is_empty() {
        return Err(DdclError::Empty("no samples to split".into()));
    }
    if features.nrows() != labels.len() {
        return Err(DdclError::Dimension(format!(
            "{} rows, {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_label.entry(y).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_gallery = vec![false; labels.len()];
    let mut gallery_idx = Vec::with_capacity(by_label.len());
    for members in by_label.values() {
        let pick = members[rng.random_range(0..members.len())];
        in_gallery[pick] = true;
        gallery_idx.push(pick);
    }
    let query_idx: Vec<usize> = (0..labels.len()).filter(|&i| !in_gallery[i]).collect();
    if query_idx.is_empty() {
        return Err(DdclError::Empty("every label has a single sample; no queries remain".into()));
    }
    EvalSet::new(
        features.select(Axis(0), &query_idx),
        query_idx.iter().map(|&i| labels[i]).collect(),
        features.select(Axis(0), &gallery_idx),
        gallery_idx.iter().map(|&i| labels[i]).collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: usize,
    pub label: usize,
    pub ap: f64,
    pub first_hit_rank: usize,
    pub num_relevant: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "CMC")]
    pub cmc: Vec<f64>,
    pub per_query: Vec<QueryResult>,
    /// Queries whose label never appears in the gallery.
    pub excluded_queries: usize,
}

impl RankingReport {
    /// CMC at rank `k` (1-based), saturating at the gallery size.
    pub fn cmc_at(&self, k: usize) -> f64 {
        if self.cmc.is_empty() || k == 0 {
            return 0.0;
        }
        self.cmc[k.min(self.cmc.len()) - 1]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| DdclError::Format(format!("report json: {e}")))
    }

    pub fn cmc_csv(&self) -> String {
        let mut out = String::from("k,cmc\n");
        for (k, v) in self.cmc.iter().enumerate() {
            out.push_str(&format!("{},{v}\n", k + 1));
        }
        out
    }

    pub fn write(&self, json_path: &Path, cmc_path: &Path) -> Result<()> {
        fs::write(json_path, self.to_json()).map_err(|e| DdclError::io(json_path, e))?;
        fs::write(cmc_path, self.cmc_csv()).map_err(|e| DdclError::io(cmc_path, e))
    }
}

/// Rank the gallery for every query and aggregate AP and CMC.
pub fn evaluate(set: &EvalSet) -> Result<RankingReport> {
    let per: Vec<Result<Option<QueryResult>>> = (0..set.query.nrows())
        .into_par_iter()
        .map(|q| {
            let label = set.query_labels[q];
            let order = rank_gallery(set.query.row(q), &set.gallery)?;
            let flags: Vec<bool> = order.iter().map(|&g| set.gallery_labels[g] == label).collect();
            let num_relevant = flags.iter().filter(|&&f| f).count();
            if num_relevant == 0 {
                return Ok(None);
            }
            let first_hit_rank = flags.iter().position(|&f| f).expect("has a hit") + 1;
            Ok(Some(QueryResult {
                query: q,
                label,
                ap: average_precision(&flags, num_relevant)?,
                first_hit_rank,
                num_relevant,
            }))
        })
        .collect();
    let mut per_query = Vec::with_capacity(per.len());
    let mut excluded = 0;
    for r in per {
        match r? {
            Some(qr) => per_query.push(qr),
            None => excluded += 1,
        }
    }
    let aps: Vec<f64> = per_query.iter().map(|r| r.ap).collect();
    let ranks: Vec<usize> = per_query.iter().map(|r| r.first_hit_rank).collect();
    Ok(RankingReport {
        map: mean_average_precision(&aps)?,
        cmc: cmc_curve(&ranks, set.gallery.nrows())?,
        per_query,
        excluded_queries: excluded,
    })
}

/// Split then evaluate.
pub fn evaluate_split(features: &Array2<f64>, labels: &[usize], seed: u64) -> Result<RankingReport> {
    evaluate(&split_query_gallery(features, labels, seed)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    // Re-derives every quantity from prefix counts.
    fn brute_ap(flags: &[bool]) -> f64 {
        let r = flags.iter().filter(|&&f| f).count();
        let mut total = 0.0;
        for k in 1..=flags.len() {
            if flags[k - 1] {
                let p = flags[..k].iter().filter(|&&f| f).count() as f64 / k as f64;
                total += p;
            }
        }
        total / r as f64
    }

    #[test]
    fn ranking_examples() {
        let g = array![[2.0], [1.0], [3.0]];
        assert_eq!(rank_gallery(array![0.0].view(), &g).unwrap(), vec![1, 0, 2]);
        let dup = array![[1.0, 1.0], [0.0, 0.0], [0.0, 0.0]];
        assert_eq!(rank_gallery(array![0.0, 0.0].view(), &dup).unwrap(), vec![1, 2, 0]);
        let exact = array![[5.0, 5.0], [1.0, 2.0]];
        assert_eq!(rank_gallery(array![1.0, 2.0].view(), &exact).unwrap()[0], 1);
        assert!(rank_gallery(array![1.0].view(), &exact).is_err());
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true, false], 1).unwrap(), 1.0);
        let ap = average_precision(&[true, false, true], 2).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[true; 4], 4).unwrap(), 1.0);
        assert!(average_precision(&[false, false], 0).is_err());
        assert!(average_precision(&[true, false], 2).is_err());
    }

    #[test]
    fn ap_literal_differs_from_standard() {
        // P = 1, 1/2, 2/3: every step changes.
        let v = ap_literal(&[true, false, true]);
        assert!((v - (1.0 + 0.5 + 2.0 / 3.0)).abs() < 1e-15);
        // P stays 1 after rank 1.
        assert_eq!(ap_literal(&[true, true, true]), 1.0);
        assert_eq!(ap_literal(&[false, false]), 0.0);
    }

    #[test]
    fn map_and_cmc_examples() {
        assert_eq!(mean_average_precision(&[0.4]).unwrap(), 0.4);
        assert_eq!(mean_average_precision(&[1.0, 0.5]).unwrap(), 0.75);
        assert!(mean_average_precision(&[]).is_err());
        assert_eq!(cmc_curve(&[1, 3], 3).unwrap(), vec![0.5, 0.5, 1.0]);
        assert_eq!(cmc_curve(&[1, 1], 4).unwrap(), vec![1.0; 4]);
        assert!(cmc_curve(&[4], 3).is_err());
    }

    #[test]
    fn exhaustive_ap_matches_brute_force() {
        for g in 1..=6usize {
            for mask in 1u32..(1 << g) {
                let flags: Vec<bool> = (0..g).map(|k| mask >> k & 1 == 1).collect();
                let r = flags.iter().filter(|&&f| f).count();
                let a = average_precision(&flags, r).unwrap();
                assert!((a - brute_ap(&flags)).abs() <= 1e-12, "{flags:?}");
            }
        }
    }

    #[test]
    fn split_counts_and_determinism() {
        let x = Array2::from_shape_fn((6, 2), |(i, j)| (i * 2 + j) as f64);
        let y = vec![0, 0, 0, 1, 1, 1];
        let s = split_query_gallery(&x, &y, 3).unwrap();
        assert_eq!(s.gallery.nrows(), 2);
        assert_eq!(s.query.nrows(), 4);
        assert_eq!(s.gallery_labels, vec![0, 1]);
        assert_eq!(s, split_query_gallery(&x, &y, 3).unwrap());

        let y1 = vec![0, 0, 0, 1, 1, 2];
        let s = split_query_gallery(&x, &y1, 0).unwrap();
        assert!(!s.query_labels.contains(&2));
        assert!(s.gallery_labels.contains(&2));
        assert!(split_query_gallery(&Array2::zeros((0, 2)), &[], 0).is_err());
    }

    #[test]
    fn one_hot_is_perfect() {
        let y: Vec<usize> = (0..15).map(|i| i % 5).collect();
        let x = Array2::from_shape_fn((15, 5), |(i, j)| f64::from(u8::from(y[i] == j)));
        let r = evaluate_split(&x, &y, 1).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.cmc_at(1), 1.0);
        assert_eq!(r.excluded_queries, 0);
    }

    #[test]
    fn absent_labels_are_excluded() {
        let set = EvalSet::new(
            array![[0.0], [5.0]],
            vec![0, 9],
            array![[0.1], [4.0]],
            vec![0, 1],
        )
        .unwrap();
        let r = evaluate(&set).unwrap();
        assert_eq!(r.excluded_queries, 1);
        assert_eq!(r.per_query.len(), 1);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn report_json_round_trip() {
        let y: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let x = Array2::from_shape_fn((12, 2), |(i, j)| ((i * 7 + j * 3) % 5) as f64);
        let r = evaluate_split(&x, &y, 4).unwrap();
        let text = r.to_json();
        assert!(text.contains("\"mAP\"") && text.contains("\"CMC\"") && text.contains("\"per_query\""));
        assert_eq!(RankingReport::from_json(&text).unwrap(), r);
        assert!(r.cmc_csv().starts_with("k,cmc\n1,"));
    }

    proptest! {
        #[test]
        fn cmc_is_monotone_and_bounded(ranks in prop::collection::vec(1usize..=20, 1..30)) {
            let c = cmc_curve(&ranks, 20).unwrap();
            for w in c.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
            prop_assert!(c.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert_eq!(*c.last().unwrap(), 1.0);
        }

        #[test]
        fn isometry_leaves_metrics_unchanged(
            seed in 0u64..1000,
            theta in -3.0f64..3.0,
            shift in prop::collection::vec(-5.0f64..5.0, 2),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<usize> = (0..18).map(|i| i % 4).collect();
            // Generic positions, so rotation cannot reorder distance ties.
            let x = Array2::from_shape_fn((18, 2), |_| rng.random_range(-3.0..3.0));
            let (c, s) = (theta.cos(), theta.sin());
            let rotated = Array2::from_shape_fn((18, 2), |(i, j)| {
                let (a, b) = (x[[i, 0]], x[[i, 1]]);
                let v = if j == 0 { c * a - s * b } else { s * a + c * b };
                v + shift[j]
            });
            let r1 = evaluate_split(&x, &y, seed).unwrap();
            let r2 = evaluate_split(&rotated, &y, seed).unwrap();
            prop_assert!((r1.map - r2.map).abs() < 1e-12);
            prop_assert_eq!(r1.cmc, r2.cmc);
        }
    }
}
