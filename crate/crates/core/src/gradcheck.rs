//! Finite-difference verification of the analytic loss gradients.
//!
//! Each instance draws a random batch and center bank, evaluates a loss
//! term's closed-form gradient, and compares it with central differences.
//! The error of one comparison is `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, floor)`.

use std::fmt;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{DdclError, Result};
use crate::loss::{
    center_isolation_grad, center_isolation_loss, composite_loss, ddcl_loss,
    euclidean_center_grad, euclidean_center_loss, euclidean_exact_center_grad,
    pearson_center_grad, pearson_center_loss, softmax_cross_entropy, CenterBank, ClassifierHead,
    FeatureBatch, HeadInit, LossMode, LossWeights,
};
use crate::trainer::{Activation, Embedder};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
/// Denominator floor for the relative error.
pub const ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum LossTerm {
    Euclidean,
    Pearson,
    Isolation,
    Softmax,
    Ddcl,
}

impl LossTerm {
    pub const ALL: [LossTerm; 5] = [
        LossTerm::Euclidean,
        LossTerm::Pearson,
        LossTerm::Isolation,
        LossTerm::Softmax,
        LossTerm::Ddcl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Euclidean => "L_E",
            LossTerm::Pearson => "L_P",
            LossTerm::Isolation => "L_CI",
            LossTerm::Softmax => "softmax",
            LossTerm::Ddcl => "DDCL",
        }
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Upper bounds for random instance sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceSizes {
    pub max_batch: usize,
    pub max_dim: usize,
    pub max_classes: usize,
}

impl Default for InstanceSizes {
    fn default() -> Self {
        Self {
            max_batch: 8,
            max_dim: 16,
            max_classes: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOptions {
    pub seed: u64,
    pub instances: usize,
    pub sizes: InstanceSizes,
    /// Test hook: perturb this term's analytic gradient before comparing.
    pub corrupt: Option<LossTerm>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 100,
            sizes: InstanceSizes::default(),
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TermResult {
    pub term: LossTerm,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub terms: Vec<TermResult>,
    /// Draws discarded for sitting near a non-smooth point.
    pub rejected_draws: usize,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.terms.iter().all(|t| t.passed)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<8} {:>9} {:>14}  result\n", "term", "instances", "max_rel_err");
        for t in &self.terms {
            out.push_str(&format!(
                "{:<8} {:>9} {:>14.3e}  {}\n",
                t.term.name(),
                t.instances,
                t.max_rel_error,
                if t.passed { "pass" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Central differences of `f` at `x`.
pub fn central_difference<F>(f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = probe[k];
            probe[k] = orig + step;
            let up = f(&probe);
            probe[k] = orig - step;
            let down = f(&probe);
            probe[k] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    diff / inf(analytic).max(inf(numeric)).max(floor)
}

struct Instance {
    features: Array2<f64>,
    labels: Vec<usize>,
    centers: Array2<f64>,
    weights: LossWeights,
    head: ClassifierHead,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

fn centered_norm(v: ndarray::ArrayView1<'_, f64>) -> f64 {
    let mean = v.mean().unwrap_or(0.0);
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>().sqrt()
}

/// Smallest |d_ij − d_E| over center pairs.
fn threshold_clearance(centers: &Array2<f64>, d_e: f64) -> f64 {
    let n = centers.nrows();
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in i + 1..n {
            let d = &centers.row(i) - &centers.row(j);
            best = best.min((d.dot(&d) - d_e).abs());
        }
    }
    best
}

fn draw(rng: &mut ChaCha8Rng, sizes: InstanceSizes) -> Option<Instance> {
    let m = rng.random_range(1..=sizes.max_batch);
    // At n = 2 the correlation is the constant ±1, so its derivative is
    // zero almost everywhere and finite differences only see round-off.
    let n = rng.random_range(3..=sizes.max_dim.max(3));
    let num_classes = rng.random_range(2..=sizes.max_classes.max(2));
    let features = normal_matrix(rng, m, n, 1.0);
    let centers = normal_matrix(rng, num_classes, n, 1.0);
    let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..num_classes)).collect();

    let mut pair_d: Vec<f64> = Vec::new();
    for i in 0..num_classes {
        for j in i + 1..num_classes {
            let d = &centers.row(i) - &centers.row(j);
            pair_d.push(d.dot(&d));
        }
    }
    pair_d.sort_by(f64::total_cmp);
    // Threshold between two observed distances so at least one pair violates.
    let k = rng.random_range(0..pair_d.len());
    let d_e = match pair_d.get(k + 1) {
        Some(next) => 0.5 * (pair_d[k] + next),
        None => pair_d[k] + 1.0,
    };

    if threshold_clearance(&centers, d_e) < 1e-3 {
        return None;
    }
    let rows_ok = features.rows().into_iter().all(|r| centered_norm(r) > 1e-2)
        && centers.rows().into_iter().all(|r| centered_norm(r) > 1e-2);
    if !rows_ok {
        return None;
    }

    let weights = LossWeights {
        alpha: rng.random_range(0.001..1.0),
        beta: rng.random_range(0.1..5.0),
        gamma: rng.random_range(1.5..10.0),
        mu: rng.random_range(0.001..1.0),
        nu: rng.random_range(0.5..4.0),
        d_e,
        ..LossWeights::default()
    };
    let mut head = ClassifierHead::new(n, num_classes, HeadInit::XavierNormal, rng).ok()?;
    head.bias = ndarray::Array1::from_shape_simple_fn(num_classes, || rng.random_range(-0.5..0.5));
    Some(Instance {
        features,
        labels,
        centers,
        weights,
        head,
    })
}

fn batch_of(x: &[f64], shape: (usize, usize), labels: &[usize]) -> Result<FeatureBatch> {
    let a = Array2::from_shape_vec(shape, x.to_vec()).map_err(|e| DdclError::Dimension(e.to_string()))?;
    FeatureBatch::new(a, labels.to_vec())
}

fn bank_of(x: &[f64], shape: (usize, usize)) -> Result<CenterBank> {
    CenterBank::new(Array2::from_shape_vec(shape, x.to_vec()).map_err(|e| DdclError::Dimension(e.to_string()))?)
}

fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

/// Analytic and numeric gradients of `term` on one instance, concatenated
/// over every differentiable input.
fn compare(term: LossTerm, inst: &Instance) -> Result<(Vec<f64>, Vec<f64>)> {
    let xs = inst.features.dim();
    let cs = inst.centers.dim();
    let batch = FeatureBatch::new(inst.features.clone(), inst.labels.clone())?;
    let bank = CenterBank::new(inst.centers.clone())?;
    let x0 = flat(&inst.features);
    let c0 = flat(&inst.centers);
    let w = inst.weights;
    let labels = &inst.labels;
    let unwrap = |r: Result<f64>| r.unwrap_or(f64::NAN);

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    match term {
        LossTerm::Euclidean => {
            let g = euclidean_center_grad(&batch, &bank, w.xi)?;
            analytic.extend(flat(&g.grad_features));
            analytic.extend(flat(&euclidean_exact_center_grad(&batch, &bank)?));
            numeric.extend(central_difference(
                |x| unwrap(batch_of(x, xs, labels).and_then(|b| euclidean_center_loss(&b, &bank))),
                &x0,
                FD_STEP,
            ));
            numeric.extend(central_difference(
                |c| unwrap(bank_of(c, cs).and_then(|k| euclidean_center_loss(&batch, &k))),
                &c0,
                FD_STEP,
            ));
        }
        LossTerm::Pearson => {
            let g = pearson_center_grad(&batch, &bank, w.gamma)?;
            analytic.extend(flat(&g.grad_features));
            analytic.extend(flat(&g.grad_centers));
            numeric.extend(central_difference(
                |x| unwrap(batch_of(x, xs, labels).and_then(|b| pearson_center_loss(&b, &bank, w.gamma))),
                &x0,
                FD_STEP,
            ));
            numeric.extend(central_difference(
                |c| unwrap(bank_of(c, cs).and_then(|k| pearson_center_loss(&batch, &k, w.gamma))),
                &c0,
                FD_STEP,
            ));
        }
        LossTerm::Isolation => {
            let g = center_isolation_grad(&bank, w.d_e, w.nu)?;
            analytic.extend(flat(&g.grad_centers));
            numeric.extend(central_difference(
                |c| unwrap(bank_of(c, cs).and_then(|k| center_isolation_loss(&k, w.d_e, w.nu))),
                &c0,
                FD_STEP,
            ));
        }
        LossTerm::Softmax => {
            let head = &inst.head;
            let logits = head.logits(&inst.features)?;
            let (_, g_logits) = softmax_cross_entropy(&logits, labels)?;
            let hg = head.backward(&inst.features, &g_logits)?;
            analytic.extend(flat(&hg.features));
            analytic.extend(flat(&hg.weight));
            analytic.extend(hg.bias.iter().copied());

            let loss = |x: &Array2<f64>, h: &ClassifierHead| {
                unwrap(
                    h.logits(x)
                        .and_then(|z| softmax_cross_entropy(&z, labels))
                        .map(|(l, _)| l),
                )
            };
            numeric.extend(central_difference(
                |x| loss(&Array2::from_shape_vec(xs, x.to_vec()).expect("shape"), head),
                &x0,
                FD_STEP,
            ));
            let ws = head.weight.dim();
            numeric.extend(central_difference(
                |v| {
                    let mut h = head.clone();
                    h.weight = Array2::from_shape_vec(ws, v.to_vec()).expect("shape");
                    loss(&inst.features, &h)
                },
                &flat(&head.weight),
                FD_STEP,
            ));
            numeric.extend(central_difference(
                |v| {
                    let mut h = head.clone();
                    h.bias = ndarray::Array1::from(v.to_vec());
                    loss(&inst.features, &h)
                },
                &head.bias.to_vec(),
                FD_STEP,
            ));
        }
        LossTerm::Ddcl => {
            let out = composite_loss(LossMode::Ddcl, &batch, &bank, &w, None, None)?;
            analytic.extend(flat(&out.grads.grad_features));
            // The Euclidean center term moves by moving average during
            // training; its exact derivative is added back here.
            let exact_e = euclidean_exact_center_grad(&batch, &bank)?;
            let centers = &out.grads.grad_centers + &(w.alpha * &exact_e);
            analytic.extend(flat(&centers));
            numeric.extend(central_difference(
                |x| unwrap(batch_of(x, xs, labels).and_then(|b| ddcl_loss(&b, &bank, &w)).map(|r| r.0)),
                &x0,
                FD_STEP,
            ));
            numeric.extend(central_difference(
                |c| unwrap(bank_of(c, cs).and_then(|k| ddcl_loss(&batch, &k, &w)).map(|r| r.0)),
                &c0,
                FD_STEP,
            ));
        }
    }
    Ok((analytic, numeric))
}

fn corrupt(v: &mut [f64]) {
    if let Some(first) = v.first_mut() {
        *first = *first * 1.5 + 1e-2;
    }
}

/// Run every loss term against finite differences on shared random draws.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    if opts.instances == 0 {
        return Err(DdclError::config("instances", "must be at least 1"));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = [0.0f64; 5];
    let mut accepted = 0;
    let mut rejected = 0;
    while accepted < opts.instances {
        let Some(inst) = draw(&mut rng, opts.sizes) else {
            rejected += 1;
            if rejected > 100 * opts.instances {
                return Err(DdclError::Numeric("could not draw usable instances".into()));
            }
            continue;
        };
        for (k, term) in LossTerm::ALL.into_iter().enumerate() {
            let (mut a, n) = compare(term, &inst)?;
            if opts.corrupt == Some(term) {
                corrupt(&mut a);
            }
            let err = relative_error(&a, &n, ERROR_FLOOR);
            worst[k] = worst[k].max(if err.is_nan() { f64::INFINITY } else { err });
        }
        accepted += 1;
    }
    let terms = LossTerm::ALL
        .into_iter()
        .zip(worst)
        .map(|(term, max_rel_error)| TermResult {
            term,
            instances: accepted,
            max_rel_error,
            passed: max_rel_error <= TOLERANCE,
        })
        .collect();
    Ok(SuiteReport {
        terms,
        rejected_draws: rejected,
        elapsed: start.elapsed(),
    })
}

/// Largest relative error of the DDCL gradient with respect to every
/// embedder parameter, back-propagated through a small random embedder.
pub fn embedder_gradcheck(
    seed: u64,
    shape: (usize, usize, usize, usize, usize),
    activation: Activation,
) -> Result<f64> {
    let (input_dim, hidden, dim, num_classes, m) = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut embedder = Embedder::new(input_dim, &[hidden], dim, activation, &mut rng)?;
    for k in 0..embedder.num_tensors() {
        if Embedder::tensor_name(k).ends_with("bias") {
            for b in embedder.tensor_mut(k) {
                *b = rng.random_range(-0.3..0.3);
            }
        }
    }
    let inputs = normal_matrix(&mut rng, m, input_dim, 1.0);
    let labels: Vec<usize> = (0..m).map(|i| i % num_classes).collect();
    let bank = CenterBank::new(normal_matrix(&mut rng, num_classes, dim, 1.0))?;
    let mut d: Vec<f64> = (0..num_classes)
        .flat_map(|i| (i + 1..num_classes).map(move |j| (i, j)))
        .map(|(i, j)| bank.pair_sq_distance(i, j))
        .collect();
    d.sort_by(f64::total_cmp);
    let weights = LossWeights {
        alpha: 0.5,
        beta: 2.0,
        gamma: 3.0,
        d_e: d[d.len() / 2] + 1e-2,
        ..LossWeights::for_classes(num_classes)
    };

    let cache = embedder.forward(&inputs)?;
    let batch = FeatureBatch::new(cache.output().clone(), labels.clone())?;
    let out = composite_loss(LossMode::Ddcl, &batch, &bank, &weights, None, None)?;
    let grads = embedder.backward(&cache, &out.grads.grad_features)?;

    let mut worst = 0.0f64;
    for k in 0..embedder.num_tensors() {
        let p0 = embedder.tensor(k).to_vec();
        let numeric = central_difference(
            |p| {
                let mut e = embedder.clone();
                e.tensor_mut(k).copy_from_slice(p);
                e.embed(&inputs)
                    .and_then(|f| FeatureBatch::new(f, labels.clone()))
                    .and_then(|b| ddcl_loss(&b, &bank, &weights))
                    .map_or(f64::NAN, |r| r.0)
            },
            &p0,
            FD_STEP,
        );
        worst = worst.max(relative_error(grads.tensor(k), &numeric, ERROR_FLOOR));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_cubic() {
        let g = central_difference(|x| x[0].powi(3) + 2.0 * x[1], &[2.0, 5.0], 1e-4);
        assert!((g[0] - 12.0).abs() < 1e-6);
        assert!((g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(&[0.0], &[1e-9], 1e-6), 1e-3);
        assert!((relative_error(&[2.0, 1.0], &[2.0, 1.1], 1e-6) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn suite_passes_on_small_run() {
        let r = run_suite(&SuiteOptions { instances: 20, seed: 3, ..Default::default() }).unwrap();
        let names: Vec<_> = r.terms.iter().map(|t| t.term.name()).collect();
        assert_eq!(names, ["L_E", "L_P", "L_CI", "softmax", "DDCL"]);
        assert!(r.all_passed(), "{}", r.table());
    }

    #[test]
    fn corruption_is_reported_for_that_term_only() {
        let r = run_suite(&SuiteOptions {
            instances: 5,
            corrupt: Some(LossTerm::Pearson),
            ..Default::default()
        })
        .unwrap();
        for t in &r.terms {
            assert_eq!(t.passed, t.term != LossTerm::Pearson, "{}", r.table());
        }
        assert!(r.table().contains("FAIL"));
    }

    #[test]
    fn embedder_chain_rule_matches() {
        for act in [Activation::Tanh, Activation::Relu, Activation::Identity] {
            for seed in 0..3 {
                let err = embedder_gradcheck(seed, (4, 8, 4, 3, 4), act).unwrap();
                assert!(err < 1e-4, "{act:?} seed {seed}: {err:e}");
            }
        }
    }
}
