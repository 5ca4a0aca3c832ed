//! Forward and backward kernels for the center-loss family.
//!
//! Every kernel is a pure function of its inputs and computes in `f64`.
//! Batch and pair reductions run left-to-right unless the process-wide
//! deterministic switch is turned off with [`set_deterministic`], in which
//! case row-level work is fanned out with rayon.

mod composite;
mod euclidean;
mod head;
mod isolation;
mod pearson;
mod softmax;
mod stability;
mod types;

use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;

pub use composite::{composite_loss, ddcl_loss, CompositeOutput, LossBreakdown, LossMode};
pub use euclidean::{
    apply_center_update, euclidean_center_grad, euclidean_center_loss,
    euclidean_exact_center_grad,
};
pub use head::{ClassifierHead, HeadGrad, HeadInit};
pub use isolation::{
    center_isolation_grad, center_isolation_grad_over, center_isolation_loss,
    center_isolation_loss_over, violating_pair_list, violating_pairs, CenterParticipation, IsolationStats, PairSet,
};
pub use pearson::{
    mean_correlation, pearson_center_grad, pearson_center_loss, pearson_corr, pearson_corr_grad,
    CorrelationGrad, VARIANCE_GUARD,
};
pub use softmax::softmax_cross_entropy;
pub use stability::{h_gamma, h_gamma_derivative, stability_threshold};
pub use types::{CenterBank, FeatureBatch, GradientSet, LossWeights};

static DETERMINISTIC: AtomicBool = AtomicBool::new(true);

/// Toggle ordered (bit-reproducible) reductions. On by default.
pub fn set_deterministic(on: bool) {
    DETERMINISTIC.store(on, Ordering::SeqCst);
}

pub fn deterministic() -> bool {
    DETERMINISTIC.load(Ordering::SeqCst)
}

/// Sum `f(0) + f(1) + ... + f(len - 1)`.
pub(crate) fn indexed_sum<F>(len: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    if deterministic() {
        (0..len).fold(0.0, |acc, i| acc + f(i))
    } else {
        (0..len).into_par_iter().map(f).sum()
    }
}

/// Map `f` over `0..len`, preserving index order in the output.
pub(crate) fn indexed_map<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if deterministic() {
        (0..len).map(f).collect()
    } else {
        (0..len).into_par_iter().map(f).collect()
    }
}
