//! Center-geometry histograms, training traces, hyperparameter sweeps and
//! the γ stability map, all emitted as CSV tables.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{generate, SyntheticData, SyntheticSpec};
use crate::error::{DdclError, Result};
use crate::loss::{h_gamma, h_gamma_derivative, stability_threshold, CenterBank};
use crate::retrieval::{evaluate_split, RankingReport};
use crate::trainer::{EpochReport, MetricRow, TrainConfig, Trainer};

/// Values of α·L_E above this are clipped before epoch averaging.
pub const TRACE_CLIP: f64 = 7.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `bins + 1` strictly increasing edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub min: f64,
    pub max: f64,
    pub total: usize,
    pub mean: f64,
}

impl Histogram {
    /// Uniform bins over the data's own range. A constant sample gets the
    /// range `[v, v + 1]`, so every value lands in the first bin.
    pub fn from_values(values: &[f64], bins: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(DdclError::Empty("histogram of no values".into()));
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let hi = if hi > lo { hi } else { lo + 1.0 };
        Self::with_range(values, bins, lo, hi)
    }

    /// Uniform bins over `[lo, hi]`; values outside are counted in the end bins.
    pub fn with_range(values: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Self> {
        if bins == 0 {
            return Err(DdclError::config("bins", "must be at least 1"));
        }
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(DdclError::config("range", format!("[{lo}, {hi}] is not a proper interval")));
        }
        if values.is_empty() {
            return Err(DdclError::Empty("histogram of no values".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DdclError::Numeric("histogram input is not finite".into()));
        }
        let width = (hi - lo) / bins as f64;
        let mut edges: Vec<f64> = (0..bins).map(|k| lo + width * k as f64).collect();
        edges.push(hi);
        let mut counts = vec![0usize; bins];
        for &v in values {
            let k = ((v - lo) / width).floor();
            let k = if k < 0.0 { 0 } else { (k as usize).min(bins - 1) };
            counts[k] += 1;
        }
        Ok(Self {
            edges,
            counts,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            total: values.len(),
            mean: values.iter().sum::<f64>() / values.len() as f64,
        })
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    /// Fraction of the mass in the first `k` bins.
    pub fn lowest_fraction(&self, k: usize) -> f64 {
        self.counts.iter().take(k).sum::<usize>() as f64 / self.total as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("edge_lo,edge_hi,count\n");
        for (k, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{c}\n", self.edges[k], self.edges[k + 1]));
        }
        out
    }
}

pub fn center_pair_sq_distances(bank: &CenterBank) -> Vec<f64> {
    let n = bank.num_classes();
    (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| bank.pair_sq_distance(i, j))
        .collect()
}

pub fn center_norms(bank: &CenterBank) -> Vec<f64> {
    bank.centers()
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .collect()
}

pub fn center_pair_sq_distance_histogram(bank: &CenterBank, bins: usize) -> Result<Histogram> {
    Histogram::from_values(&center_pair_sq_distances(bank), bins)
}

pub fn center_norm_histogram(bank: &CenterBank, bins: usize) -> Result<Histogram> {
    Histogram::from_values(&center_norms(bank), bins)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationTrace {
    /// `(iter, mean_corr)` per logged iteration.
    pub per_iter: Vec<(u64, f64)>,
    /// `(epoch, mean of min(α·L_E, 7), mean_corr)` per epoch.
    pub per_epoch: Vec<(usize, f64, f64)>,
}

impl CorrelationTrace {
    pub fn iter_csv(&self) -> String {
        let mut out = String::from("iter,mean_corr\n");
        for (i, c) in &self.per_iter {
            out.push_str(&format!("{i},{c}\n"));
        }
        out
    }

    pub fn epoch_csv(&self) -> String {
        let mut out = String::from("epoch,loss_e_clipped,mean_corr\n");
        for (e, l, c) in &self.per_epoch {
            out.push_str(&format!("{e},{l},{c}\n"));
        }
        out
    }
}

/// Per-iteration correlation and epoch means of the clipped weighted
/// Euclidean term. `loss_e` in the log is already weighted by α.
pub fn correlation_trace(rows: &[MetricRow]) -> Result<CorrelationTrace> {
    let triples: Vec<(usize, u64, f64, f64)> =
        rows.iter().map(|r| (r.epoch, r.iter, r.loss_e, r.mean_corr)).collect();
    trace_from_triples(&triples)
}

/// Same as [`correlation_trace`] for any CSV log that has `epoch`, `iter`,
/// `loss_e` and `mean_corr` columns.
pub fn correlation_trace_from_csv(text: &str) -> Result<CorrelationTrace> {
    let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = r
        .headers()
        .map_err(|e| DdclError::Parse { line: 1, message: e.to_string() })?
        .clone();
    let col = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| DdclError::Parse {
            line: 1,
            message: format!("missing column {name}"),
        })
    };
    let (ce, ci, cl, cc) = (col("epoch")?, col("iter")?, col("loss_e")?, col("mean_corr")?);
    let mut triples = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| DdclError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |k: usize| {
            rec.get(k).ok_or_else(|| DdclError::Parse {
                line,
                message: format!("row has no column {k}"),
            })
        };
        let bad = |what: &str| DdclError::Parse {
            line,
            message: format!("bad {what}"),
        };
        triples.push((
            field(ce)?.parse().map_err(|_| bad("epoch"))?,
            field(ci)?.parse().map_err(|_| bad("iter"))?,
            field(cl)?.parse().map_err(|_| bad("loss_e"))?,
            field(cc)?.parse().map_err(|_| bad("mean_corr"))?,
        ));
    }
    trace_from_triples(&triples)
}

fn trace_from_triples(rows: &[(usize, u64, f64, f64)]) -> Result<CorrelationTrace> {
    if rows.is_empty() {
        return Err(DdclError::Empty("metric log has no rows".into()));
    }
    let per_iter = rows.iter().map(|&(_, i, _, c)| (i, c)).collect();
    let mut per_epoch: Vec<(usize, f64, f64)> = Vec::new();
    let mut acc = (0.0, 0.0, 0usize);
    for (k, &(epoch, _, le, corr)) in rows.iter().enumerate() {
        acc.0 += le.min(TRACE_CLIP);
        acc.1 += corr;
        acc.2 += 1;
        let last_of_epoch = rows.get(k + 1).is_none_or(|next| next.0 != epoch);
        if last_of_epoch {
            let n = acc.2 as f64;
            per_epoch.push((epoch, acc.0 / n, acc.1 / n));
            acc = (0.0, 0.0, 0);
        }
    }
    Ok(CorrelationTrace { per_iter, per_epoch })
}

/// One train-and-evaluate run: training uses the generated train identities,
/// metrics come from the disjoint test identities.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Experiment {
    pub train: TrainConfig,
    pub data: SyntheticSpec,
    pub split_seed: u64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub trainer: Trainer,
    pub initial_bank: CenterBank,
    pub reports: Vec<EpochReport>,
    pub eval: RankingReport,
}

pub fn run_experiment(exp: &Experiment, data: &SyntheticData) -> Result<ExperimentOutcome> {
    let (labels, num_classes) = data.train.dense_labels();
    let mut trainer = Trainer::new(exp.train.clone(), data.train.dim(), num_classes)?;
    let initial_bank = trainer.bank().clone();
    let reports = trainer.fit(data.train.data(), &labels)?;
    let emb = trainer.embed(data.test.data())?;
    let eval = evaluate_split(&emb, data.test.labels(), exp.split_seed)?;
    Ok(ExperimentOutcome {
        trainer,
        initial_bank,
        reports,
        eval,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    #[serde(rename = "gamma")]
    Gamma,
    #[serde(rename = "beta")]
    Beta,
    #[serde(rename = "d_e")]
    DE,
    #[serde(rename = "nu")]
    Nu,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Gamma => "gamma",
            SweepParam::Beta => "beta",
            SweepParam::DE => "d_e",
            SweepParam::Nu => "nu",
        }
    }

    fn apply(self, config: &mut TrainConfig, value: f64) {
        let w = &mut config.weights;
        match self {
            SweepParam::Gamma => w.gamma = value,
            SweepParam::Beta => w.beta = value,
            SweepParam::DE => w.d_e = value,
            SweepParam::Nu => w.nu = value,
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParam {
    type Err = DdclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(SweepParam::Gamma),
            "beta" => Ok(SweepParam::Beta),
            "d_e" => Ok(SweepParam::DE),
            "nu" => Ok(SweepParam::Nu),
            other => Err(DdclError::config(
                "sweep",
                format!("unknown parameter {other:?}; expected gamma, beta, d_e or nu"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub map: f64,
    pub cmc1: f64,
    pub cmc5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn file_name(&self) -> String {
        format!("sweep_{}.csv", self.param)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("value,map,cmc1,cmc5\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.value, r.map, r.cmc1, r.cmc5));
        }
        out
    }
}

/// ν values as multiples of N, including the customary 0.5·N.
pub fn nu_grid(num_classes: usize) -> Vec<f64> {
    let n = num_classes as f64;
    [0.125, 0.25, 0.5, 1.0, 2.0].iter().map(|f| f * n).collect()
}

/// Train once per grid value on one shared dataset and identical seeds.
/// Grid points run in parallel; rows come back in grid order.
pub fn run_sweep(base: &Experiment, param: SweepParam, grid: &[f64]) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(DdclError::config("grid", "must be non-empty"));
    }
    let configs: Vec<TrainConfig> = grid
        .iter()
        .map(|&v| {
            let mut c = base.train.clone();
            param.apply(&mut c, v);
            c.validate().map(|_| c)
        })
        .collect::<Result<_>>()?;
    let data = generate(&base.data)?;
    let rows: Vec<Result<SweepRow>> = configs
        .into_par_iter()
        .zip(grid.par_iter())
        .map(|(train, &value)| {
            let exp = Experiment {
                train,
                ..base.clone()
            };
            let out = run_experiment(&exp, &data)?;
            Ok(SweepRow {
                value,
                map: out.eval.map,
                cmc1: out.eval.cmc_at(1),
                cmc5: out.eval.cmc_at(5),
            })
        })
        .collect();
    Ok(SweepResult {
        param,
        rows: rows.into_iter().collect::<Result<_>>()?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityRow {
    pub gamma: f64,
    pub c_bar: f64,
    pub h: f64,
    pub dh_dgamma: f64,
    pub gamma_star: f64,
}

/// Tabulate h(γ, C̄), ∂h/∂γ and γ*(C̄) over the product grid.
pub fn stability_map(gammas: &[f64], c_bars: &[f64]) -> Result<Vec<StabilityRow>> {
    let mut rows = Vec::with_capacity(gammas.len() * c_bars.len());
    for &c_bar in c_bars {
        let gamma_star = stability_threshold(c_bar)?;
        for &gamma in gammas {
            rows.push(StabilityRow {
                gamma,
                c_bar,
                h: h_gamma(gamma, c_bar)?,
                dh_dgamma: h_gamma_derivative(gamma, c_bar)?,
                gamma_star,
            });
        }
    }
    Ok(rows)
}

pub fn stability_csv(rows: &[StabilityRow]) -> String {
    let mut out = String::from("gamma,c_bar,h,dh_dgamma,gamma_star\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.gamma, r.c_bar, r.h, r.dh_dgamma, r.gamma_star
        ));
    }
    out
}

/// Evenly spaced grid of `n` points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64)
            .collect(),
    }
}

pub fn write_csv(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| DdclError::io(&path, e))
}
