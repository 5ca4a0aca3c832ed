//! Command-line front end.
//!
//! Exit codes: 0 on success, 2 for configuration, input and I/O problems,
//! 3 for numeric failures (non-finite training state, failed gradient check).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use crate::dataset::{generate, load_table, save_table, SyntheticSpec, TableFormat};
use crate::diagnostics::{
    center_norm_histogram, center_pair_sq_distance_histogram, correlation_trace_from_csv,
    linspace, run_experiment, run_sweep, stability_csv, stability_map, write_csv, Experiment,
    Histogram, SweepParam,
};
use crate::error::{DdclError, Result};
use crate::gradcheck::{run_suite, InstanceSizes, LossTerm, SuiteOptions};
use crate::loss::{set_deterministic, CenterBank};
use crate::retrieval::evaluate_split;
use crate::trainer::{
    load_checkpoint, save_checkpoint, write_metric_log, Activation, EpochMetrics, TrainConfig,
    Trainer,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Environment switch for ordered reductions.
pub const DETERMINISTIC_ENV: &str = "DDCL_DETERMINISTIC";

#[derive(Debug, Parser)]
#[command(name = "ddcl", version, about = "Center-loss embedding training and re-identification evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Table format for written embeddings.
    #[arg(long)]
    format: Option<TableFormat>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an embedder and write checkpoint, metric log and test-split report.
    Train(Common),
    /// Evaluate an embedding table, optionally embedding it through a checkpoint first.
    Eval {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train once per grid value of gamma, beta, d_e or nu.
    Sweep {
        param: String,
        /// Comma-separated values.
        grid: String,
        #[command(flatten)]
        common: Common,
    },
    /// Write stability, histogram or trace tables.
    Diagnose {
        /// One of stability, histograms, trace.
        what: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Metric log for `trace`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic loss gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 8)]
        max_batch: usize,
        #[arg(long, default_value_t = 16)]
        max_dim: usize,
        #[arg(long, default_value_t = 8)]
        max_classes: usize,
        /// Test hook: corrupt one term's analytic gradient.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic open-set dataset.
    Gen(Common),
}

/// A run configuration: the experiment plus where to write artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Desk-scale configuration used when no file is given.
    pub fn preset() -> Self {
        let mut train = TrainConfig {
            total_epochs: 200,
            decay_epochs: vec![135, 175],
            batch_size: 16,
            activation: Activation::Identity,
            ..TrainConfig::default()
        };
        train.weights.nu = 4.0;
        train.weights.d_e = 0.1;
        Self {
            experiment: Experiment {
                train,
                data: SyntheticSpec {
                    num_train_ids: 8,
                    num_test_ids: 20,
                    samples_per_id: 20,
                    input_dim: 8,
                    cluster_scale: 1.0,
                    noise_sigma: 0.3,
                    ..SyntheticSpec::default()
                },
                split_seed: 0,
            },
            out_dir: None,
        }
    }

    /// Parse and validate. `weights.nu` defaults to half the number of
    /// training identities; `weights.d_e` must be given for modes with the
    /// isolation term.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut v: Value = serde_json::from_str(text).map_err(|e| DdclError::Parse {
            line: e.line() as u64,
            message: e.to_string(),
        })?;
        let obj = v
            .as_object_mut()
            .ok_or_else(|| DdclError::config("config", "must be a JSON object"))?;
        let out_dir = match obj.remove("out_dir") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(PathBuf::from(s)),
            Some(_) => return Err(DdclError::config("out_dir", "must be a string")),
        };
        let weights = v.get("train").and_then(|t| t.get("weights"));
        let has = |k: &str| weights.and_then(|w| w.get(k)).is_some_and(|x| !x.is_null());
        let (nu_given, d_e_given) = (has("nu"), has("d_e"));

        let mut experiment: Experiment =
            serde_json::from_value(v).map_err(|e| DdclError::config("config", e.to_string()))?;
        if !nu_given {
            experiment.train.weights.nu = 0.5 * experiment.data.num_train_ids as f64;
        }
        let mode = experiment.train.mode;
        if mode.uses_isolation() && !d_e_given {
            return Err(DdclError::config(
                "train.weights.d_e",
                format!("required for mode {mode}"),
            ));
        }
        let cfg = Self { experiment, out_dir };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DdclError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let prefix = |p: &'static str| {
            move |e: DdclError| match e {
                DdclError::Config { field, message } => DdclError::Config {
                    field: format!("{p}.{field}"),
                    message,
                },
                other => other,
            }
        };
        self.experiment.train.validate().map_err(prefix("train"))?;
        self.experiment.data.validate().map_err(prefix("data"))
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Echo<'a> {
            #[serde(flatten)]
            experiment: &'a Experiment,
            out_dir: Option<&'a Path>,
        }
        serde_json::to_string_pretty(&Echo {
            experiment: &self.experiment,
            out_dir: self.out_dir.as_deref(),
        })
        .expect("config serializes")
    }
}

pub fn exit_code(err: &DdclError) -> i32 {
    match err {
        DdclError::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

/// Parse `args` (program name first), run the command, return the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match apply_env().and_then(|_| run(cli.command)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn apply_env() -> Result<()> {
    match std::env::var(DETERMINISTIC_ENV).as_deref() {
        Err(_) | Ok("1") => set_deterministic(true),
        Ok("0") => set_deterministic(false),
        Ok(other) => {
            return Err(DdclError::config(
                DETERMINISTIC_ENV,
                format!("expected 0 or 1, got {other:?}"),
            ))
        }
    }
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(c) => cmd_train(&c),
        Command::Eval {
            input,
            checkpoint,
            common,
        } => cmd_eval(&input, checkpoint.as_deref(), &common),
        Command::Sweep {
            param,
            grid,
            common,
        } => cmd_sweep(&param, &grid, &common),
        Command::Diagnose {
            what,
            checkpoint,
            log,
            bins,
            common,
        } => cmd_diagnose(&what, checkpoint.as_deref(), log.as_deref(), bins, &common),
        Command::Gradcheck {
            instances,
            max_batch,
            max_dim,
            max_classes,
            corrupt,
            common,
        } => {
            let corrupt = corrupt
                .map(|name| {
                    LossTerm::ALL
                        .into_iter()
                        .find(|t| t.name() == name)
                        .ok_or_else(|| DdclError::config("corrupt", format!("unknown term {name:?}")))
                })
                .transpose()?;
            let opts = SuiteOptions {
                seed: common.seed.unwrap_or(0),
                instances,
                sizes: InstanceSizes {
                    max_batch,
                    max_dim,
                    max_classes,
                },
                corrupt,
            };
            cmd_gradcheck(&opts, common.out.as_deref())
        }
        Command::Gen(c) => cmd_gen(&c),
    }
}

fn resolve(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::preset(),
    };
    if let Some(seed) = common.seed {
        cfg.experiment.train.seed = seed;
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out).map_err(|e| DdclError::io(&out, e))?;
    Ok((cfg, out))
}

fn epochs_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from(
        "epoch,lr,loss_total,loss_softmax,loss_e,loss_p,loss_ci,mean_corr,violating_pairs,pairs_evaluated,touched_method1,touched_method2,touched_method3\n",
    );
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            m.epoch,
            m.lr,
            m.loss_total,
            m.loss_softmax,
            m.loss_e,
            m.loss_p,
            m.loss_ci,
            m.mean_corr,
            m.violating_pairs,
            m.pairs_evaluated,
            m.touched_centers[0],
            m.touched_centers[1],
            m.touched_centers[2]
        ));
    }
    out
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| DdclError::io(path, e))
}

fn cmd_train(common: &Common) -> Result<()> {
    let (cfg, out) = resolve(common)?;
    let exp = &cfg.experiment;
    let data = generate(&exp.data)?;
    let (labels, num_classes) = data.train.dense_labels();
    let mut trainer = Trainer::new(exp.train.clone(), data.train.dim(), num_classes)?;

    let mut rows = Vec::new();
    let mut metrics = Vec::new();
    while !trainer.is_finished() {
        let r = trainer.train_epoch(data.train.data(), &labels)?;
        rows.extend(r.rows);
        metrics.push(r.metrics);
    }
    write_metric_log(out.join("metrics.csv"), &rows)?;
    write_file(&out.join("epochs.csv"), epochs_csv(&metrics))?;
    save_checkpoint(out.join("checkpoint.bin"), &trainer.checkpoint())?;
    write_file(&out.join("config.json"), cfg.to_json())?;

    let emb = data.test.with_data(trainer.embed(data.test.data())?)?;
    let fmt = common.format.unwrap_or_default();
    save_table(&out.join(format!("test_embeddings.{fmt}")), &emb, fmt)?;
    let report = evaluate_split(emb.data(), emb.labels(), exp.split_seed)?;
    report.write(&out.join("report.json"), &out.join("cmc.csv"))?;

    let last = metrics.last().expect("at least one epoch");
    println!(
        "trained {} epochs ({} iterations): loss {:.6}, violating pairs {}, test mAP {:.4}, CMC@1 {:.4}",
        metrics.len(),
        trainer.iteration(),
        last.loss_total,
        last.violating_pairs,
        report.map,
        report.cmc_at(1)
    );
    println!("artifacts in {}", out.display());
    Ok(())
}

fn cmd_eval(input: &Path, checkpoint: Option<&Path>, common: &Common) -> Result<()> {
    let fmt = common.format.unwrap_or_else(|| TableFormat::from_path(input));
    let table = load_table(input, fmt)?;
    let features = match checkpoint {
        Some(p) => {
            let trainer = Trainer::from_checkpoint(&load_checkpoint(p)?)?;
            trainer.embed(table.data())?
        }
        None => table.data().clone(),
    };
    let report = evaluate_split(&features, table.labels(), common.seed.unwrap_or(0))?;
    let json = report.to_json();
    println!("{json}");
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out).map_err(|e| DdclError::io(&out, e))?;
    report.write(&out.join("report.json"), &out.join("cmc.csv"))
}

fn parse_grid(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| DdclError::config("grid", format!("not a number: {s:?}")))
        })
        .collect()
}

fn cmd_sweep(param: &str, grid: &str, common: &Common) -> Result<()> {
    let param: SweepParam = param.parse()?;
    let grid = parse_grid(grid)?;
    let (cfg, out) = resolve(common)?;
    let result = run_sweep(&cfg.experiment, param, &grid)?;
    write_csv(&out, &result.file_name(), &result.to_csv())?;
    print!("{}", result.to_csv());
    Ok(())
}

fn write_histograms(out: &Path, prefix: &str, bank: &CenterBank, bins: usize) -> Result<(Histogram, Histogram)> {
    let d = center_pair_sq_distance_histogram(bank, bins)?;
    let n = center_norm_histogram(bank, bins)?;
    write_csv(out, &format!("hist_{prefix}pair_sq_distance.csv"), &d.to_csv())?;
    write_csv(out, &format!("hist_{prefix}center_norm.csv"), &n.to_csv())?;
    Ok((d, n))
}

fn cmd_diagnose(
    what: &str,
    checkpoint: Option<&Path>,
    log: Option<&Path>,
    bins: usize,
    common: &Common,
) -> Result<()> {
    match what {
        "stability" => {
            let out = out_dir(common)?;
            let gammas = linspace(0.1, 20.0, 200);
            let c_bars = linspace(0.1, 0.9, 9);
            let rows = stability_map(&gammas, &c_bars)?;
            write_csv(&out, "stability.csv", &stability_csv(&rows))?;
            let star = crate::loss::stability_threshold(0.6)?;
            println!("gamma*(0.6) = {star:.4}; wrote {} rows", rows.len());
        }
        "histograms" => {
            if let Some(p) = checkpoint {
                let out = out_dir(common)?;
                let trainer = Trainer::from_checkpoint(&load_checkpoint(p)?)?;
                write_histograms(&out, "", trainer.bank(), bins)?;
            } else {
                let (cfg, out) = resolve(common)?;
                let data = generate(&cfg.experiment.data)?;
                let outcome = run_experiment(&cfg.experiment, &data)?;
                write_histograms(&out, "initial_", &outcome.initial_bank, bins)?;
                let (d, n) = write_histograms(&out, "final_", outcome.trainer.bank(), bins)?;
                println!(
                    "final centers: pair sq distance mean {:.4e}, norm mean {:.4e}, test mAP {:.4}",
                    d.mean, n.mean, outcome.eval.map
                );
            }
        }
        "trace" => {
            let p = log.ok_or_else(|| DdclError::config("log", "trace needs --log <metrics.csv>"))?;
            let out = out_dir(common)?;
            let text = fs::read_to_string(p).map_err(|e| DdclError::io(p, e))?;
            let trace = correlation_trace_from_csv(&text)?;
            write_csv(&out, "trace_iter.csv", &trace.iter_csv())?;
            write_csv(&out, "trace_epoch.csv", &trace.epoch_csv())?;
        }
        other => {
            return Err(DdclError::config(
                "diagnose",
                format!("unknown target {other:?}; expected stability, histograms or trace"),
            ))
        }
    }
    Ok(())
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out).map_err(|e| DdclError::io(&out, e))?;
    Ok(out)
}

fn cmd_gradcheck(opts: &SuiteOptions, out: Option<&Path>) -> Result<()> {
    let report = run_suite(opts)?;
    print!("{}", report.table());
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| DdclError::io(dir, e))?;
        let mut csv = String::from("term,instances,max_rel_error,passed\n");
        for t in &report.terms {
            csv.push_str(&format!("{},{},{},{}\n", t.term, t.instances, t.max_rel_error, t.passed));
        }
        write_csv(dir, "gradcheck.csv", &csv)?;
    }
    if report.all_passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .terms
            .iter()
            .filter(|t| !t.passed)
            .map(|t| t.term.name())
            .collect();
        Err(DdclError::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn cmd_gen(common: &Common) -> Result<()> {
    let (cfg, out) = resolve(common)?;
    let data = generate(&cfg.experiment.data)?;
    let fmt = common.format.unwrap_or_default();
    save_table(&out.join(format!("train.{fmt}")), &data.train, fmt)?;
    save_table(&out.join(format!("test.{fmt}")), &data.test, fmt)?;
    println!(
        "wrote {} train and {} test rows to {}",
        data.train.len(),
        data.test.len(),
        out.display()
    );
    Ok(())
}
