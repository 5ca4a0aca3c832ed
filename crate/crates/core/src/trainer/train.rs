//! The training loop: forward, composite loss, backward, Adam on the
//! embedder/head/centers and the moving-average center step.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::adam::{adam_step, AdamState};
use super::checkpoint::{Checkpoint, NamedTensor};
use super::config::{lr_at_epoch, TrainConfig};
use super::embedder::Embedder;
use super::metrics::MetricRow;
use crate::error::{DdclError, Result};
use crate::loss::{
    composite_loss, violating_pair_list, violating_pairs, CenterBank, CenterParticipation,
    ClassifierHead, FeatureBatch, PairSet,
};

/// Epoch-level summary. Loss values are means over the epoch's batches.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub iterations: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_softmax: f64,
    pub loss_e: f64,
    pub loss_p: f64,
    pub loss_ci: f64,
    pub mean_corr: f64,
    /// Center pairs under the threshold after the epoch's last update.
    pub violating_pairs: usize,
    /// Pair distances evaluated by the isolation term over the epoch.
    pub pairs_evaluated: usize,
    /// Distinct center rows that would receive an isolation gradient under
    /// method1, method2 and method3, evaluated on the same states.
    pub touched_centers: [usize; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub metrics: EpochMetrics,
    pub rows: Vec<MetricRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    config: TrainConfig,
    embedder: Embedder,
    bank: CenterBank,
    head: Option<ClassifierHead>,
    embedder_opt: Vec<AdamState>,
    head_opt: Vec<AdamState>,
    center_opt: AdamState,
    epoch: usize,
    iteration: u64,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(epoch as u64 + 1))
}

impl Trainer {
    pub fn new(config: TrainConfig, input_dim: usize, num_classes: usize) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(DdclError::config("input_dim", "must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let embedder = Embedder::new(
            input_dim,
            &config.hidden_dims,
            config.embedding_dim,
            config.activation,
            &mut rng,
        )?;
        let scale = config.center_init_scale;
        let centers = Array2::from_shape_simple_fn((num_classes, config.embedding_dim), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        });
        let bank = CenterBank::new(centers)?;
        let head = if config.mode.uses_softmax() {
            Some(ClassifierHead::new(
                config.embedding_dim,
                num_classes,
                config.head_init,
                &mut rng,
            )?)
        } else {
            None
        };
        let embedder_opt = (0..embedder.num_tensors())
            .map(|k| AdamState::new(embedder.tensor(k).len()))
            .collect();
        let head_opt = match &head {
            Some(h) => vec![AdamState::new(h.weight.len()), AdamState::new(h.bias.len())],
            None => Vec::new(),
        };
        let center_opt = AdamState::new(bank.centers().len());
        Ok(Self {
            config,
            embedder,
            bank,
            head,
            embedder_opt,
            head_opt,
            center_opt,
            epoch: 0,
            iteration: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn embedder(&self) -> &Embedder {
        &self.embedder
    }

    pub fn bank(&self) -> &CenterBank {
        &self.bank
    }

    pub fn head(&self) -> Option<&ClassifierHead> {
        self.head.as_ref()
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.total_epochs
    }

    pub fn embed(&self, inputs: &Array2<f64>) -> Result<Array2<f64>> {
        self.embedder.embed(inputs)
    }

    /// Run one epoch of shuffled mini-batches; the trailing partial batch is
    /// dropped.
    pub fn train_epoch(&mut self, inputs: &Array2<f64>, labels: &[usize]) -> Result<EpochReport> {
        if self.is_finished() {
            return Err(DdclError::config(
                "total_epochs",
                format!("training already ran {} epochs", self.epoch),
            ));
        }
        if inputs.nrows() != labels.len() {
            return Err(DdclError::Dimension(format!(
                "{} input rows, {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        let num_classes = self.bank.num_classes();
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(DdclError::LabelOutOfRange {
                label: bad,
                num_classes,
            });
        }
        let batch_size = self.config.batch_size;
        let n_batches = labels.len() / batch_size;
        if n_batches == 0 {
            return Err(DdclError::config(
                "batch_size",
                format!("{batch_size} exceeds the {} training rows", labels.len()),
            ));
        }

        let lr = lr_at_epoch(&self.config, self.epoch)?;
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut epoch_rng(self.config.seed, self.epoch));

        let mut rows = Vec::with_capacity(n_batches);
        let mut sums = [0.0f64; 6];
        let mut pairs_evaluated = 0usize;
        let mut touched = [vec![false; num_classes], vec![false; num_classes], vec![false; num_classes]];

        for b in 0..n_batches {
            let idx = &order[b * batch_size..(b + 1) * batch_size];
            let x = inputs.select(Axis(0), idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (row, stats) = self.step(&x, &y, lr, &mut touched)?;
            sums[0] += row.loss_total;
            sums[1] += stats.0;
            sums[2] += row.loss_e;
            sums[3] += row.loss_p;
            sums[4] += row.loss_ci;
            sums[5] += row.mean_corr;
            pairs_evaluated += stats.1;
            rows.push(row);
        }

        let inv = 1.0 / n_batches as f64;
        let metrics = EpochMetrics {
            epoch: self.epoch,
            iterations: n_batches,
            lr,
            loss_total: sums[0] * inv,
            loss_softmax: sums[1] * inv,
            loss_e: sums[2] * inv,
            loss_p: sums[3] * inv,
            loss_ci: sums[4] * inv,
            mean_corr: sums[5] * inv,
            violating_pairs: violating_pairs(&self.bank, self.config.weights.d_e),
            pairs_evaluated,
            touched_centers: [0, 1, 2].map(|k| touched[k].iter().filter(|&&t| t).count()),
        };
        self.epoch += 1;
        Ok(EpochReport { metrics, rows })
    }

    /// Returns the log row plus (softmax loss, pairs evaluated).
    fn step(
        &mut self,
        x: &Array2<f64>,
        y: &[usize],
        lr: f64,
        touched: &mut [Vec<bool>; 3],
    ) -> Result<(MetricRow, (f64, usize))> {
        let cfg = &self.config;
        let weights = cfg.weights;
        let cache = self.embedder.forward(x)?;
        let batch = FeatureBatch::new(cache.output().clone(), y.to_vec())?;
        let num_classes = self.bank.num_classes();
        let pairs = PairSet::for_participation(cfg.center_participation, y, num_classes);

        if cfg.mode.uses_isolation() {
            for (k, method) in CenterParticipation::ALL.into_iter().enumerate() {
                let set = PairSet::for_participation(method, y, num_classes);
                for (i, j) in violating_pair_list(&self.bank, &set, weights.d_e) {
                    touched[k][i] = true;
                    touched[k][j] = true;
                }
            }
        }
        let violating_before = violating_pairs(&self.bank, weights.d_e);

        let out = composite_loss(
            cfg.mode,
            &batch,
            &self.bank,
            &weights,
            self.head.as_ref(),
            Some(&pairs),
        )?;

        let grads = self.embedder.backward(&cache, &out.grads.grad_features)?;
        for k in 0..self.embedder.num_tensors() {
            adam_step(
                self.embedder.tensor_mut(k),
                grads.tensor(k),
                &mut self.embedder_opt[k],
                lr,
                &cfg.adam,
            )?;
        }

        if let (Some(head), Some(hg)) = (self.head.as_mut(), out.head_grad.as_ref()) {
            let w = head.weight.as_slice_mut().expect("standard layout");
            adam_step(
                w,
                hg.weight.as_standard_layout().as_slice().expect("standard layout"),
                &mut self.head_opt[0],
                lr,
                &cfg.adam,
            )?;
            let b = head.bias.as_slice_mut().expect("standard layout");
            adam_step(
                b,
                hg.bias.as_slice().expect("standard layout"),
                &mut self.head_opt[1],
                lr,
                &cfg.adam,
            )?;
        }

        let centers = self.bank.centers_mut();
        if cfg.mode.uses_euclidean() {
            centers.scaled_add(-weights.lambda_c, &out.grads.center_delta);
        }
        if cfg.mode.moves_centers_by_gradient() {
            adam_step(
                centers.as_slice_mut().expect("standard layout"),
                out.grads.grad_centers.as_slice().expect("standard layout"),
                &mut self.center_opt,
                lr,
                &cfg.adam,
            )?;
        }
        if !self.bank.is_finite() || !self.embedder.is_finite() {
            return Err(DdclError::Numeric(format!(
                "parameters became non-finite at iteration {}",
                self.iteration
            )));
        }

        let b = out.breakdown;
        let row = MetricRow {
            epoch: self.epoch,
            iter: self.iteration,
            loss_total: out.total,
            loss_e: b.euclidean,
            loss_p: b.pearson,
            loss_ci: b.isolation,
            mean_corr: out.mean_corr,
            violating_pairs: violating_before,
            lr,
        };
        self.iteration += 1;
        let evaluated = out.isolation.map_or(0, |s| s.pairs_evaluated);
        Ok((row, (b.softmax, evaluated)))
    }

    /// Train until `total_epochs`, returning each epoch's report.
    pub fn fit(&mut self, inputs: &Array2<f64>, labels: &[usize]) -> Result<Vec<EpochReport>> {
        let mut reports = Vec::new();
        while !self.is_finished() {
            reports.push(self.train_epoch(inputs, labels)?);
        }
        Ok(reports)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        let mut counters = vec![("iteration".to_string(), self.iteration)];
        let mut push_state = |tensors: &mut Vec<NamedTensor>, name: &str, shape: Vec<usize>, s: &AdamState| {
            tensors.push(NamedTensor::new(format!("adam.{name}.m"), shape.clone(), s.m.clone()));
            tensors.push(NamedTensor::new(format!("adam.{name}.v"), shape, s.v.clone()));
            counters.push((format!("adam.{name}.t"), s.t));
        };
        for k in 0..self.embedder.num_tensors() {
            let name = Embedder::tensor_name(k);
            let shape = self.embedder.tensor_shape(k);
            tensors.push(NamedTensor::new(&name, shape.clone(), self.embedder.tensor(k).to_vec()));
            push_state(&mut tensors, &name, shape, &self.embedder_opt[k]);
        }
        let centers = self.bank.centers();
        let shape = centers.shape().to_vec();
        tensors.push(NamedTensor::new("centers", shape.clone(), centers.iter().copied().collect()));
        push_state(&mut tensors, "centers", shape, &self.center_opt);
        if let Some(head) = &self.head {
            let wshape = head.weight.shape().to_vec();
            tensors.push(NamedTensor::new("head.weight", wshape.clone(), head.weight.iter().copied().collect()));
            push_state(&mut tensors, "head.weight", wshape, &self.head_opt[0]);
            let bshape = vec![head.bias.len()];
            tensors.push(NamedTensor::new("head.bias", bshape.clone(), head.bias.to_vec()));
            push_state(&mut tensors, "head.bias", bshape, &self.head_opt[1]);
        }
        Checkpoint {
            epoch: self.epoch as u64,
            config_json: serde_json::to_string(&self.config).expect("config serializes"),
            counters,
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: TrainConfig = serde_json::from_str(&ck.config_json)
            .map_err(|e| DdclError::Format(format!("checkpoint config: {e}")))?;
        let find = |name: &str| {
            ck.tensor(name)
                .ok_or_else(|| DdclError::Format(format!("checkpoint lacks tensor {name}")))
        };
        let counter = |name: &str| {
            ck.counter(name)
                .ok_or_else(|| DdclError::Format(format!("checkpoint lacks counter {name}")))
        };
        let first = find("embedder.0.weight")?;
        let centers = find("centers")?;
        if first.shape.len() != 2 || centers.shape.len() != 2 {
            return Err(DdclError::Format("bad tensor rank".into()));
        }
        let mut t = Trainer::new(config, first.shape[1], centers.shape[0])?;

        let copy = |dst: &mut [f64], name: &str, shape: &[usize]| -> Result<()> {
            let src = find(name)?;
            if src.shape != shape || src.data.len() != dst.len() {
                return Err(DdclError::Format(format!(
                    "tensor {name}: shape {:?}, expected {shape:?}",
                    src.shape
                )));
            }
            dst.copy_from_slice(&src.data);
            Ok(())
        };
        let restore = |s: &mut AdamState, name: &str, shape: &[usize]| -> Result<()> {
            copy(&mut s.m, &format!("adam.{name}.m"), shape)?;
            copy(&mut s.v, &format!("adam.{name}.v"), shape)?;
            s.t = counter(&format!("adam.{name}.t"))?;
            Ok(())
        };

        for k in 0..t.embedder.num_tensors() {
            let name = Embedder::tensor_name(k);
            let shape = t.embedder.tensor_shape(k);
            copy(t.embedder.tensor_mut(k), &name, &shape)?;
            restore(&mut t.embedder_opt[k], &name, &shape)?;
        }
        let cshape = t.bank.centers().shape().to_vec();
        copy(
            t.bank.centers_mut().as_slice_mut().expect("standard layout"),
            "centers",
            &cshape,
        )?;
        restore(&mut t.center_opt, "centers", &cshape)?;
        if let Some(head) = t.head.as_mut() {
            let wshape = head.weight.shape().to_vec();
            copy(head.weight.as_slice_mut().expect("standard layout"), "head.weight", &wshape)?;
            restore(&mut t.head_opt[0], "head.weight", &wshape)?;
            let bshape = vec![head.bias.len()];
            copy(head.bias.as_slice_mut().expect("standard layout"), "head.bias", &bshape)?;
            restore(&mut t.head_opt[1], "head.bias", &bshape)?;
        }
        if !t.bank.is_finite() || !t.embedder.is_finite() {
            return Err(DdclError::Format("checkpoint holds non-finite parameters".into()));
        }
        t.epoch = usize::try_from(ck.epoch).map_err(|_| DdclError::Format("epoch".into()))?;
        t.iteration = counter("iteration")?;
        Ok(t)
    }
}

/// Mean Euclidean norm of the center rows.
pub fn mean_center_norm(bank: &CenterBank) -> f64 {
    let norms: Array1<f64> = bank
        .centers()
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .collect();
    norms.mean().unwrap_or(0.0)
}

/// Largest Euclidean distance between any two centers.
pub fn max_pair_distance(bank: &CenterBank) -> f64 {
    let n = bank.num_classes();
    let mut best = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            best = best.max(bank.pair_sq_distance(i, j).sqrt());
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::LossMode;
    use crate::trainer::Activation;

    fn toy() -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let labels: Vec<usize> = (0..48).map(|i| i % 4).collect();
        let x = Array2::from_shape_fn((48, 5), |(i, k)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (labels[i] * 5 + k) as f64 % 3.0 + 0.3 * z
        });
        (x, labels)
    }

    fn config(mode: LossMode) -> TrainConfig {
        let mut c = TrainConfig {
            mode,
            batch_size: 8,
            total_epochs: 6,
            decay_epochs: vec![3],
            embedding_dim: 4,
            hidden_dims: vec![6],
            seed: 11,
            ..Default::default()
        };
        c.weights.nu = 2.0;
        c.weights.d_e = 0.05;
        c
    }

    #[test]
    fn identical_seeds_identical_runs() {
        let (x, y) = toy();
        let mut a = Trainer::new(config(LossMode::Ddcl), 5, 4).unwrap();
        let mut b = Trainer::new(config(LossMode::Ddcl), 5, 4).unwrap();
        assert_eq!(a.fit(&x, &y).unwrap(), b.fit(&x, &y).unwrap());
        assert!(a.checkpoint().bit_identical(&b.checkpoint()));
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (x, y) = toy();
        let mut full = Trainer::new(config(LossMode::SPlusDdcl), 5, 4).unwrap();
        let all = full.fit(&x, &y).unwrap();

        let mut part = Trainer::new(config(LossMode::SPlusDdcl), 5, 4).unwrap();
        let mut first = vec![part.train_epoch(&x, &y).unwrap(), part.train_epoch(&x, &y).unwrap()];
        let bytes = part.checkpoint().to_bytes();
        let mut resumed = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert!(resumed.checkpoint().bit_identical(&part.checkpoint()));
        first.extend(resumed.fit(&x, &y).unwrap());
        assert_eq!(first, all);
        assert!(resumed.checkpoint().bit_identical(&full.checkpoint()));
    }

    #[test]
    fn epoch_shape_and_counts() {
        let (x, y) = toy();
        let mut t = Trainer::new(config(LossMode::Ddcl), 5, 4).unwrap();
        let r = t.train_epoch(&x, &y).unwrap();
        assert_eq!(r.rows.len(), 6);
        assert_eq!(r.metrics.iterations, 6);
        // Method3 evaluates every pair on every iteration.
        assert_eq!(r.metrics.pairs_evaluated, 6 * 6);
        let [a, b, c] = r.metrics.touched_centers;
        assert!(a <= b && b <= c);
        assert_eq!(t.iteration(), 6);
        assert_eq!(r.rows[5].iter, 5);
    }

    #[test]
    fn head_only_with_softmax() {
        assert!(Trainer::new(config(LossMode::Ddcl), 5, 4).unwrap().head().is_none());
        assert!(Trainer::new(config(LossMode::SE), 5, 4).unwrap().head().is_some());
    }

    #[test]
    fn softmax_training_lowers_loss() {
        let (x, y) = toy();
        let mut c = config(LossMode::S);
        c.total_epochs = 30;
        c.decay_epochs = vec![];
        c.base_lr = 1e-2;
        let mut t = Trainer::new(c, 5, 4).unwrap();
        let reps = t.fit(&x, &y).unwrap();
        let first = reps[0].metrics.loss_softmax;
        let last = reps.last().unwrap().metrics.loss_softmax;
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn euclidean_only_moves_centers_without_adam() {
        let (x, y) = toy();
        let mut c = config(LossMode::EOnly);
        c.activation = Activation::Identity;
        let mut t = Trainer::new(c, 5, 4).unwrap();
        t.train_epoch(&x, &y).unwrap();
        assert_eq!(t.center_opt.t, 0);
        assert!(t.embedder_opt[0].t > 0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (x, mut y) = toy();
        let mut t = Trainer::new(config(LossMode::Ddcl), 5, 4).unwrap();
        y[0] = 9;
        assert!(matches!(t.train_epoch(&x, &y), Err(DdclError::LabelOutOfRange { label: 9, .. })));
        let (x, y) = toy();
        assert!(t.train_epoch(&x.slice(ndarray::s![..4, ..]).to_owned(), &y[..4]).is_err());
        let mut done = Trainer::new(TrainConfig { total_epochs: 1, decay_epochs: vec![], ..config(LossMode::Ddcl) }, 5, 4).unwrap();
        done.train_epoch(&x, &y).unwrap();
        assert!(done.train_epoch(&x, &y).is_err());
    }

    #[test]
    fn checkpoint_missing_tensor_is_format_error() {
        let t = Trainer::new(config(LossMode::Ddcl), 5, 4).unwrap();
        let mut ck = t.checkpoint();
        ck.tensors.retain(|n| n.name != "adam.centers.m");
        assert!(matches!(Trainer::from_checkpoint(&ck), Err(DdclError::Format(_))));
    }

    #[test]
    fn geometry_helpers() {
        let bank = CenterBank::new(ndarray::array![[0.0, 0.0], [3.0, 4.0], [0.0, 1.0]]).unwrap();
        assert_eq!(max_pair_distance(&bank), 5.0);
        assert!((mean_center_norm(&bank) - 2.0).abs() < 1e-15);
    }
}
