//! Minibatch SGD over noisy-labeled points with periodic regrouping.
//!
//! Each epoch whose index is a multiple of `regroup_every` draws a fresh
//! partition of the bags into groups and rebuilds the noise models. Every
//! point of bag `k_{i,c}` is then trained on noisy label `c` with the
//! forward-corrected log loss of group `i`, weighted by the coefficient it
//! carries in the empirical risk.
//!
//! Three independent random streams derive from the seed: classifier
//! initialization, grouping, and point shuffling. A supervised control run
//! with the same seed therefore visits points in the same order.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bags::{Dataset, LLPInstance};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, cross_entropy_gradient, point_weight, CompositeFCLoss};
use crate::model::{evaluate, evaluate_rows, Classifier, ClassifierKind};
use crate::reduction::{build_group_models, optimal_weights, random_partition, GroupNoiseModel, Grouping, Mode};
use crate::simplex::ProbVector;

pub(crate) const STREAM_INIT: u64 = 0;
pub(crate) const STREAM_GROUPING: u64 = 1;
pub(crate) const STREAM_SHUFFLE: u64 = 2;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// How groups are weighted against each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupWeights {
    Uniform,
    #[serde(rename = "harmonic")]
    HarmonicMean,
}

impl std::str::FromStr for GroupWeights {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(GroupWeights::Uniform),
            "harmonic" => Ok(GroupWeights::HarmonicMean),
            other => Err(Error::InvalidArgument(format!("unknown weights {other:?}"))),
        }
    }
}

/// SGD with momentum and a step learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Epochs at which the rate is multiplied by `decay_factor`. `None` means 50% and 75% of the run.
    pub decay_epochs: Option<Vec<usize>>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.01,
            decay_epochs: None,
            decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !ok(self.decay_factor) || !ok(self.weight_decay) || !ok(self.momentum) || self.momentum >= 1.0 {
            return Err(Error::InvalidArgument("decay factor, weight decay and momentum must be finite, momentum below 1".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` of a run of `epochs`.
    pub fn learning_rate_at(&self, epoch: usize, epochs: usize) -> f64 {
        let defaults = [epochs / 2, 3 * epochs / 4];
        let decays = self.decay_epochs.as_deref().unwrap_or(&defaults);
        let steps = decays.iter().filter(|&&d| d > 0 && epoch >= d).count();
        self.learning_rate * self.decay_factor.powi(steps as i32)
    }
}

/// Momentum buffer, `v <- mu v + g + wd theta; theta <- theta - lr v`.
#[derive(Debug, Clone)]
pub(crate) struct Momentum {
    velocity: Vec<f64>,
}

impl Momentum {
    pub(crate) fn new(n: usize) -> Self {
        Momentum { velocity: vec![0.0; n] }
    }

    pub(crate) fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, opt: &OptimizerConfig) {
        for ((p, v), &g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = opt.momentum * *v + g + opt.weight_decay * *p;
            *p -= lr * *v;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub regroup_every: usize,
    pub mode: Mode,
    pub weights: GroupWeights,
    /// Clean class prior, required in [`Mode::Ideal`].
    pub clean_prior: Option<ProbVector>,
    /// Fresh partitions tried in ideal mode before an assumption violation is reported.
    pub ideal_retries: usize,
    pub seed: u64,
    /// Hidden layer widths; empty for a softmax-linear model.
    pub hidden: Vec<usize>,
    /// Report accuracy on the training points. This reads their labels.
    pub track_train_accuracy: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            optimizer: OptimizerConfig::default(),
            regroup_every: 20,
            mode: Mode::Uniform,
            weights: GroupWeights::Uniform,
            clean_prior: None,
            ideal_retries: 50,
            seed: 0,
            hidden: Vec::new(),
            track_train_accuracy: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if self.regroup_every == 0 {
            return Err(Error::InvalidArgument("regroup_every must be at least 1".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub objective: f64,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub regrouped: bool,
    pub saturations: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    pub epochs: Vec<EpochMetrics>,
    /// Partitions rejected in ideal mode before one satisfied the assumptions.
    pub ideal_retries: usize,
}

/// SHA-256 of the compact JSON form of `value`, hex encoded.
pub fn content_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(hex::encode(Sha256::digest(&json)))
}

impl MetricsLog {
    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|m| m.test_acc)
    }

    /// One JSON object per line, preceded by `{"config": ..., "config_hash": ...}`.
    pub fn write_jsonl<C: Serialize, W: Write>(&self, config: &C, mut writer: W) -> Result<()> {
        let to_io = |e: serde_json::Error| Error::Io(std::io::Error::other(e));
        let header = serde_json::json!({
            "config": config,
            "config_hash": content_hash(config)?,
        });
        serde_json::to_writer(&mut writer, &header).map_err(to_io)?;
        writer.write_all(b"\n")?;
        for m in &self.epochs {
            serde_json::to_writer(&mut writer, m).map_err(to_io)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// A training point: dataset row, the label it is trained on, and its risk coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainPoint {
    pub row: usize,
    pub label: usize,
    pub coef: f64,
    /// Group whose corrected loss applies; `None` means plain cross-entropy.
    pub group: Option<usize>,
}

enum Source<'a> {
    Bags(&'a LLPInstance),
    Supervised(Vec<usize>),
}

/// Training state, advanced one epoch at a time.
pub struct Trainer<'a> {
    dataset: &'a Dataset,
    source: Source<'a>,
    cfg: TrainConfig,
    clf: Classifier,
    momentum: Momentum,
    grouping_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
    grouping: Option<Grouping>,
    models: Vec<GroupNoiseModel>,
    losses: Vec<CompositeFCLoss>,
    points: Vec<TrainPoint>,
    epoch: usize,
    ideal_retries: usize,
}

impl<'a> Trainer<'a> {
    /// LLPFC training on the bags of `inst`.
    pub fn new(inst: &'a LLPInstance, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let classes = inst.num_classes();
        if inst.bags.len() < classes {
            return Err(Error::InsufficientData(format!(
                "{} bags cannot fill a group of {classes}",
                inst.bags.len()
            )));
        }
        if cfg.mode == Mode::Ideal {
            let prior = cfg
                .clean_prior
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("ideal mode needs the clean prior".into()))?;
            if prior.len() != classes {
                return Err(Error::DimensionMismatch {
                    expected: classes,
                    got: prior.len(),
                });
            }
            if inst.bags.iter().any(|b| b.gamma_true.is_none()) {
                return Err(Error::InvalidArgument("ideal mode needs gamma_true on every bag".into()));
            }
        }
        Self::with_source(&inst.dataset, Source::Bags(inst), cfg)
    }

    /// Plain cross-entropy training on the labeled `rows` of `ds`, sharing the
    /// initialization and shuffling streams of an LLPFC run with the same seed.
    pub fn supervised(ds: &'a Dataset, rows: &[usize], cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if rows.is_empty() {
            return Err(Error::InsufficientData("no training rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= ds.len()) {
            return Err(Error::InvalidArgument(format!("row {bad} out of range")));
        }
        let mut rows = rows.to_vec();
        rows.sort_unstable();
        rows.dedup();
        Self::with_source(ds, Source::Supervised(rows), cfg)
    }

    fn with_source(dataset: &'a Dataset, source: Source<'a>, cfg: TrainConfig) -> Result<Self> {
        let kind = ClassifierKind::from_hidden(dataset.dim(), &cfg.hidden, dataset.num_classes());
        let clf = Classifier::init(kind, cfg.seed)?;
        debug_assert_eq!(STREAM_INIT, 0, "init draws from the default stream");
        Ok(Trainer {
            dataset,
            source,
            momentum: Momentum::new(clf.num_params()),
            clf,
            grouping_rng: stream_rng(cfg.seed, STREAM_GROUPING),
            shuffle_rng: stream_rng(cfg.seed, STREAM_SHUFFLE),
            cfg,
            grouping: None,
            models: Vec::new(),
            losses: Vec::new(),
            points: Vec::new(),
            epoch: 0,
            ideal_retries: 0,
        })
    }

    pub fn classifier(&self) -> &Classifier {
        &self.clf
    }

    pub fn classifier_mut(&mut self) -> &mut Classifier {
        &mut self.clf
    }

    pub fn group_models(&self) -> &[GroupNoiseModel] {
        &self.models
    }

    pub fn grouping(&self) -> Option<&Grouping> {
        self.grouping.as_ref()
    }

    pub fn points(&self) -> &[TrainPoint] {
        &self.points
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn ideal_retries(&self) -> usize {
        self.ideal_retries
    }

    /// Rebuilds the grouping, noise models and point list when the schedule asks for it.
    /// Returns whether it did.
    pub fn prepare_epoch(&mut self) -> Result<bool> {
        let due = self.points.is_empty() || self.epoch % self.cfg.regroup_every == 0;
        if !due {
            return Ok(false);
        }
        match &self.source {
            Source::Supervised(rows) => {
                if !self.points.is_empty() {
                    return Ok(false);
                }
                let coef = 1.0 / rows.len() as f64;
                self.points = rows
                    .iter()
                    .map(|&row| TrainPoint {
                        row,
                        label: self.dataset.label(row),
                        coef,
                        group: None,
                    })
                    .collect();
                Ok(false)
            }
            Source::Bags(inst) => {
                let inst = *inst;
                self.regroup(inst)?;
                Ok(true)
            }
        }
    }

    fn regroup(&mut self, inst: &LLPInstance) -> Result<()> {
        let classes = inst.num_classes();
        let mut attempt = 0;
        let (mut grouping, mut models) = loop {
            let grouping = random_partition(inst.bags.len(), classes, &mut self.grouping_rng)?;
            match build_group_models(&inst.bags, &grouping, self.cfg.mode, self.cfg.clean_prior.as_ref()) {
                Ok(models) => break (grouping, models),
                Err(e @ Error::AssumptionViolation { .. })
                    if self.cfg.mode == Mode::Ideal && attempt < self.cfg.ideal_retries =>
                {
                    let _ = e;
                    attempt += 1;
                    self.ideal_retries += 1;
                }
                Err(e) => return Err(e),
            }
        };
        grouping.epoch_created = self.epoch;
        let n = models.len();
        match self.cfg.weights {
            GroupWeights::Uniform => {
                let w = 1.0 / n as f64;
                models.iter_mut().for_each(|m| m.weight = w);
            }
            GroupWeights::HarmonicMean => {
                let sizes: Vec<Vec<usize>> = models.iter().map(|m| m.bag_sizes.clone()).collect();
                let w = optimal_weights(&sizes)?;
                models.iter_mut().zip(w.as_slice()).for_each(|(m, &w)| m.weight = w);
            }
        }
        let mut points = Vec::with_capacity(models.iter().map(GroupNoiseModel::num_points).sum());
        for (i, model) in models.iter().enumerate() {
            for (c, &k) in model.bag_refs.iter().enumerate() {
                let coef = point_weight(model, c, self.cfg.mode);
                if coef == 0.0 {
                    // a noisy class with zero mass in the group carries no loss
                    continue;
                }
                points.extend(inst.bags[k].indices.iter().map(|&row| TrainPoint {
                    row,
                    label: c,
                    coef,
                    group: Some(i),
                }));
            }
        }
        points.sort_by_key(|p| p.row);
        if points.windows(2).any(|w| w[0].row == w[1].row) {
            return Err(Error::Bookkeeping("a point appears in two bags of the grouping".into()));
        }
        self.losses = models.iter().map(|m| CompositeFCLoss::log(m.transition.clone())).collect();
        self.models = models;
        self.grouping = Some(grouping);
        self.points = points;
        Ok(())
    }

    fn point_loss(&self, p: &TrainPoint, s: &[f64]) -> Result<(f64, bool)> {
        match p.group {
            Some(g) => {
                let v = self.losses[g].value(s, p.label)?;
                Ok((v.value, v.saturated))
            }
            None => Ok((cross_entropy(s, p.label), false)),
        }
    }

    fn point_gradient(&self, p: &TrainPoint, s: &[f64]) -> Result<(Vec<f64>, bool)> {
        match p.group {
            Some(g) => self.losses[g].gradient(s, p.label),
            None => Ok((cross_entropy_gradient(s, p.label), false)),
        }
    }

    /// Weighted empirical risk of the current classifier over the current points.
    pub fn objective(&self) -> Result<f64> {
        let mut total = 0.0;
        for p in &self.points {
            let s = self.clf.scores(self.dataset.features(p.row))?;
            total += p.coef * self.point_loss(p, &s)?.0;
        }
        Ok(total)
    }

    /// Unbiased estimate of the objective gradient from the points at `batch`
    /// (indices into [`Trainer::points`]). Returns the saturation count too.
    pub fn batch_gradient(&self, batch: &[usize]) -> Result<(Vec<f64>, usize)> {
        let mut grad = vec![0.0; self.clf.num_params()];
        let scale = self.points.len() as f64 / batch.len() as f64;
        let mut saturations = 0;
        for &j in batch {
            let p = &self.points[j];
            let trace = self.clf.forward(self.dataset.features(p.row))?;
            let (g, saturated) = self.point_gradient(p, trace.scores())?;
            saturations += saturated as usize;
            let w = p.coef * scale;
            let dscores: Vec<f64> = g.iter().map(|v| v * w).collect();
            self.clf.backward(&trace, &dscores, &mut grad);
        }
        Ok((grad, saturations))
    }

    /// One optimizer step on `batch` with learning rate `lr`.
    pub fn step(&mut self, batch: &[usize], lr: f64) -> Result<usize> {
        let (grad, saturations) = self.batch_gradient(batch)?;
        self.momentum.step(self.clf.params_mut(), &grad, lr, &self.cfg.optimizer);
        Ok(saturations)
    }

    /// Runs one epoch and reports its metrics. The objective is evaluated on
    /// the epoch's points at the end-of-epoch parameters.
    pub fn run_epoch(&mut self, test: Option<&Dataset>) -> Result<EpochMetrics> {
        let regrouped = self.prepare_epoch()?;
        let lr = self.cfg.optimizer.learning_rate_at(self.epoch, self.cfg.epochs);
        let mut order: Vec<usize> = (0..self.points.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let mut saturations = 0;
        for batch in order.chunks(self.cfg.batch_size) {
            saturations += self.step(batch, lr)?;
        }
        let objective = self.objective()?;
        if !objective.is_finite() {
            return Err(Error::NonFinite { index: self.epoch });
        }
        let train_acc = if self.cfg.track_train_accuracy {
            let rows: Vec<usize> = self.points.iter().map(|p| p.row).collect();
            Some(evaluate_rows(&self.clf, self.dataset, &rows)?)
        } else {
            None
        };
        let test_acc = test.map(|t| evaluate(&self.clf, t)).transpose()?;
        let metrics = EpochMetrics {
            epoch: self.epoch,
            objective,
            train_acc,
            test_acc,
            regrouped,
            saturations,
        };
        self.epoch += 1;
        Ok(metrics)
    }

    /// Runs the remaining epochs.
    pub fn run_remaining(&mut self, test: Option<&Dataset>) -> Result<MetricsLog> {
        let mut log = MetricsLog::default();
        while self.epoch < self.cfg.epochs {
            log.epochs.push(self.run_epoch(test)?);
        }
        log.ideal_retries = self.ideal_retries;
        Ok(log)
    }

    pub fn run(mut self, test: Option<&Dataset>) -> Result<(Classifier, MetricsLog)> {
        let log = self.run_remaining(test)?;
        Ok((self.clf, log))
    }
}

/// Trains on `inst` for `cfg.epochs` epochs, reporting test accuracy on `test` when given.
pub fn train(inst: &LLPInstance, cfg: &TrainConfig, test: Option<&Dataset>) -> Result<(Classifier, MetricsLog)> {
    Trainer::new(inst, cfg.clone())?.run(test)
}

/// Supervised cross-entropy control on the labeled `rows` of `ds`.
pub fn train_supervised(
    ds: &Dataset,
    rows: &[usize],
    cfg: &TrainConfig,
    test: Option<&Dataset>,
) -> Result<(Classifier, MetricsLog)> {
    Trainer::supervised(ds, rows, cfg.clone())?.run(test)
}
