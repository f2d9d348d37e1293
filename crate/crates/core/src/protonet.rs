//! Prototype-based episodic training and evaluation.
//!
//! Embeddings are projected by a learned square matrix `Θ` (a row `x`
//! becomes `x·Θ`, i.e. `Θᵀx`). Prototypes are means of projected support
//! rows; a query is scored by the softmax of negative squared Euclidean
//! distances to the prototypes and predicted as the nearest one.

use std::collections::BTreeMap;

use log::{debug, info};
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientMap, ParamId, Tape, Var};
use crate::encoder::{EncoderInput, EncoderParams, EncoderVars, W_DEG, W_STAR};
use crate::episodes::{Episode, EpisodeSampler};
use crate::error::{Error, Result};
use crate::mixup::{materialize_plan, EpochPlan, MixupConfig, TaskRows};
use crate::seed::{purpose, SeedStream};

pub const THETA: ParamId = ParamId(2);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricParams {
    /// h × h projection applied to embeddings before any distance.
    pub theta: Array2<f64>,
}

impl MetricParams {
    /// Identity plus uniform noise in `[−0.01, 0.01]`.
    pub fn init<R: Rng>(hidden: usize, rng: &mut R) -> Self {
        let theta = Array2::from_shape_fn((hidden, hidden), |(i, j)| {
            let base = if i == j { 1.0 } else { 0.0 };
            base + rng.random_range(-0.01..=0.01)
        });
        Self { theta }
    }
}

/// All trainable parameters: `W*`, `W_deg` and `Θ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub metric: MetricParams,
}

impl ModelParams {
    pub fn init<R: Rng>(feature_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let encoder = EncoderParams::init(feature_dim, hidden, rng)?;
        let metric = MetricParams::init(hidden, rng);
        Ok(Self { encoder, metric })
    }

    pub fn ids() -> [ParamId; 3] {
        [W_STAR, W_DEG, THETA]
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        match id {
            W_STAR => &self.encoder.w_star,
            W_DEG => &self.encoder.w_deg,
            THETA => &self.metric.theta,
            other => panic!("unknown parameter {other:?}"),
        }
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        match id {
            W_STAR => &mut self.encoder.w_star,
            W_DEG => &mut self.encoder.w_deg,
            THETA => &mut self.metric.theta,
            other => panic!("unknown parameter {other:?}"),
        }
    }

    pub fn is_finite(&self) -> bool {
        Self::ids().iter().all(|&id| self.get(id).iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    /// One row per local class.
    pub prototypes: Array2<f64>,
}

impl PrototypeSet {
    pub fn way(&self) -> usize {
        self.prototypes.nrows()
    }
}

fn class_rows(labels: &[usize], way: usize) -> Result<Vec<Vec<usize>>> {
    let mut rows = vec![Vec::new(); way];
    for (i, &c) in labels.iter().enumerate() {
        rows.get_mut(c)
            .ok_or_else(|| Error::Contract(format!("label {c} outside a {way}-way task")))?
            .push(i);
    }
    if let Some(k) = rows.iter().position(Vec::is_empty) {
        return Err(Error::Contract(format!("class {k} has no support rows")));
    }
    Ok(rows)
}

/// Per-class means of `rows`.
pub fn compute_prototypes(rows: ArrayView2<f64>, labels: &[usize], way: usize) -> Result<PrototypeSet> {
    if labels.len() != rows.nrows() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), rows.nrows())));
    }
    let groups = class_rows(labels, way)?;
    let mut prototypes = Array2::zeros((way, rows.ncols()));
    for (k, idx) in groups.iter().enumerate() {
        let mean = rows.select(Axis(0), idx).mean_axis(Axis(0)).expect("non-empty");
        prototypes.row_mut(k).assign(&mean);
    }
    Ok(PrototypeSet { prototypes })
}

/// Prototype matrix (N × h) of `rows` on the tape.
pub fn prototypes_on_tape(tape: &mut Tape, rows: Var, labels: &[usize], way: usize) -> Result<Var> {
    let groups = class_rows(labels, way)?;
    let mut protos = Vec::with_capacity(way);
    for idx in &groups {
        let sel = tape.row_select(rows, idx)?;
        protos.push(tape.row_mean(sel)?);
    }
    tape.vstack(&protos)
}

/// Negative squared distances of each projected query to each prototype
/// (n_q × N).
fn logits_on_tape(tape: &mut Tape, task: &TaskRows, theta: Var) -> Result<Var> {
    let support = tape.matmul(task.support, theta)?;
    let query = tape.matmul(task.query, theta)?;
    let protos = prototypes_on_tape(tape, support, &task.support_labels, task.way)?;
    let d = tape.pairwise_sq_dist(query, protos)?;
    tape.scale(d, -1.0)
}

/// Mean distance-softmax cross-entropy over the task's query rows.
pub fn episode_loss_on_tape(tape: &mut Tape, task: &TaskRows, theta: Var) -> Result<Var> {
    if task.query_labels.is_empty() {
        return Err(Error::Contract("task has no query rows".into()));
    }
    if let Some(&bad) = task.query_labels.iter().find(|&&c| c >= task.way) {
        return Err(Error::Contract(format!("query label {bad} outside a {}-way task", task.way)));
    }
    let logits = logits_on_tape(tape, task, theta)?;
    let log_p = tape.row_log_softmax(logits)?;
    let picked = tape.pick_cols(log_p, &task.query_labels)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / task.query_labels.len() as f64)
}

/// Value-level wrapper around [`episode_loss_on_tape`].
pub fn episode_loss(
    support: &Array2<f64>,
    support_labels: &[usize],
    query: &Array2<f64>,
    query_labels: &[usize],
    way: usize,
    theta: &Array2<f64>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let task = TaskRows {
        way,
        support: tape.constant(support.clone())?,
        support_labels: support_labels.to_vec(),
        query: tape.constant(query.clone())?,
        query_labels: query_labels.to_vec(),
    };
    let th = tape.constant(theta.clone())?;
    let loss = episode_loss_on_tape(&mut tape, &task, th)?;
    tape.scalar(loss)
}

/// Softmax responsibilities of each query over the prototypes (n_q × N).
pub fn responsibilities(
    support: &Array2<f64>,
    support_labels: &[usize],
    query: &Array2<f64>,
    way: usize,
    theta: &Array2<f64>,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let task = TaskRows {
        way,
        support: tape.constant(support.clone())?,
        support_labels: support_labels.to_vec(),
        query: tape.constant(query.clone())?,
        query_labels: Vec::new(),
    };
    let th = tape.constant(theta.clone())?;
    let logits = logits_on_tape(&mut tape, &task, th)?;
    let p = tape.row_softmax(logits)?;
    Ok(tape.value(p).clone())
}

/// Index of the nearest prototype for each query row; ties go to the lowest
/// class index.
pub fn nearest_prototype(prototypes: ArrayView2<f64>, queries: ArrayView2<f64>) -> Vec<usize> {
    queries
        .rows()
        .into_iter()
        .map(|q| {
            let mut best = (0, f64::INFINITY);
            for (k, c) in prototypes.rows().into_iter().enumerate() {
                let d: f64 = q.iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (k, d);
                }
            }
            best.0
        })
        .collect()
}

/// Predicts query classes from support rows, projecting both through `theta`.
pub fn predict_rows(
    support: ArrayView2<f64>,
    support_labels: &[usize],
    query: ArrayView2<f64>,
    way: usize,
    theta: &Array2<f64>,
) -> Result<Vec<usize>> {
    if support.ncols() != theta.nrows() || query.ncols() != theta.nrows() {
        return Err(Error::Shape(format!(
            "embeddings of width {}/{} against a {}×{} projection",
            support.ncols(),
            query.ncols(),
            theta.nrows(),
            theta.ncols()
        )));
    }
    let protos = compute_prototypes(support.dot(theta).view(), support_labels, way)?;
    Ok(nearest_prototype(protos.prototypes.view(), query.dot(theta).view()))
}

/// Predicts the query classes of an episode given node embeddings `x`.
pub fn predict(x: &Array2<f64>, episode: &Episode, theta: &Array2<f64>) -> Result<Vec<usize>> {
    let support = x.select(Axis(0), &episode.support_nodes());
    let query = x.select(Axis(0), &episode.query_nodes());
    predict_rows(support.view(), &episode.support_labels(), query.view(), episode.way(), theta)
}

pub fn accuracy(truth: &[usize], predicted: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = truth.iter().zip(predicted).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len() as f64
}

/// Unweighted mean of per-class F1 over classes `0..way`.
pub fn macro_f1(truth: &[usize], predicted: &[usize], way: usize) -> f64 {
    if way == 0 {
        return 0.0;
    }
    let mut tp = vec![0usize; way];
    let mut fp = vec![0usize; way];
    let mut fn_ = vec![0usize; way];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let total: f64 = (0..way)
        .map(|k| {
            let denom = 2 * tp[k] + fp[k] + fn_[k];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[k] as f64 / denom as f64
            }
        })
        .sum();
    total / way as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub task_accuracy: Vec<f64>,
    pub task_f1: Vec<f64>,
    pub mean_acc: f64,
    pub macro_f1: f64,
    /// 95% half-width of the mean accuracy over tasks.
    pub ci95: f64,
}

impl Metrics {
    pub fn from_tasks(task_accuracy: Vec<f64>, task_f1: Vec<f64>) -> Self {
        let n = task_accuracy.len();
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let mean_acc = mean(&task_accuracy);
        let ci95 = if n > 1 {
            let var = task_accuracy.iter().map(|a| (a - mean_acc).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { macro_f1: mean(&task_f1), task_accuracy, task_f1, mean_acc, ci95 }
    }
}

/// Accuracy and macro-F1 of each episode, without any mixup.
pub fn score_episodes(x: &Array2<f64>, episodes: &[Episode], theta: &Array2<f64>) -> Result<Metrics> {
    let mut acc = Vec::with_capacity(episodes.len());
    let mut f1 = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let pred = predict(x, ep, theta)?;
        let truth = ep.query_labels();
        acc.push(accuracy(&truth, &pred));
        f1.push(macro_f1(&truth, &pred, ep.way()));
    }
    Ok(Metrics::from_tasks(acc, f1))
}

/// Meta-test evaluation over `n_tasks` episodes; task `t` uses `stream.child(t)`.
pub fn evaluate(
    input: &EncoderInput,
    params: &ModelParams,
    sampler: &EpisodeSampler,
    n_tasks: usize,
    stream: SeedStream,
) -> Result<Metrics> {
    let x = input.embed(&params.encoder)?;
    let episodes = sampler.sample_many(n_tasks, stream)?;
    score_episodes(&x, &episodes, &params.metric.theta)
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    moments: BTreeMap<ParamId, (Array2<f64>, Array2<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, moments: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &GradientMap) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (&id, g) in grads.iter() {
            let p = params.get_mut(id);
            let g = if self.weight_decay > 0.0 { g + &(&*p * self.weight_decay) } else { g.clone() };
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Array2::zeros(g.dim()), Array2::zeros(g.dim())));
            ndarray::Zip::from(&mut *m).and(&g).for_each(|m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            ndarray::Zip::from(&mut *v).and(&g).for_each(|v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let (lr, eps) = (self.lr, self.eps);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Epochs between checkpoints.
    pub val_every: usize,
    pub val_tasks: usize,
    /// Checkpoints without validation improvement before stopping.
    pub patience: usize,
    pub mixup: MixupConfig,
    /// Draw fresh mixup recipes every epoch instead of once before training.
    pub regenerate_mixup: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 2000,
            lr: 1e-2,
            weight_decay: 0.0,
            val_every: 10,
            val_tasks: 20,
            patience: 5,
            mixup: MixupConfig::default(),
            regenerate_mixup: true,
        }
    }
}

/// Optional episode samplers consulted at checkpoints.
#[derive(Debug, Clone, Copy, Default)]
pub struct Monitors<'a> {
    /// Drives early stopping and best-parameter selection.
    pub validation: Option<&'a EpisodeSampler>,
    /// Meta-test classes used only to record the generalization gap.
    pub test: Option<&'a EpisodeSampler>,
    pub test_tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    /// Accuracy on the un-augmented training pool.
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub test_acc: Option<f64>,
    /// `train_acc − test_acc` when a test monitor is present.
    pub gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean task loss of each epoch, measured before that epoch's update.
    pub losses: Vec<f64>,
    pub checkpoints: Vec<Checkpoint>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: TrainHistory,
}

/// One forward/backward pass over every task of an epoch plan.
pub fn epoch_loss(input: &EncoderInput, params: &ModelParams, plan: &EpochPlan) -> Result<(f64, GradientMap)> {
    let mut tape = Tape::new();
    let vars = EncoderVars::register(&mut tape, &params.encoder)?;
    let theta = tape.param(THETA, &params.metric.theta)?;
    let x = input.forward(&mut tape, vars)?;
    let tasks = materialize_plan(&mut tape, x, plan)?;
    if tasks.is_empty() {
        return Err(Error::Contract("epoch plan has no tasks".into()));
    }
    let losses = tasks
        .iter()
        .map(|t| episode_loss_on_tape(&mut tape, t, theta))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.vstack(&losses)?;
    let total = tape.sum(stacked)?;
    let mean = tape.scale(total, 1.0 / losses.len() as f64)?;
    Ok((tape.scalar(mean)?, tape.gradients(mean)?))
}

fn checkpoint(
    input: &EncoderInput,
    params: &ModelParams,
    epoch: usize,
    pool: &[Episode],
    val: Option<&[Episode]>,
    test: Option<&[Episode]>,
) -> Result<Checkpoint> {
    let x = input.embed(&params.encoder)?;
    let theta = &params.metric.theta;
    let train_acc = score_episodes(&x, pool, theta)?.mean_acc;
    let val_acc = val.map(|v| score_episodes(&x, v, theta)).transpose()?.map(|m| m.mean_acc);
    let test_acc = test.map(|t| score_episodes(&x, t, theta)).transpose()?.map(|m| m.mean_acc);
    Ok(Checkpoint { epoch, train_acc, val_acc, test_acc, gap: test_acc.map(|t| train_acc - t) })
}

/// Episodic training over the fixed pool with per-epoch mixup.
///
/// Each epoch regenerates the mixup recipes (unless
/// `regenerate_mixup` is off, which draws them once), averages the loss over every
/// task of `D_all` and applies one Adam step to all parameters. With a
/// validation monitor the parameters of the best checkpoint are returned
/// and training stops after `patience` checkpoints without improvement;
/// otherwise the final parameters are returned.
pub fn train(
    input: &EncoderInput,
    pool: &[Episode],
    init: ModelParams,
    config: &TrainConfig,
    monitors: Monitors<'_>,
    stream: SeedStream,
) -> Result<TrainOutcome> {
    config.mixup.validate()?;
    let mut history = TrainHistory::default();
    if config.max_epochs == 0 {
        return Ok(TrainOutcome { params: init, history });
    }
    if pool.is_empty() {
        return Err(Error::Contract("training pool is empty".into()));
    }
    let every = config.val_every.max(1);
    let val_eps = match monitors.validation {
        Some(s) => s.sample_many(config.val_tasks, stream.child(purpose::VALIDATION))?,
        None => Vec::new(),
    };
    let test_eps = match monitors.test {
        Some(s) => s.sample_many(monitors.test_tasks, stream.child(purpose::MONITOR))?,
        None => Vec::new(),
    };
    let has_val = monitors.validation.is_some();
    let val = has_val.then_some(val_eps.as_slice());
    let test = monitors.test.map(|_| test_eps.as_slice());
    let mixup_stream = stream.child(purpose::MIXUP);
    let fixed_plan = if config.regenerate_mixup {
        None
    } else {
        Some(EpochPlan::generate(pool, &config.mixup, mixup_stream.child(0))?)
    };

    let mut params = init;
    let mut adam = Adam::new(config.lr, config.weight_decay);
    let first = checkpoint(input, &params, 0, pool, val, test)?;
    let mut best = (first.val_acc.unwrap_or(f64::NEG_INFINITY), params.clone(), 0usize);
    history.checkpoints.push(first);
    let mut stale = 0;

    for epoch in 1..=config.max_epochs {
        let diverged = |reason: String| Error::Training { epoch, reason };
        let fresh;
        let plan = match &fixed_plan {
            Some(p) => p,
            None => {
                fresh = EpochPlan::generate(pool, &config.mixup, mixup_stream.child(epoch as u64))?;
                &fresh
            }
        };
        let (loss, grads) = epoch_loss(input, &params, plan).map_err(|e| match e {
            Error::Domain(reason) => diverged(reason),
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(diverged(format!("loss is {loss}")));
        }
        history.losses.push(loss);
        adam.step(&mut params, &grads);
        if !params.is_finite() {
            return Err(diverged("parameters became non-finite".into()));
        }

        if epoch % every == 0 || epoch == config.max_epochs {
            let cp = checkpoint(input, &params, epoch, pool, val, test)?;
            debug!("epoch {epoch}: loss {loss:.5} train acc {:.4} val {:?}", cp.train_acc, cp.val_acc);
            let val = cp.val_acc;
            history.checkpoints.push(cp);
            if let Some(v) = val {
                if v > best.0 {
                    best = (v, params.clone(), epoch);
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= config.patience {
                        info!("early stop at epoch {epoch}, best epoch {}", best.2);
                        history.stopped_early = true;
                        break;
                    }
                }
            }
        }
    }

    let params = if has_val {
        history.best_epoch = best.2;
        best.1
    } else {
        history.best_epoch = history.losses.len();
        params
    };
    Ok(TrainOutcome { params, history })
}
