//! End-to-end runs behind the command-line subcommands.
//!
//! All randomness of a run derives from `RunConfig::seed`: the training
//! pool, the initialization, mixup, validation and monitoring episodes, the
//! test episodes and the Rademacher signs each use their own child stream.

use std::path::Path;

use log::{info, warn};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{features_csv, read, write, Dataset};
use crate::encoder::EncoderInput;
use crate::episodes::{build_task_pool, ClassSplit, Episode, EpisodeSampler};
use crate::error::{Error, Result};
use crate::graph::{normalize, propagate, SparseGraph};
use crate::protonet::{evaluate, train, Metrics, ModelParams, Monitors, TrainHistory};
use crate::seed::{purpose, SeedStream};
use crate::theory::{gap_trace, query_embeddings, rademacher_mc, BoundInputs, BoundReport, EmbeddingMoments, GapPoint};

pub const CONFIG_FILE: &str = "config.json";
pub const PARAMS_FILE: &str = "params.json";
pub const RESULTS_JSON: &str = "results.json";
pub const RESULTS_CSV: &str = "results.csv";
pub const GAP_TRACE_FILE: &str = "gap_trace.csv";
pub const BOUND_REPORT_FILE: &str = "bound_report.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";

/// A graph with its split and precomputed encoder input.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub graph: SparseGraph,
    pub split: ClassSplit,
    pub input: EncoderInput,
}

impl Prepared {
    /// Loads a dataset directory, reusing its propagation cache.
    pub fn load(config: &RunConfig, dir: impl AsRef<Path>) -> Result<Self> {
        let ds = Dataset::load(dir)?;
        let (adj, p) = ds.propagated(config.l_hops)?;
        let input = EncoderInput::new(p, adj.degrees(), !config.no_degree)?;
        Ok(Self { graph: ds.graph, split: ds.split, input })
    }

    pub fn in_memory(config: &RunConfig, graph: SparseGraph, split: ClassSplit) -> Result<Self> {
        split.validate(&graph.classes())?;
        let adj = normalize(&graph);
        let p = propagate(&adj, graph.features().view(), config.l_hops)?;
        let input = EncoderInput::new(p, adj.degrees(), !config.no_degree)?;
        Ok(Self { graph, split, input })
    }

    pub fn sampler(&self, config: &RunConfig, classes: &[usize]) -> Result<EpisodeSampler> {
        EpisodeSampler::new(&self.graph.nodes_by_class(), classes, config.shape())
    }

    fn validation_sampler(&self, config: &RunConfig) -> Result<Option<EpisodeSampler>> {
        if self.split.val.is_empty() {
            info!("no validation classes; training runs to max_epochs");
            return Ok(None);
        }
        match self.sampler(config, &self.split.val) {
            Ok(s) => Ok(Some(s)),
            Err(Error::Capacity(msg)) => {
                warn!("validation split cannot form episodes ({msg}); early stopping disabled");
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    fn check_params(&self, params: &ModelParams) -> Result<()> {
        if params.encoder.feature_dim() != self.input.feature_dim() {
            return Err(Error::Shape(format!(
                "parameters expect {} features, dataset has {}",
                params.encoder.feature_dim(),
                self.input.feature_dim()
            )));
        }
        Ok(())
    }
}

fn root(config: &RunConfig) -> SeedStream {
    SeedStream::new(config.seed, 0)
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub params: ModelParams,
    pub history: TrainHistory,
    /// The original training tasks.
    pub pool: Vec<Episode>,
    /// Meta-test metrics of the returned parameters.
    pub metrics: Metrics,
}

/// Trains on the training classes and evaluates on the test classes.
pub fn train_model(prepared: &Prepared, config: &RunConfig) -> Result<TrainRun> {
    config.validate()?;
    let stream = root(config);
    let train_sampler = prepared.sampler(config, &prepared.split.train)?;
    let test_sampler = prepared.sampler(config, &prepared.split.test)?;
    let val_sampler = prepared.validation_sampler(config)?;
    let pool = build_task_pool(&train_sampler, config.t_org, stream.child(purpose::TASK_POOL))?;
    let init = ModelParams::init(prepared.input.feature_dim(), config.hidden_dim, &mut stream.child(purpose::INIT).rng())?;
    let monitors = Monitors {
        validation: val_sampler.as_ref(),
        test: (config.monitor_tasks > 0).then_some(&test_sampler),
        test_tasks: config.monitor_tasks,
    };
    let out = train(&prepared.input, &pool, init, &config.train(), monitors, stream)?;
    let metrics = evaluate(&prepared.input, &out.params, &test_sampler, config.eval_tasks, stream.child(purpose::TEST))?;
    info!(
        "trained {} epochs; test accuracy {:.4} ± {:.4}, macro-F1 {:.4}",
        out.history.losses.len(),
        metrics.mean_acc,
        metrics.ci95,
        metrics.macro_f1
    );
    Ok(TrainRun { params: out.params, history: out.history, pool, metrics })
}

/// Meta-test metrics of `params` on the test classes.
pub fn evaluate_model(prepared: &Prepared, config: &RunConfig, params: &ModelParams) -> Result<Metrics> {
    prepared.check_params(params)?;
    let sampler = prepared.sampler(config, &prepared.split.test)?;
    evaluate(&prepared.input, params, &sampler, config.eval_tasks, root(config).child(purpose::TEST))
}

/// Bound quantities for trained parameters.
///
/// Moments come from the centered query embeddings of the training pool;
/// `ν` is the largest `θ_jᵀΣθ_j` over the columns of the projection.
pub fn bound_report(prepared: &Prepared, config: &RunConfig, run: &TrainRun) -> Result<BoundReport> {
    let x = prepared.input.embed(&run.params.encoder)?;
    let q = query_embeddings(&x, &run.pool);
    let moments = EmbeddingMoments::compute(q.view())?;
    let nu = moments.nu_of_projection(run.params.metric.theta.view())?;
    let originals = if config.include_original { config.t_org } else { 0 };
    let inputs = BoundInputs {
        nu,
        rank: moments.rank,
        m: config.n_way * config.queries_per_class(),
        t: originals + config.t_aug(),
        n_q: config.n_way * config.m_query,
        epsilon: config.epsilon,
    };
    let rademacher = rademacher_mc(q.view(), nu, config.rademacher_trials, root(config).child(purpose::RADEMACHER))?;
    BoundReport::new(inputs, rademacher, gap_trace(&run.history.checkpoints))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub config: RunConfig,
    pub per_task_accuracy: Vec<f64>,
    pub per_task_f1: Vec<f64>,
    pub mean_acc: f64,
    pub macro_f1: f64,
    pub ci95: f64,
    pub history: Option<TrainHistory>,
}

impl ResultsFile {
    pub fn new(config: &RunConfig, metrics: &Metrics, history: Option<TrainHistory>) -> Self {
        Self {
            config: config.clone(),
            per_task_accuracy: metrics.task_accuracy.clone(),
            per_task_f1: metrics.task_f1.clone(),
            mean_acc: metrics.mean_acc,
            macro_f1: metrics.macro_f1,
            ci95: metrics.ci95,
            history,
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn results_csv(metrics: &Metrics) -> String {
    let mut out = String::from("task,accuracy,macro_f1\n");
    for (t, (a, f)) in metrics.task_accuracy.iter().zip(&metrics.task_f1).enumerate() {
        out.push_str(&format!("{t},{a},{f}\n"));
    }
    out
}

fn gap_csv(trace: &[GapPoint]) -> String {
    let mut out = String::from("epoch,train_acc,test_acc,gap\n");
    for g in trace {
        out.push_str(&format!("{},{},{},{}\n", g.epoch, g.train_acc, g.test_acc, g.gap));
    }
    out
}

fn write_results(out: &Path, config: &RunConfig, metrics: &Metrics, history: Option<TrainHistory>) -> Result<()> {
    write(&out.join(CONFIG_FILE), &config.to_json())?;
    write(&out.join(RESULTS_JSON), &to_json(&ResultsFile::new(config, metrics, history)))?;
    write(&out.join(RESULTS_CSV), &results_csv(metrics))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let params: ModelParams = serde_json::from_str(&read(path)?)
        .map_err(|e| Error::Format(format!("{}: malformed parameter file: {e}", path.display())))?;
    if params.metric.theta.dim() != (params.encoder.hidden(), params.encoder.hidden()) {
        return Err(Error::Shape(format!("{}: projection does not match the hidden width", path.display())));
    }
    if !params.is_finite() {
        return Err(Error::Format(format!("{}: non-finite parameter", path.display())));
    }
    Ok(params)
}

/// `train`: writes parameters, results and the gap trace to `out`.
pub fn run_train(config: &RunConfig, data: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<TrainRun> {
    let out = out.as_ref();
    let prepared = Prepared::load(config, data)?;
    let run = train_model(&prepared, config)?;
    write(&out.join(PARAMS_FILE), &to_json(&run.params))?;
    write_results(out, config, &run.metrics, Some(run.history.clone()))?;
    write(&out.join(GAP_TRACE_FILE), &gap_csv(&gap_trace(&run.history.checkpoints)))?;
    Ok(run)
}

/// `eval`: scores saved parameters on the test classes.
pub fn run_eval(config: &RunConfig, data: impl AsRef<Path>, params: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<Metrics> {
    config.validate()?;
    let prepared = Prepared::load(config, data)?;
    let params = load_params(params)?;
    let metrics = evaluate_model(&prepared, config, &params)?;
    write_results(out.as_ref(), config, &metrics, None)?;
    Ok(metrics)
}

/// `verify`: trains, then writes the bound report and the gap trace.
pub fn run_verify(config: &RunConfig, data: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<BoundReport> {
    let out = out.as_ref();
    let prepared = Prepared::load(config, data)?;
    let run = train_model(&prepared, config)?;
    let report = bound_report(&prepared, config, &run)?;
    write(&out.join(CONFIG_FILE), &config.to_json())?;
    write(&out.join(BOUND_REPORT_FILE), &to_json(&report))?;
    write(&out.join(GAP_TRACE_FILE), &gap_csv(&report.empirical_gap))?;
    Ok(report)
}

/// `dump-embeddings`: row `i` of the output holds the embedding of node `i`.
pub fn run_dump_embeddings(
    config: &RunConfig,
    data: impl AsRef<Path>,
    params: impl AsRef<Path>,
    out: impl AsRef<Path>,
) -> Result<Array2<f64>> {
    config.validate()?;
    let prepared = Prepared::load(config, data)?;
    let params = load_params(params)?;
    prepared.check_params(&params)?;
    let x = prepared.input.embed(&params.encoder)?;
    write(&out.as_ref().join(EMBEDDINGS_FILE), &features_csv(&x))?;
    Ok(x)
}
