//! Dual-level mixup.
//!
//! Mixup happens in two stages. Recipe generation is pure bookkeeping: it
//! decides which rows get interpolated and with which coefficient, using
//! only episode structure and a seed stream. Materialization then evaluates
//! the recipes against the current forward pass on a [`Tape`], so gradients
//! flow back into the encoder through every interpolated row.
//!
//! * Within-task: pairs of distinct same-class nodes of one episode are
//!   interpolated, separately for support and query. Labels are copied.
//! * Across-task: two pool tasks are drawn, and N class pairs `(k, k′)`
//!   produce N synthetic classes. Each synthetic support row interpolates
//!   the two support prototypes, each query row the two query prototypes,
//!   with a fresh coefficient per row. In instance mode the individual
//!   same-position samples are interpolated instead of the prototypes.
//!
//! Mixing coefficients follow `Beta(η, γ)`, sampled as `X / (X + Y)` with
//! `X ~ Gamma(η, 1)` and `Y ~ Gamma(γ, 1)`. The gamma-ratio construction
//! stays valid for shapes below one, which covers the default `η = γ = 0.5`.

use std::collections::BTreeSet;

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::seed::SeedStream;

const PAIR_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AcrossMode {
    #[default]
    Prototype,
    Instance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixupConfig {
    pub eta: f64,
    pub gamma: f64,
    /// Generated rows per original row, per class; `0` disables within-task mixup.
    pub within_ratio: f64,
    /// Number of interpolated tasks; `0` disables across-task mixup.
    pub t_aug: usize,
    pub include_original: bool,
    pub across_mode: AcrossMode,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            eta: 0.5,
            gamma: 0.5,
            within_ratio: 1.0,
            t_aug: 0,
            include_original: true,
            across_mode: AcrossMode::Prototype,
        }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.gamma > 0.0) {
            return Err(Error::Parameter(format!(
                "Beta shapes must be positive, got eta = {}, gamma = {}",
                self.eta, self.gamma
            )));
        }
        if !(self.within_ratio >= 0.0 && self.within_ratio.is_finite()) {
            return Err(Error::Parameter(format!("within_ratio must be >= 0, got {}", self.within_ratio)));
        }
        Ok(())
    }
}

/// Draws `λ ~ Beta(eta, gamma)`.
pub fn sample_beta<R: Rng + ?Sized>(eta: f64, gamma: f64, rng: &mut R) -> Result<f64> {
    BetaSampler::new(eta, gamma)?.sample(rng)
}

#[derive(Debug, Clone, Copy)]
pub struct BetaSampler {
    x: Gamma<f64>,
    y: Gamma<f64>,
}

impl BetaSampler {
    pub fn new(eta: f64, gamma: f64) -> Result<Self> {
        let bad = || Error::Parameter(format!("Beta shapes must be positive, got {eta}, {gamma}"));
        if !(eta > 0.0 && gamma > 0.0) {
            return Err(bad());
        }
        Ok(Self {
            x: Gamma::new(eta, 1.0).map_err(|_| bad())?,
            y: Gamma::new(gamma, 1.0).map_err(|_| bad())?,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        // Both gammas can underflow to zero for very small shapes.
        for _ in 0..1000 {
            let x = self.x.sample(rng);
            let y = self.y.sample(rng);
            if x + y > 0.0 {
                return Ok((x / (x + y)).clamp(0.0, 1.0));
            }
        }
        Err(Error::Parameter("Beta sampler underflowed repeatedly".into()))
    }
}

/// Which set of a task a row or prototype belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Set {
    Support,
    Query,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecipeKind {
    WithinSupport,
    WithinQuery,
    AcrossSupport,
    AcrossQuery,
}

/// One interpolation endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    /// A graph node, i.e. a row of the embedding matrix.
    Node(usize),
    /// Mean of the (augmented) `set` rows of local class `class` in pool task `task`.
    Prototype { task: usize, class: usize, set: Set },
    /// The `position`-th (augmented) `set` row of local class `class` in pool task `task`.
    Sample { task: usize, class: usize, set: Set, position: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixRecipe {
    pub kind: RecipeKind,
    pub sources: (Source, Source),
    pub lambda: f64,
    /// Local class label carried by the generated row.
    pub class: usize,
}

/// An original episode plus its within-task recipes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedEpisode {
    pub base: Episode,
    pub extra_support: Vec<MixRecipe>,
    pub extra_query: Vec<MixRecipe>,
}

impl AugmentedEpisode {
    pub fn unaugmented(base: Episode) -> Self {
        Self { base, extra_support: Vec::new(), extra_query: Vec::new() }
    }

    /// `m′ = n_s + n_s′`.
    pub fn support_count(&self) -> usize {
        self.base.support.len() + self.extra_support.len()
    }

    /// `m = n_q + n_q′`.
    pub fn query_count(&self) -> usize {
        self.base.query.len() + self.extra_query.len()
    }

    pub fn way(&self) -> usize {
        self.base.way()
    }

    /// Local labels of the augmented support rows, originals first.
    pub fn support_labels(&self) -> Vec<usize> {
        self.base
            .support_labels()
            .into_iter()
            .chain(self.extra_support.iter().map(|r| r.class))
            .collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.base
            .query_labels()
            .into_iter()
            .chain(self.extra_query.iter().map(|r| r.class))
            .collect()
    }

    /// Number of augmented rows of `class` in `set`.
    pub fn class_count(&self, class: usize, set: Set) -> usize {
        let labels = match set {
            Set::Support => self.support_labels(),
            Set::Query => self.query_labels(),
        };
        labels.iter().filter(|&&c| c == class).count()
    }
}

/// The synthetic class identity `Φ = (task i, class k, task j, class k′)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IdentityPair {
    pub task_i: usize,
    pub class_k: usize,
    pub task_j: usize,
    pub class_k2: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolatedTask {
    pub classes: Vec<IdentityPair>,
    pub support: Vec<MixRecipe>,
    pub query: Vec<MixRecipe>,
}

impl InterpolatedTask {
    pub fn way(&self) -> usize {
        self.classes.len()
    }
}

fn within_recipes<R: Rng>(
    members: &[(usize, usize)],
    way: usize,
    per_class: usize,
    kind: RecipeKind,
    beta: &BetaSampler,
    rng: &mut R,
) -> Result<Vec<MixRecipe>> {
    let mut out = Vec::with_capacity(way * per_class);
    for class in 0..way {
        let nodes: Vec<usize> = members.iter().filter(|m| m.1 == class).map(|m| m.0).collect();
        if nodes.is_empty() || per_class == 0 {
            continue;
        }
        if nodes.len() == 1 {
            warn!("class {class} has a single sample; within-task mixup duplicates it");
        }
        for _ in 0..per_class {
            let (a, b) = if nodes.len() == 1 {
                (nodes[0], nodes[0])
            } else {
                let i = rng.random_range(0..nodes.len());
                let mut j = rng.random_range(0..nodes.len() - 1);
                if j >= i {
                    j += 1;
                }
                (nodes[i], nodes[j])
            };
            let lambda = beta.sample(rng)?;
            out.push(MixRecipe { kind, sources: (Source::Node(a), Source::Node(b)), lambda, class });
        }
    }
    Ok(out)
}

/// Generates within-task recipes: `floor(within_ratio × K)` support and
/// `floor(within_ratio × M)` query recipes per class.
pub fn within_task_mixup(episode: &Episode, config: &MixupConfig, stream: SeedStream) -> Result<AugmentedEpisode> {
    config.validate()?;
    let per_support = (config.within_ratio * episode.shape.shot as f64).floor() as usize;
    let per_query = (config.within_ratio * episode.shape.query as f64).floor() as usize;
    if per_support == 0 && per_query == 0 {
        return Ok(AugmentedEpisode::unaugmented(episode.clone()));
    }
    let beta = BetaSampler::new(config.eta, config.gamma)?;
    let mut rng = stream.rng();
    let support: Vec<(usize, usize)> = episode.support.iter().map(|m| (m.node, m.class)).collect();
    let query: Vec<(usize, usize)> = episode.query.iter().map(|m| (m.node, m.class)).collect();
    let extra_support = within_recipes(&support, episode.way(), per_support, RecipeKind::WithinSupport, &beta, &mut rng)?;
    let extra_query = within_recipes(&query, episode.way(), per_query, RecipeKind::WithinQuery, &beta, &mut rng)?;
    Ok(AugmentedEpisode { base: episode.clone(), extra_support, extra_query })
}

fn across_impl(pool: &[AugmentedEpisode], config: &MixupConfig, mode: AcrossMode, stream: SeedStream) -> Result<Vec<InterpolatedTask>> {
    config.validate()?;
    if config.t_aug == 0 {
        return Ok(Vec::new());
    }
    if pool.len() < 2 {
        return Err(Error::Capacity(format!(
            "across-task mixup needs at least 2 pool tasks, got {}",
            pool.len()
        )));
    }
    let beta = BetaSampler::new(config.eta, config.gamma)?;
    let mut tasks = Vec::with_capacity(config.t_aug);
    for t in 0..config.t_aug as u64 {
        let mut rng = stream.child(t).rng();
        let task_i = rng.random_range(0..pool.len());
        let mut task_j = rng.random_range(0..pool.len() - 1);
        if task_j >= task_i {
            task_j += 1;
        }
        let (a, b) = (&pool[task_i], &pool[task_j]);
        let way = a.way();
        let mut used = BTreeSet::new();
        let mut classes = Vec::with_capacity(way);
        for _ in 0..way {
            let mut attempt = 0;
            let pair = loop {
                let pair = IdentityPair {
                    task_i,
                    class_k: rng.random_range(0..a.way()),
                    task_j,
                    class_k2: rng.random_range(0..b.way()),
                };
                if used.insert(pair) {
                    break pair;
                }
                attempt += 1;
                if attempt >= PAIR_ATTEMPTS {
                    return Err(Error::Capacity(format!(
                        "could not draw {way} distinct class pairs from tasks {task_i} and {task_j}"
                    )));
                }
            };
            classes.push(pair);
        }
        let m_support = a.support_count();
        let m_query = a.query_count();
        let mut support = Vec::with_capacity(way * m_support);
        let mut query = Vec::with_capacity(way * m_query);
        for (synthetic, pair) in classes.iter().enumerate() {
            for (set, count, kind, out) in [
                (Set::Support, m_support, RecipeKind::AcrossSupport, &mut support),
                (Set::Query, m_query, RecipeKind::AcrossQuery, &mut query),
            ] {
                let size_i = a.class_count(pair.class_k, set);
                let size_j = b.class_count(pair.class_k2, set);
                for position in 0..count {
                    let sources = match mode {
                        AcrossMode::Prototype => (
                            Source::Prototype { task: task_i, class: pair.class_k, set },
                            Source::Prototype { task: task_j, class: pair.class_k2, set },
                        ),
                        AcrossMode::Instance => (
                            Source::Sample { task: task_i, class: pair.class_k, set, position: position % size_i },
                            Source::Sample { task: task_j, class: pair.class_k2, set, position: position % size_j },
                        ),
                    };
                    let lambda = beta.sample(&mut rng)?;
                    out.push(MixRecipe { kind, sources, lambda, class: synthetic });
                }
            }
        }
        tasks.push(InterpolatedTask { classes, support, query });
    }
    Ok(tasks)
}

/// Prototype-level across-task mixup.
pub fn across_task_mixup(pool: &[AugmentedEpisode], config: &MixupConfig, stream: SeedStream) -> Result<Vec<InterpolatedTask>> {
    across_impl(pool, config, AcrossMode::Prototype, stream)
}

/// Instance-level variant: same-position samples are interpolated. Positions
/// beyond a class's size wrap around.
pub fn across_task_mixup_instance(pool: &[AugmentedEpisode], config: &MixupConfig, stream: SeedStream) -> Result<Vec<InterpolatedTask>> {
    across_impl(pool, config, AcrossMode::Instance, stream)
}

/// One task of `D_all`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskRef {
    Original(usize),
    Interpolated(usize),
}

/// The recipes of one training epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochPlan {
    pub augmented: Vec<AugmentedEpisode>,
    pub interpolated: Vec<InterpolatedTask>,
    pub include_original: bool,
}

impl EpochPlan {
    /// Generates fresh recipes for every pool task and `t_aug` interpolated tasks.
    pub fn generate(pool: &[Episode], config: &MixupConfig, stream: SeedStream) -> Result<Self> {
        let within = stream.child(0);
        let augmented = pool
            .iter()
            .enumerate()
            .map(|(t, ep)| within_task_mixup(ep, config, within.child(t as u64)))
            .collect::<Result<Vec<_>>>()?;
        let interpolated = across_impl(&augmented, config, config.across_mode, stream.child(1))?;
        Ok(Self { augmented, interpolated, include_original: config.include_original })
    }

    /// Tasks of `D_all`: originals (when included) followed by interpolated ones.
    pub fn tasks(&self) -> Vec<TaskRef> {
        let originals = if self.include_original { self.augmented.len() } else { 0 };
        (0..originals)
            .map(TaskRef::Original)
            .chain((0..self.interpolated.len()).map(TaskRef::Interpolated))
            .collect()
    }
}

/// Support and query rows of one task, evaluated on a tape.
#[derive(Debug, Clone)]
pub struct TaskRows {
    pub way: usize,
    pub support: Var,
    pub support_labels: Vec<usize>,
    pub query: Var,
    pub query_labels: Vec<usize>,
}

impl TaskRows {
    fn rows(&self, set: Set) -> (Var, &[usize]) {
        match set {
            Set::Support => (self.support, &self.support_labels),
            Set::Query => (self.query, &self.query_labels),
        }
    }

    /// Row indices of `class` within `set`, in order.
    pub fn class_rows(&self, class: usize, set: Set) -> Vec<usize> {
        self.rows(set)
            .1
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == class)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Lazily computed per-class prototypes of materialized pool tasks.
pub struct PrototypeCache<'a> {
    pool: &'a [TaskRows],
    cache: std::collections::HashMap<(usize, usize, bool), Var>,
}

impl<'a> PrototypeCache<'a> {
    pub fn new(pool: &'a [TaskRows]) -> Self {
        Self { pool, cache: Default::default() }
    }

    fn task(&self, task: usize) -> Result<&'a TaskRows> {
        self.pool
            .get(task)
            .ok_or_else(|| Error::Contract(format!("recipe references task {task}, pool has {}", self.pool.len())))
    }

    pub fn prototype(&mut self, tape: &mut Tape, task: usize, class: usize, set: Set) -> Result<Var> {
        let key = (task, class, set == Set::Support);
        if let Some(&v) = self.cache.get(&key) {
            return Ok(v);
        }
        let rows = self.task(task)?;
        let idx = rows.class_rows(class, set);
        if idx.is_empty() {
            return Err(Error::Contract(format!("task {task} has no {set:?} rows for class {class}")));
        }
        let sel = tape.row_select(rows.rows(set).0, &idx)?;
        let proto = tape.row_mean(sel)?;
        self.cache.insert(key, proto);
        Ok(proto)
    }

    /// (matrix, row index) locating a single-row source.
    fn sample(&self, task: usize, class: usize, set: Set, position: usize) -> Result<(Var, usize)> {
        let rows = self.task(task)?;
        let idx = rows.class_rows(class, set);
        let row = idx.get(position).copied().ok_or_else(|| {
            Error::Contract(format!("task {task} class {class} has no {set:?} row at position {position}"))
        })?;
        Ok((rows.rows(set).0, row))
    }
}

/// Evaluates a batch of recipes into an `r × h` matrix on `tape`.
///
/// `x` is the node embedding matrix; `protos` resolves task-level sources.
pub fn materialize_batch(
    tape: &mut Tape,
    x: Var,
    recipes: &[MixRecipe],
    mut protos: Option<&mut PrototypeCache<'_>>,
) -> Result<Var> {
    if recipes.is_empty() {
        return Err(Error::Contract("empty recipe batch".into()));
    }
    let n = tape.shape(x).0;
    // Collect every distinct source row into one matrix, then gather.
    let mut blocks: Vec<Var> = Vec::new();
    let mut node_rows: Vec<usize> = Vec::new();
    let mut slots: std::collections::HashMap<Source, usize> = Default::default();
    let mut extra: Vec<(Source, Var)> = Vec::new();
    let mut resolve = |tape: &mut Tape, src: Source, protos: &mut Option<&mut PrototypeCache<'_>>| -> Result<()> {
        if slots.contains_key(&src) {
            return Ok(());
        }
        match src {
            Source::Node(node) => {
                if node >= n {
                    return Err(Error::Contract(format!("recipe references node {node}, embeddings have {n} rows")));
                }
                slots.insert(src, node_rows.len());
                node_rows.push(node);
            }
            Source::Prototype { task, class, set } => {
                let cache = protos
                    .as_deref_mut()
                    .ok_or_else(|| Error::Contract("task-level recipe without a prototype cache".into()))?;
                let v = cache.prototype(tape, task, class, set)?;
                slots.insert(src, usize::MAX);
                extra.push((src, v));
            }
            Source::Sample { task, class, set, position } => {
                let cache = protos
                    .as_deref_mut()
                    .ok_or_else(|| Error::Contract("task-level recipe without a prototype cache".into()))?;
                let (m, row) = cache.sample(task, class, set, position)?;
                let v = tape.row_select(m, &[row])?;
                slots.insert(src, usize::MAX);
                extra.push((src, v));
            }
        }
        Ok(())
    };
    for r in recipes {
        resolve(tape, r.sources.0, &mut protos)?;
        resolve(tape, r.sources.1, &mut protos)?;
    }
    let mut index: std::collections::HashMap<Source, usize> = Default::default();
    let mut offset = 0;
    if !node_rows.is_empty() {
        blocks.push(tape.row_select(x, &node_rows)?);
        for (src, &slot) in slots.iter().filter(|(_, &s)| s != usize::MAX) {
            index.insert(*src, slot);
        }
        offset = node_rows.len();
    }
    for (k, (src, v)) in extra.into_iter().enumerate() {
        index.insert(src, offset + k);
        blocks.push(v);
    }
    let table = if blocks.len() == 1 { blocks[0] } else { tape.vstack(&blocks)? };
    let first: Vec<usize> = recipes.iter().map(|r| index[&r.sources.0]).collect();
    let second: Vec<usize> = recipes.iter().map(|r| index[&r.sources.1]).collect();
    let lambdas: Vec<f64> = recipes.iter().map(|r| r.lambda).collect();
    let a = tape.row_select(table, &first)?;
    let b = tape.row_select(table, &second)?;
    tape.convex_rows(a, b, &lambdas)
}

/// Evaluates a single recipe into a `1 × h` row.
pub fn materialize(tape: &mut Tape, x: Var, recipe: &MixRecipe, protos: Option<&mut PrototypeCache<'_>>) -> Result<Var> {
    materialize_batch(tape, x, std::slice::from_ref(recipe), protos)
}

/// Rows of an original episode plus its within-task rows.
pub fn materialize_augmented(tape: &mut Tape, x: Var, ep: &AugmentedEpisode) -> Result<TaskRows> {
    let mut build = |nodes: Vec<usize>, extra: &[MixRecipe]| -> Result<Var> {
        let base = tape.row_select(x, &nodes)?;
        if extra.is_empty() {
            return Ok(base);
        }
        let mixed = materialize_batch(tape, x, extra, None)?;
        tape.vstack(&[base, mixed])
    };
    let support = build(ep.base.support_nodes(), &ep.extra_support)?;
    let query = build(ep.base.query_nodes(), &ep.extra_query)?;
    Ok(TaskRows {
        way: ep.way(),
        support,
        support_labels: ep.support_labels(),
        query,
        query_labels: ep.query_labels(),
    })
}

/// Rows of an interpolated task, resolved against the materialized pool.
pub fn materialize_interpolated(tape: &mut Tape, x: Var, task: &InterpolatedTask, protos: &mut PrototypeCache<'_>) -> Result<TaskRows> {
    let support = materialize_batch(tape, x, &task.support, Some(protos))?;
    let query = materialize_batch(tape, x, &task.query, Some(protos))?;
    Ok(TaskRows {
        way: task.way(),
        support,
        support_labels: task.support.iter().map(|r| r.class).collect(),
        query,
        query_labels: task.query.iter().map(|r| r.class).collect(),
    })
}

/// Materializes every task of `D_all` for one epoch, in [`EpochPlan::tasks`] order.
pub fn materialize_plan(tape: &mut Tape, x: Var, plan: &EpochPlan) -> Result<Vec<TaskRows>> {
    let pool = plan
        .augmented
        .iter()
        .map(|ep| materialize_augmented(tape, x, ep))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(plan.tasks().len());
    if plan.include_original {
        out.extend(pool.iter().cloned());
    }
    let mut cache = PrototypeCache::new(&pool);
    for task in &plan.interpolated {
        out.push(materialize_interpolated(tape, x, task, &mut cache)?);
    }
    Ok(out)
}
