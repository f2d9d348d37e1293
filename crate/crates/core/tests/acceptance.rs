//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a gating criterion fails.
//!
//! Set `SMILE_REAL_DATA=<dataset dir>` to run the real-data protocol
//! (criterion 7); it is skipped otherwise and never gates.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use smile::config::RunConfig;
use smile::data::{synth, SynthSpec};
use smile::encoder::EncoderInput;
use smile::episodes::{build_task_pool, Episode, EpisodeSampler, EpisodeShape};
use smile::graph::{normalize, propagate, SparseGraph};
use smile::mixup::{
    materialize_plan, AcrossMode, EpochPlan, MixRecipe, MixupConfig, Set, Source, TaskRef,
};
use smile::pipeline::{run_eval, run_train, train_model, Prepared};
use smile::protonet::{compute_prototypes, epoch_loss, macro_f1, nearest_prototype, ModelParams};
use smile::seed::SeedStream;
use smile::theory::{
    binary_loss, lambda_bar, rademacher_mc, sample_lambda_mixture, taylor_check, theorem1_bound, theorem2_bound,
};
use smile::autodiff::Tape;

/// Training epochs for the synthetic benchmark runs.
const BENCH_EPOCHS: usize = 300;
const BENCH_SEEDS: u64 = 20;
const SANITY_SEEDS: usize = 5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize, d: usize, classes: usize) -> (SparseGraph, Vec<(usize, usize)>) {
    let mut edges = Vec::new();
    let n_edges = rng.random_range(0..=2 * n);
    for _ in 0..n_edges {
        edges.push((rng.random_range(0..n), rng.random_range(0..n)));
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    let g = SparseGraph::new(&edges, gaussian(rng, (n, d)), labels).unwrap();
    (g, edges)
}

fn dense_normalized(n: usize, edges: &[(usize, usize)]) -> Array2<f64> {
    let mut a = Array2::<f64>::eye(n);
    for &(u, v) in edges {
        if u != v {
            a[[u, v]] = 1.0;
            a[[v, u]] = 1.0;
        }
    }
    let deg: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    Array2::from_shape_fn((n, n), |(i, j)| a[[i, j]] / (deg[i] * deg[j]).sqrt())
}

fn criterion_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let instances = 60;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for trial in 0..instances {
        let d = rng.random_range(2..5);
        let h = rng.random_range(2..4);
        let features = gaussian(&mut rng, (5, d));
        let mut edges = vec![(0, 1), (1, 2), (2, 3), (3, 4)];
        for _ in 0..rng.random_range(0..4) {
            edges.push((rng.random_range(0..5), rng.random_range(0..5)));
        }
        let g = SparseGraph::new(&edges, features, vec![0, 1, 0, 1, 0]).unwrap();
        let adj = normalize(&g);
        let p = propagate(&adj, g.features().view(), rng.random_range(1..3)).unwrap();
        let input = EncoderInput::new(p, adj.degrees(), rng.random_bool(0.8)).unwrap();
        let sampler = EpisodeSampler::new(&g.nodes_by_class(), &[0, 1], EpisodeShape { way: 2, shot: 1, query: 1 }).unwrap();
        let pool = build_task_pool(&sampler, rng.random_range(2..4), SeedStream::new(trial, 0)).unwrap();
        let mixup = MixupConfig {
            eta: rng.random_range(0.3..2.0),
            gamma: rng.random_range(0.3..2.0),
            within_ratio: [0.0, 1.0, 2.0][rng.random_range(0..3)],
            t_aug: rng.random_range(0..3),
            include_original: true,
            across_mode: if rng.random_bool(0.5) { AcrossMode::Prototype } else { AcrossMode::Instance },
        };
        let plan = EpochPlan::generate(&pool, &mixup, SeedStream::new(trial, 1)).unwrap();
        let params = ModelParams::init(d, h, &mut rng).unwrap();
        let (_, grads) = epoch_loss(&input, &params, &plan).unwrap();
        for id in ModelParams::ids() {
            let analytic = grads.get(id).unwrap();
            let (r, c) = params.get(id).dim();
            for i in 0..r {
                for j in 0..c {
                    let eps = 1e-6;
                    let mut plus = params.clone();
                    plus.get_mut(id)[[i, j]] += eps;
                    let mut minus = params.clone();
                    minus.get_mut(id)[[i, j]] -= eps;
                    let fd = (epoch_loss(&input, &plus, &plan).unwrap().0 - epoch_loss(&input, &minus, &plan).unwrap().0)
                        / (2.0 * eps);
                    let a = analytic[[i, j]];
                    worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
                    checked += 1;
                }
            }
        }
    }
    outcome(worst < 1e-4, format!("{instances} instances, {checked} coordinates, max rel err {worst:.2e}"))
}

fn criterion_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut err_norm: f64 = 0.0;
    let mut err_prop: f64 = 0.0;
    let mut err_proto: f64 = 0.0;
    let mut argmin_mismatch = 0;
    let mut f1_mismatch = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=12);
        let d = rng.random_range(1..5);
        let (g, edges) = random_graph(&mut rng, n, d, 2);
        let adj = normalize(&g);
        let dense = dense_normalized(n, &edges);
        err_norm = err_norm.max(max_abs_diff(&adj.to_dense(), &dense));
        let hops = rng.random_range(0..4);
        let p = propagate(&adj, g.features().view(), hops).unwrap();
        let mut oracle = g.features().clone();
        for _ in 0..hops {
            oracle = dense.dot(&oracle);
        }
        err_prop = err_prop.max(max_abs_diff(&p.values, &oracle));

        let way = rng.random_range(1..5);
        let rows = rng.random_range(way..way + 10);
        let mut labels: Vec<usize> = (0..rows).map(|i| i % way).collect();
        labels.shuffle(&mut rng);
        let x = gaussian(&mut rng, (rows, d));
        let protos = compute_prototypes(x.view(), &labels, way).unwrap().prototypes;
        for k in 0..way {
            let members: Vec<usize> = (0..rows).filter(|&i| labels[i] == k).collect();
            for j in 0..d {
                let m = members.iter().map(|&i| x[[i, j]]).sum::<f64>() / members.len() as f64;
                err_proto = err_proto.max((protos[[k, j]] - m).abs());
            }
        }

        // Integer grids make exact ties common.
        let centers = Array2::from_shape_simple_fn((way, d), || rng.random_range(-2..=2) as f64);
        let queries = Array2::from_shape_simple_fn((8, d), || rng.random_range(-2..=2) as f64);
        let predicted = nearest_prototype(centers.view(), queries.view());
        for (q, &got) in queries.rows().into_iter().zip(&predicted) {
            let dists: Vec<f64> = centers.rows().into_iter().map(|c| (&c - &q).mapv(|v| v * v).sum()).collect();
            let best = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            if got != dists.iter().position(|&v| v == best).unwrap() {
                argmin_mismatch += 1;
            }
        }

        let truth: Vec<usize> = (0..12).map(|_| rng.random_range(0..way)).collect();
        let guess: Vec<usize> = (0..12).map(|_| rng.random_range(0..way)).collect();
        let mut oracle_f1 = 0.0;
        for k in 0..way {
            let tp = truth.iter().zip(&guess).filter(|(t, p)| **t == k && **p == k).count() as f64;
            let fp = truth.iter().zip(&guess).filter(|(t, p)| **t != k && **p == k).count() as f64;
            let fne = truth.iter().zip(&guess).filter(|(t, p)| **t == k && **p != k).count() as f64;
            let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let recall = if tp + fne > 0.0 { tp / (tp + fne) } else { 0.0 };
            oracle_f1 += if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        }
        oracle_f1 /= way as f64;
        if (macro_f1(&truth, &guess, way) - oracle_f1).abs() > 1e-12 {
            f1_mismatch += 1;
        }
    }
    let pass = err_norm <= 1e-10 && err_prop <= 1e-10 && err_proto <= 1e-10 && argmin_mismatch == 0 && f1_mismatch == 0;
    outcome(
        pass,
        format!(
            "200 instances; normalization {err_norm:.1e}, propagation {err_prop:.1e}, prototypes {err_proto:.1e}, \
             argmin mismatches {argmin_mismatch}, F1 mismatches {f1_mismatch}"
        ),
    )
}

/// Independently evaluates a source row from the embeddings and the plan.
fn oracle_source(x: &Array2<f64>, plan: &EpochPlan, src: Source) -> Array1<f64> {
    match src {
        Source::Node(i) => x.row(i).to_owned(),
        Source::Prototype { task, class, set } => {
            let rows = oracle_rows(x, plan, task, class, set);
            let n = rows.len() as f64;
            rows.into_iter().fold(Array1::zeros(x.ncols()), |acc, r| acc + r) / n
        }
        Source::Sample { task, class, set, position } => oracle_rows(x, plan, task, class, set).swap_remove(position),
    }
}

fn oracle_rows(x: &Array2<f64>, plan: &EpochPlan, task: usize, class: usize, set: Set) -> Vec<Array1<f64>> {
    let ep = &plan.augmented[task];
    let (base, extra) = match set {
        Set::Support => (&ep.base.support, &ep.extra_support),
        Set::Query => (&ep.base.query, &ep.extra_query),
    };
    let mut rows: Vec<Array1<f64>> = base.iter().filter(|m| m.class == class).map(|m| x.row(m.node).to_owned()).collect();
    for r in extra.iter().filter(|r| r.class == class) {
        rows.push(oracle_mix(x, plan, r));
    }
    rows
}

fn oracle_mix(x: &Array2<f64>, plan: &EpochPlan, r: &MixRecipe) -> Array1<f64> {
    let a = oracle_source(x, plan, r.sources.0);
    let b = oracle_source(x, plan, r.sources.1);
    a * r.lambda + b * (1.0 - r.lambda)
}

fn random_episode(rng: &mut ChaCha8Rng, classes: usize, per_class: usize, shape: EpisodeShape) -> Episode {
    let mut by_class = BTreeMap::new();
    let mut nodes: Vec<usize> = (0..classes * per_class).collect();
    nodes.shuffle(rng);
    for (c, chunk) in nodes.chunks(per_class).enumerate() {
        by_class.insert(c, chunk.to_vec());
    }
    let all: Vec<usize> = (0..classes).collect();
    EpisodeSampler::new(&by_class, &all, shape).unwrap().sample(SeedStream::new(rng.random(), 0)).unwrap()
}

fn criterion_mixup() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let recipes = 1000;
    let mut failures: Vec<String> = Vec::new();
    let mut fail = |what: String| {
        if failures.len() < 3 {
            failures.push(what);
        }
    };
    let mut rows_checked = 0usize;
    for trial in 0..recipes {
        let way = rng.random_range(1..5);
        let shape = EpisodeShape { way, shot: rng.random_range(1..4), query: rng.random_range(1..4) };
        let classes = way + rng.random_range(0..3);
        let per_class = shape.shot + shape.query + rng.random_range(0..3);
        let t_org = rng.random_range(2..5);
        let pool: Vec<Episode> = (0..t_org).map(|_| random_episode(&mut rng, classes, per_class, shape)).collect();
        let t_aug = rng.random_range(0..4);
        let config = MixupConfig {
            eta: rng.random_range(0.2..3.0),
            gamma: rng.random_range(0.2..3.0),
            within_ratio: [0.0, 0.5, 1.0, 2.0][rng.random_range(0..4)],
            t_aug,
            include_original: t_aug == 0 || rng.random_bool(0.7),
            across_mode: if rng.random_bool(0.5) { AcrossMode::Prototype } else { AcrossMode::Instance },
        };
        let plan = EpochPlan::generate(&pool, &config, SeedStream::new(trial, 7)).unwrap();

        // Count bookkeeping.
        let originals = if config.include_original { t_org } else { 0 };
        if plan.tasks().len() != originals + t_aug {
            fail(format!("trial {trial}: |D_all| = {} != {originals} + {t_aug}", plan.tasks().len()));
        }
        let per_s = (config.within_ratio * shape.shot as f64).floor() as usize;
        let per_q = (config.within_ratio * shape.query as f64).floor() as usize;
        for ep in &plan.augmented {
            if ep.support_count() != ep.base.support.len() + ep.extra_support.len()
                || ep.extra_support.len() != way * per_s
                || ep.extra_query.len() != way * per_q
                || ep.support_labels().len() != ep.support_count()
            {
                fail(format!("trial {trial}: within-task counts"));
            }
        }
        for task in &plan.interpolated {
            let src = &plan.augmented[task.classes[0].task_i];
            if task.way() != way || task.support.len() != way * src.support_count() || task.query.len() != way * src.query_count() {
                fail(format!("trial {trial}: interpolated task counts"));
            }
        }

        // Label preservation.
        for ep in &plan.augmented {
            for r in ep.extra_support.iter().chain(&ep.extra_query) {
                let class_of = |s: Source| match s {
                    Source::Node(n) => ep.base.support.iter().chain(&ep.base.query).find(|m| m.node == n).map(|m| m.class),
                    _ => None,
                };
                if class_of(r.sources.0) != Some(r.class) || class_of(r.sources.1) != Some(r.class) {
                    fail(format!("trial {trial}: within-task label not preserved"));
                }
            }
        }
        for task in &plan.interpolated {
            for r in task.support.iter().chain(&task.query) {
                let pair = task.classes[r.class];
                let (ka, kb) = match (r.sources.0, r.sources.1) {
                    (Source::Prototype { class: a, .. }, Source::Prototype { class: b, .. }) => (a, b),
                    (Source::Sample { class: a, .. }, Source::Sample { class: b, .. }) => (a, b),
                    _ => (usize::MAX, usize::MAX),
                };
                if (ka, kb) != (pair.class_k, pair.class_k2) {
                    fail(format!("trial {trial}: interpolated label does not follow its class pair"));
                }
            }
        }

        // Per-draw-fresh λ: continuous draws within one task never repeat, and
        // a different stream gives different draws.
        let lambdas: Vec<f64> = plan
            .augmented
            .iter()
            .flat_map(|ep| ep.extra_support.iter().chain(&ep.extra_query))
            .chain(plan.interpolated.iter().flat_map(|t| t.support.iter().chain(&t.query)))
            .map(|r| r.lambda)
            .collect();
        let mut sorted = lambdas.clone();
        sorted.sort_by(f64::total_cmp);
        // Beta draws with shapes below one can saturate at exactly 0 or 1.
        if sorted.windows(2).any(|w| w[0] == w[1] && w[0] > 0.0 && w[0] < 1.0) {
            fail(format!("trial {trial}: repeated λ"));
        }
        let other = EpochPlan::generate(&pool, &config, SeedStream::new(trial, 8)).unwrap();
        let other_l: Vec<f64> = other
            .augmented
            .iter()
            .flat_map(|ep| ep.extra_support.iter().chain(&ep.extra_query))
            .map(|r| r.lambda)
            .collect();
        let first_l: Vec<f64> = plan.augmented.iter().flat_map(|ep| ep.extra_support.iter().chain(&ep.extra_query)).map(|r| r.lambda).collect();
        if !first_l.is_empty() && first_l == other_l {
            fail(format!("trial {trial}: λ reused across epochs"));
        }

        // Materialized rows: convex-combination bounds and the exact formula.
        let n = classes * per_class;
        let x = gaussian(&mut rng, (n, 3));
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let rows = materialize_plan(&mut tape, xv, &plan).unwrap();
        for (t, task) in plan.tasks().into_iter().enumerate() {
            let (extra, offset_s, offset_q): (Vec<(&MixRecipe, Set, usize)>, usize, usize) = match task {
                TaskRef::Original(i) => {
                    let ep = &plan.augmented[i];
                    let s = ep.extra_support.iter().enumerate().map(|(k, r)| (r, Set::Support, k));
                    let q = ep.extra_query.iter().enumerate().map(|(k, r)| (r, Set::Query, k));
                    (s.chain(q).collect(), ep.base.support.len(), ep.base.query.len())
                }
                TaskRef::Interpolated(i) => {
                    let it = &plan.interpolated[i];
                    let s = it.support.iter().enumerate().map(|(k, r)| (r, Set::Support, k));
                    let q = it.query.iter().enumerate().map(|(k, r)| (r, Set::Query, k));
                    (s.chain(q).collect(), 0, 0)
                }
            };
            for (r, set, k) in extra {
                let (mat, row) = match set {
                    Set::Support => (rows[t].support, offset_s + k),
                    Set::Query => (rows[t].query, offset_q + k),
                };
                let got = tape.value(mat).row(row).to_owned();
                let a = oracle_source(&x, &plan, r.sources.0);
                let b = oracle_source(&x, &plan, r.sources.1);
                let expect = oracle_mix(&x, &plan, r);
                let tol = 1e-12 * (1.0 + a.iter().chain(b.iter()).fold(0.0f64, |m, v| m.max(v.abs())));
                for j in 0..got.len() {
                    let (lo, hi) = (a[j].min(b[j]), a[j].max(b[j]));
                    if got[j] < lo - tol || got[j] > hi + tol || (got[j] - expect[j]).abs() > tol {
                        fail(format!("trial {trial}: {:?} row outside its segment", r.kind));
                    }
                }
                rows_checked += 1;
            }
        }

        // Endpoints: λ = 1 reproduces the first source, λ = 0 the second.
        for ep in plan.augmented.iter().take(1) {
            for r in ep.extra_support.iter().take(2) {
                for (lambda, pick) in [(1.0, r.sources.0), (0.0, r.sources.1)] {
                    let fixed = MixRecipe { lambda, ..*r };
                    let mut tape = Tape::new();
                    let xv = tape.constant(x.clone()).unwrap();
                    let v = smile::mixup::materialize(&mut tape, xv, &fixed, None).unwrap();
                    if tape.value(v).row(0) != oracle_source(&x, &plan, pick) {
                        fail(format!("trial {trial}: λ = {lambda} endpoint"));
                    }
                }
            }
        }
    }
    let pass = failures.is_empty();
    let detail = if pass {
        format!("{recipes} randomized recipes, {rows_checked} materialized rows checked")
    } else {
        failures.join("; ")
    };
    outcome(pass, detail)
}

/// Meta-test accuracy and final-checkpoint gap of one benchmark run.
#[derive(Clone, Copy)]
struct BenchRun {
    acc: f64,
    gap: f64,
}

fn bench(seed: u64, no_within: bool, no_across: bool) -> BenchRun {
    let spec = SynthSpec { seed, ..Default::default() };
    let (graph, split) = synth(&spec).unwrap();
    let config = RunConfig { seed, max_epochs: BENCH_EPOCHS, no_within, no_across, ..Default::default() };
    let prepared = Prepared::in_memory(&config, graph, split).unwrap();
    let run = train_model(&prepared, &config).unwrap();
    let gap = run.history.checkpoints.last().and_then(|c| c.gap).expect("test monitor records a gap");
    BenchRun { acc: run.metrics.mean_acc, gap }
}

const VARIANTS: [(&str, bool, bool); 4] =
    [("full", false, false), ("no_within", true, false), ("no_across", false, true), ("no_within+no_across", true, true)];

fn criterion_sanity(runs: &[Vec<BenchRun>]) -> Outcome {
    let accs: Vec<f64> = runs[0].iter().take(SANITY_SEEDS).map(|r| r.acc).collect();
    let m = mean(&accs);
    let list: Vec<String> = accs.iter().map(|a| format!("{a:.3}")).collect();
    outcome(m >= 0.60, format!("mean acc {m:.4} over {SANITY_SEEDS} seeds [{}], chance 0.20", list.join(", ")))
}

fn criterion_ablation(runs: &[Vec<BenchRun>]) -> Outcome {
    let full: Vec<f64> = runs[0].iter().map(|r| r.acc).collect();
    let mut pass = true;
    let mut parts = vec![format!("full {:.4}", mean(&full))];
    for (v, (name, ..)) in VARIANTS.iter().enumerate().skip(1) {
        let acc: Vec<f64> = runs[v].iter().map(|r| r.acc).collect();
        let diff: Vec<f64> = full.iter().zip(&acc).map(|(f, a)| f - a).collect();
        let d = mean(&diff);
        let s = sd(&diff);
        let effect = if s > 0.0 { d / s } else { f64::INFINITY };
        pass &= mean(&full) >= mean(&acc);
        parts.push(format!("{name} {:.4} (diff {d:+.4}, d_z {effect:.2})", mean(&acc)));
    }
    outcome(pass, format!("{} seeds: {}", full.len(), parts.join(", ")))
}

fn criterion_theory(runs: &[Vec<BenchRun>]) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut notes = Vec::new();

    // (a) Monte-Carlo Rademacher complexity against its closed form.
    let mut a_ok = 0;
    for c in 0..20u64 {
        let m = rng.random_range(10..80);
        let h = rng.random_range(1..8);
        let mut x = gaussian(&mut rng, (m, h));
        if h > 2 && rng.random_bool(0.3) {
            // Rank-deficient embeddings.
            let col = x.column(0).to_owned();
            x.column_mut(h - 1).assign(&col);
        }
        let x = smile::theory::center(x.view());
        let nu = rng.random_range(0.05..5.0);
        let r = rademacher_mc(x.view(), nu, 2000, SeedStream::new(c, 0)).unwrap();
        if r.estimate <= r.bound + 3.0 * r.stderr {
            a_ok += 1;
        }
    }
    let a = a_ok == 20;
    notes.push(format!("(a) {a_ok}/20"));

    // (b) The binary loss remainder shrinks at least cubically along unit directions.
    let scales = [0.4, 0.2, 0.1, 0.05, 0.025];
    let mut min_slope = f64::INFINITY;
    for _ in 0..10 {
        let (m, h) = (rng.random_range(3..10), rng.random_range(2..6));
        let q = gaussian(&mut rng, (m, h));
        let v = |rng: &mut ChaCha8Rng| gaussian(rng, (1, h)).index_axis_move(Axis(0), 0);
        let (c1, c2, theta) = (v(&mut rng), v(&mut rng), v(&mut rng));
        let f = |flat: ArrayView1<f64>| {
            let rows = flat.to_owned().into_shape_with_order((m, h)).unwrap();
            binary_loss(rows.view(), c1.view(), c2.view(), theta.view()).unwrap()
        };
        let base = Array1::from_iter(q.iter().copied());
        let dir = gaussian(&mut rng, (1, m * h)).index_axis_move(Axis(0), 0);
        let dir = &dir / dir.dot(&dir).sqrt();
        let slope = taylor_check(f, base.view(), dir.view(), &scales).unwrap().slope.unwrap_or(f64::NEG_INFINITY);
        min_slope = min_slope.min(slope);
    }
    let b = min_slope >= 2.5;
    notes.push(format!("(b) min slope {min_slope:.2}"));

    // (c) Bounds shrink with more samples and tasks, grow with ν.
    let counts = [1, 2, 5, 10, 50, 200, 1000];
    let mut c = true;
    for &nu in &[0.0, 0.1, 1.0, 4.0] {
        for &rank in &[1, 3, 16] {
            for &eps in &[0.01, 0.05, 0.5] {
                for w in counts.windows(2) {
                    for &o in &counts {
                        let b1 = |m, t| theorem1_bound(nu, rank, m, t, eps).unwrap();
                        let b2 = |m, q| theorem2_bound(nu, rank, m, q, eps).unwrap();
                        c &= b1(w[1], o) <= b1(w[0], o) && b1(o, w[1]) <= b1(o, w[0]);
                        c &= b2(w[1], o) <= b2(w[0], o) && b2(o, w[1]) <= b2(o, w[0]);
                    }
                }
            }
        }
    }
    for w in [0.0, 0.1, 1.0, 4.0].windows(2) {
        c &= theorem1_bound(w[0], 2, 10, 10, 0.1).unwrap() <= theorem1_bound(w[1], 2, 10, 10, 0.1).unwrap();
        c &= theorem2_bound(w[0], 2, 10, 10, 0.1).unwrap() <= theorem2_bound(w[1], 2, 10, 10, 0.1).unwrap();
    }
    notes.push(format!("(c) grids {}", if c { "monotone" } else { "violated" }));

    // (d) λ̄ closed form against sampling.
    let samples = 200_000;
    let mc = (0..samples).map(|_| sample_lambda_mixture(0.5, 0.5, &mut rng).unwrap()).sum::<f64>() / samples as f64;
    let analytic = lambda_bar(0.5, 0.5).unwrap();
    let d = (analytic - 0.75).abs() < 1e-12 && (mc - analytic).abs() < 0.01;
    notes.push(format!("(d) λ̄ {analytic} vs MC {mc:.4}"));

    // (e) Dual mixup narrows the train/test gap.
    let full: Vec<f64> = runs[0].iter().map(|r| r.gap).collect();
    let none: Vec<f64> = runs[3].iter().map(|r| r.gap).collect();
    let e = mean(&full) <= mean(&none);
    notes.push(format!("(e) gap {:.4} with vs {:.4} without over {} seeds", mean(&full), mean(&none), full.len()));

    outcome(a && b && c && d && e, notes.join("; "))
}

fn criterion_real_data() -> Option<Outcome> {
    let dir = std::env::var_os("SMILE_REAL_DATA")?;
    let out = tempfile::tempdir().unwrap();
    let config = RunConfig::default();
    let result = run_train(&config, &dir, out.path()).and_then(|_| run_eval(&config, &dir, out.path().join("params.json"), out.path()));
    Some(match result {
        Ok(m) => outcome(
            true,
            format!("5-way 5-shot, {} test tasks: acc {:.4} ± {:.4}, macro-F1 {:.4}", m.task_accuracy.len(), m.mean_acc, m.ci95, m.macro_f1),
        ),
        Err(e) => outcome(false, format!("error[{}]: {e}", e.category())),
    })
}

fn report(id: usize, name: &str, gating: bool, start: Instant, o: &Outcome) {
    let status = if o.pass { "PASS" } else { "FAIL" };
    let tag = if gating { "" } else { " (non-gating)" };
    println!("criterion {id} {name}{tag}: {status} [{:.1}s] {}", start.elapsed().as_secs_f64(), o.detail);
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        // Test discovery; nothing to list individually.
        return ExitCode::SUCCESS;
    }
    let mut gating_ok = true;

    let t = Instant::now();
    let o = criterion_gradients();
    report(1, "gradient correctness", true, t, &o);
    gating_ok &= o.pass;

    let t = Instant::now();
    let o = criterion_oracles();
    report(2, "oracle equivalence", true, t, &o);
    gating_ok &= o.pass;

    let t = Instant::now();
    let o = criterion_mixup();
    report(3, "mixup contracts", true, t, &o);
    gating_ok &= o.pass;

    // Criteria 4, 5 and 6(e) share one set of benchmark runs.
    let t = Instant::now();
    let mut runs: Vec<Vec<BenchRun>> = Vec::new();
    let mut sanity_secs = 0.0;
    for (v, (_, no_within, no_across)) in VARIANTS.iter().enumerate() {
        let mut per_seed = Vec::new();
        for seed in 0..BENCH_SEEDS {
            let s = Instant::now();
            per_seed.push(bench(seed, *no_within, *no_across));
            if v == 0 && (seed as usize) < SANITY_SEEDS {
                sanity_secs += s.elapsed().as_secs_f64();
            }
        }
        runs.push(per_seed);
    }
    let o = criterion_sanity(&runs);
    println!(
        "criterion 4 learning sanity: {} [{sanity_secs:.1}s] {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
    gating_ok &= o.pass;
    let o = criterion_ablation(&runs);
    report(5, "ablation direction", true, t, &o);
    gating_ok &= o.pass;

    let t = Instant::now();
    let o = criterion_theory(&runs);
    report(6, "theory suite", true, t, &o);
    gating_ok &= o.pass;

    let t = Instant::now();
    match criterion_real_data() {
        Some(o) => report(7, "real-data protocol", false, t, &o),
        None => println!("criterion 7 real-data protocol (non-gating): SKIP (set SMILE_REAL_DATA to a dataset directory)"),
    }

    if gating_ok {
        println!("acceptance: all gating criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: gating failures");
        ExitCode::FAILURE
    }
}
