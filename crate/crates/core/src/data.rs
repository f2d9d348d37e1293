//! On-disk dataset format, the propagation cache and the synthetic
//! stochastic-block-model benchmark.
//!
//! A dataset directory holds:
//!
//! * `edges.tsv`: one undirected edge `u<TAB>v` per line.
//! * `features.csv`: row `i` holds the comma-separated features of node `i`.
//! * `labels.tsv`: `node<TAB>class` for every node.
//! * `splits.json`: `{"train": [...], "val": [...], "test": [...]}` class ids.
//!
//! Blank lines and lines starting with `#` are ignored in the text files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::episodes::{load_split, ClassSplit};
use crate::error::{Error, Result};
use crate::graph::{normalize, propagate, NormalizedAdjacency, PropagatedFeatures, SparseGraph};
use crate::seed::{purpose, SeedStream};

pub const EDGES_FILE: &str = "edges.tsv";
pub const FEATURES_FILE: &str = "features.csv";
pub const LABELS_FILE: &str = "labels.tsv";
pub const SPLITS_FILE: &str = "splits.json";
const CACHE_DIR: &str = "cache";

pub(crate) fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_id(field: Option<&str>, file: &str, line: usize) -> Result<usize> {
    let field = field.ok_or_else(|| Error::Format(format!("{file}:{line}: missing field")))?;
    field
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("{file}:{line}: `{field}` is not a non-negative integer")))
}

pub fn parse_edges(text: &str) -> Result<Vec<(usize, usize)>> {
    content_lines(text)
        .map(|(line, l)| {
            let mut f = l.split('\t');
            let u = parse_id(f.next(), EDGES_FILE, line)?;
            let v = parse_id(f.next(), EDGES_FILE, line)?;
            if f.next().is_some() {
                return Err(Error::Format(format!("{EDGES_FILE}:{line}: expected two columns")));
            }
            Ok((u, v))
        })
        .collect()
}

pub fn parse_features(text: &str) -> Result<Array2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, l) in content_lines(text) {
        let row = l
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("{FEATURES_FILE}:{line}: `{s}` is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Format(format!(
                    "{FEATURES_FILE}:{line}: {} columns, expected {}",
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    let d = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), d), flat).map_err(|e| Error::Format(format!("{FEATURES_FILE}: {e}")))
}

/// Labels indexed by node id; every node in `0..n` must appear exactly once.
pub fn parse_labels(text: &str, n: usize) -> Result<Vec<usize>> {
    let mut labels = vec![None; n];
    for (line, l) in content_lines(text) {
        let mut f = l.split('\t');
        let node = parse_id(f.next(), LABELS_FILE, line)?;
        let class = parse_id(f.next(), LABELS_FILE, line)?;
        let slot = labels
            .get_mut(node)
            .ok_or_else(|| Error::Format(format!("{LABELS_FILE}:{line}: node {node} has no feature row")))?;
        if slot.replace(class).is_some() {
            return Err(Error::Format(format!("{LABELS_FILE}:{line}: node {node} labelled twice")));
        }
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| Error::Format(format!("{LABELS_FILE}: node {i} has no label"))))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub graph: SparseGraph,
    pub split: ClassSplit,
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let features = parse_features(&read(&dir.join(FEATURES_FILE))?)?;
        let labels = parse_labels(&read(&dir.join(LABELS_FILE))?, features.nrows())?;
        let edges = parse_edges(&read(&dir.join(EDGES_FILE))?)?;
        let graph = SparseGraph::new(&edges, features, labels)?;
        let split = load_split(dir.join(SPLITS_FILE), &graph.classes())?;
        info!(
            "loaded {}: {} nodes, {} edges, {} features, split {:?}",
            dir.display(),
            graph.n_nodes(),
            graph.n_edges(),
            graph.feature_dim(),
            split.counts()
        );
        Ok(Self { dir: dir.to_path_buf(), graph, split })
    }

    /// `P = Ă^hops Z`, read from the dataset cache when the cached copy was
    /// built from the same input files.
    pub fn propagated(&self, hops: usize) -> Result<(NormalizedAdjacency, PropagatedFeatures)> {
        let adj = normalize(&self.graph);
        let path = self.dir.join(CACHE_DIR).join(format!("propagated_l{hops}.csv"));
        let fingerprint = self.fingerprint(hops)?;
        if let Ok(text) = fs::read_to_string(&path) {
            let mut lines = text.splitn(2, '\n');
            if lines.next() == Some(&format!("# {fingerprint}")) {
                let values = parse_features(lines.next().unwrap_or(""))?;
                if values.dim() == (self.graph.n_nodes(), self.graph.feature_dim()) {
                    debug!("propagation cache hit at {}", path.display());
                    return Ok((adj, PropagatedFeatures { values, hops }));
                }
            }
        }
        let p = propagate(&adj, self.graph.features().view(), hops)?;
        let mut text = format!("# {fingerprint}\n");
        text.push_str(&features_csv(&p.values));
        // A read-only dataset directory only costs the cache.
        if let Err(e) = write(&path, &text) {
            debug!("could not write propagation cache: {e}");
        }
        Ok((adj, p))
    }

    fn fingerprint(&self, hops: usize) -> Result<String> {
        let mut h = Sha256::new();
        for name in [EDGES_FILE, FEATURES_FILE] {
            let path = self.dir.join(name);
            h.update(fs::read(&path).map_err(|e| Error::io(&path, e))?);
            h.update([0u8]);
        }
        h.update(hops.to_le_bytes());
        Ok(h.finalize().iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        }))
    }
}

pub fn edges_tsv(graph: &SparseGraph) -> String {
    graph.edges().iter().map(|(u, v)| format!("{u}\t{v}\n")).collect()
}

/// Shortest round-trip float formatting, one row per line.
pub fn features_csv(values: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in values.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn labels_tsv(labels: &[usize]) -> String {
    labels.iter().enumerate().map(|(i, c)| format!("{i}\t{c}\n")).collect()
}

pub fn write_dataset(dir: impl AsRef<Path>, graph: &SparseGraph, split: &ClassSplit) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join(EDGES_FILE), &edges_tsv(graph))?;
    write(&dir.join(FEATURES_FILE), &features_csv(graph.features()))?;
    write(&dir.join(LABELS_FILE), &labels_tsv(graph.labels()))?;
    let json = serde_json::to_string_pretty(split).expect("split serializes");
    write(&dir.join(SPLITS_FILE), &(json + "\n"))
}

/// Stochastic block model with Gaussian class-conditional features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub nodes_per_class: usize,
    pub feature_dim: usize,
    pub p_in: f64,
    pub p_out: f64,
    /// Norm of each class mean.
    pub separation: f64,
    /// Standard deviation of the per-coordinate feature noise.
    pub noise: f64,
    /// Classes held out for validation; the rest split evenly between
    /// train and test, train taking the odd one.
    pub val_classes: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            nodes_per_class: 60,
            feature_dim: 32,
            p_in: 0.1,
            p_out: 0.002,
            separation: 4.0,
            noise: 1.0,
            val_classes: 0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.nodes_per_class == 0 || self.feature_dim == 0 {
            return Err(Error::Config("n_classes, nodes_per_class and feature_dim must be positive".into()));
        }
        if !(0.0 <= self.p_out && self.p_out <= self.p_in && self.p_in <= 1.0) {
            return Err(Error::Config(format!("need 0 <= p_out <= p_in <= 1, got p_in = {}, p_out = {}", self.p_in, self.p_out)));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::Config(format!("separation must be >= 0, got {}", self.separation)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be >= 0, got {}", self.noise)));
        }
        if self.val_classes >= self.n_classes {
            return Err(Error::Config("val_classes must leave classes for train and test".into()));
        }
        Ok(())
    }

    pub fn split(&self) -> ClassSplit {
        let rest = self.n_classes - self.val_classes;
        let n_train = rest.div_ceil(2);
        ClassSplit {
            train: (0..n_train).collect(),
            val: (n_train..n_train + self.val_classes).collect(),
            test: (n_train + self.val_classes..self.n_classes).collect(),
        }
    }
}

/// Node `i` belongs to class `i / nodes_per_class`.
pub fn synth(spec: &SynthSpec) -> Result<(SparseGraph, ClassSplit)> {
    spec.validate()?;
    let mut rng = SeedStream::new(spec.seed, purpose::SYNTH).rng();
    let (c, per, d) = (spec.n_classes, spec.nodes_per_class, spec.feature_dim);
    let n = c * per;
    let mut means = Array2::<f64>::zeros((c, d));
    for mut row in means.rows_mut() {
        let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        for (m, v) in row.iter_mut().zip(dir) {
            *m = spec.separation * v / norm;
        }
    }
    let labels: Vec<usize> = (0..n).map(|i| i / per).collect();
    let features = Array2::from_shape_fn((n, d), |(i, j)| {
        let z: f64 = StandardNormal.sample(&mut rng);
        means[[labels[i], j]] + spec.noise * z
    });
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if labels[u] == labels[v] { spec.p_in } else { spec.p_out };
            if p > 0.0 && rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }
    Ok((SparseGraph::new(&edges, features, labels)?, spec.split()))
}

pub fn write_synth(spec: &SynthSpec, dir: impl AsRef<Path>) -> Result<()> {
    let (graph, split) = synth(spec)?;
    write_dataset(dir, &graph, &split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Axis};

    fn small() -> SynthSpec {
        SynthSpec { n_classes: 4, nodes_per_class: 8, feature_dim: 5, seed: 3, ..Default::default() }
    }

    #[test]
    fn parsers_report_line_numbers() {
        let e = parse_edges("0\t1\n# note\n\n1\tx\n").unwrap_err();
        assert_eq!(e.category(), "format");
        assert!(e.to_string().contains("edges.tsv:4"), "{e}");
        let e = parse_features("1,2\n3\n").unwrap_err();
        assert!(e.to_string().contains("features.csv:2"), "{e}");
        let e = parse_labels("0\t1\n0\t2\n", 2).unwrap_err();
        assert!(e.to_string().contains("twice"), "{e}");
        let e = parse_labels("0\t1\n", 2).unwrap_err();
        assert!(e.to_string().contains("node 1 has no label"), "{e}");
        assert_eq!(parse_labels("5\t1\n", 2).unwrap_err().category(), "format");
    }

    #[test]
    fn synth_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small();
        write_synth(&spec, dir.path()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        let (graph, split) = synth(&spec).unwrap();
        assert_eq!(ds.split, split);
        assert_eq!(ds.graph.features(), graph.features());
        assert_eq!(ds.graph.labels(), graph.labels());
        assert_eq!(ds.graph.edges(), graph.edges());
        assert_eq!(edges_tsv(&ds.graph), read(&dir.path().join(EDGES_FILE)).unwrap());
        assert_eq!(features_csv(ds.graph.features()), read(&dir.path().join(FEATURES_FILE)).unwrap());
        assert_eq!(labels_tsv(ds.graph.labels()), read(&dir.path().join(LABELS_FILE)).unwrap());
    }

    #[test]
    fn synth_is_byte_identical_per_seed() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_synth(&small(), a.path()).unwrap();
        write_synth(&small(), b.path()).unwrap();
        for f in [EDGES_FILE, FEATURES_FILE, LABELS_FILE, SPLITS_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        let c = tempfile::tempdir().unwrap();
        write_synth(&SynthSpec { seed: 4, ..small() }, c.path()).unwrap();
        assert_ne!(fs::read(a.path().join(FEATURES_FILE)).unwrap(), fs::read(c.path().join(FEATURES_FILE)).unwrap());
    }

    #[test]
    fn synth_spec_validation() {
        assert_eq!(synth(&SynthSpec { p_out: 0.5, p_in: 0.1, ..small() }).unwrap_err().category(), "config");
        assert_eq!(synth(&SynthSpec { separation: -1.0, ..small() }).unwrap_err().category(), "config");
        assert_eq!(synth(&SynthSpec { n_classes: 0, ..small() }).unwrap_err().category(), "config");
    }

    #[test]
    fn even_split() {
        let s = SynthSpec::default().split();
        assert_eq!(s.counts(), (5, 0, 5));
        let s = SynthSpec { n_classes: 11, val_classes: 2, ..Default::default() }.split();
        assert_eq!(s.counts(), (5, 2, 4));
        s.validate(&(0..11).collect::<Vec<_>>()).unwrap();
    }

    #[test]
    fn null_signal_has_no_edges_and_no_class_structure() {
        let spec = SynthSpec { p_in: 0.0, p_out: 0.0, separation: 0.0, ..small() };
        let (g, _) = synth(&spec).unwrap();
        assert_eq!(g.n_edges(), 0);
    }

    #[test]
    fn separated_classes_are_recoverable_by_class_means() {
        let spec = SynthSpec { separation: 12.0, ..SynthSpec::default() };
        let (g, _) = synth(&spec).unwrap();
        let by_class = g.nodes_by_class();
        let x = g.features();
        // Means from the first half of each class, scored on the second half.
        let means: Vec<Array1<f64>> = by_class
            .values()
            .map(|nodes| x.select(Axis(0), &nodes[..nodes.len() / 2]).mean_axis(Axis(0)).unwrap())
            .collect();
        let (mut hits, mut total) = (0, 0);
        for (c, nodes) in by_class.values().enumerate() {
            for &i in &nodes[nodes.len() / 2..] {
                let row = x.row(i);
                let best = (0..means.len())
                    .min_by(|&a, &b| {
                        let da = (&row - &means[a]).mapv(|v| v * v).sum();
                        let db = (&row - &means[b]).mapv(|v| v * v).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                hits += usize::from(best == c);
                total += 1;
            }
        }
        assert!(hits as f64 / total as f64 > 0.95);
    }

    #[test]
    fn propagation_cache_is_reused_and_invalidated() {
        let dir = tempfile::tempdir().unwrap();
        write_synth(&small(), dir.path()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        let (_, first) = ds.propagated(2).unwrap();
        let cache = dir.path().join("cache/propagated_l2.csv");
        assert!(cache.exists());
        let (_, second) = ds.propagated(2).unwrap();
        assert_eq!(first, second);

        // Changing an input file invalidates the cached copy.
        write_synth(&SynthSpec { seed: 9, ..small() }, dir.path()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        let (adj, third) = ds.propagated(2).unwrap();
        let direct = propagate(&adj, ds.graph.features().view(), 2).unwrap();
        assert_eq!(third, direct);
    }
}
