//! Class splits and reproducible N-way K-shot episode sampling.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use log::warn;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::SeedStream;

/// Disjoint train / validation / test class sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub train: Vec<usize>,
    #[serde(default)]
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClassSplit {
    /// Checks pairwise disjointness and that every id is a known class.
    pub fn validate(&self, known_classes: &[usize]) -> Result<()> {
        let known: BTreeSet<usize> = known_classes.iter().copied().collect();
        let mut seen: BTreeMap<usize, &'static str> = BTreeMap::new();
        for (name, list) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for &c in list {
                if !known.contains(&c) {
                    return Err(Error::Split(format!("{name} class {c} does not occur in the label map")));
                }
                if let Some(prev) = seen.insert(c, name) {
                    return Err(Error::Split(format!("class {c} listed in both {prev} and {name}")));
                }
            }
        }
        Ok(())
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

pub fn parse_split(json: &str, known_classes: &[usize]) -> Result<ClassSplit> {
    let split: ClassSplit =
        serde_json::from_str(json).map_err(|e| Error::Split(format!("malformed split file: {e}")))?;
    split.validate(known_classes)?;
    Ok(split)
}

pub fn load_split(path: impl AsRef<Path>, known_classes: &[usize]) -> Result<ClassSplit> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    parse_split(&text, known_classes)
}

/// Episode shape: N-way, K-shot, M queries per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeShape {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
}

/// A labelled node inside an episode; `class` is the local index `0..N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Member {
    pub node: usize,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub shape: EpisodeShape,
    /// Global class id of each local class.
    pub classes: Vec<usize>,
    /// `N·K` members grouped by local class.
    pub support: Vec<Member>,
    /// `N·M` members grouped by local class.
    pub query: Vec<Member>,
}

impl Episode {
    pub fn way(&self) -> usize {
        self.shape.way
    }

    pub fn support_of(&self, class: usize) -> impl Iterator<Item = usize> + '_ {
        self.support.iter().filter(move |m| m.class == class).map(|m| m.node)
    }

    pub fn query_of(&self, class: usize) -> impl Iterator<Item = usize> + '_ {
        self.query.iter().filter(move |m| m.class == class).map(|m| m.node)
    }

    pub fn support_nodes(&self) -> Vec<usize> {
        self.support.iter().map(|m| m.node).collect()
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|m| m.class).collect()
    }

    pub fn query_nodes(&self) -> Vec<usize> {
        self.query.iter().map(|m| m.node).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|m| m.class).collect()
    }
}

/// Draws one episode from `classes`.
///
/// N classes are drawn without replacement, then K + M nodes without
/// replacement from each; the first K become support, the rest query.
pub fn sample_episode(
    nodes_by_class: &BTreeMap<usize, Vec<usize>>,
    classes: &[usize],
    shape: EpisodeShape,
    stream: SeedStream,
) -> Result<Episode> {
    let EpisodeShape { way, shot, query } = shape;
    if way == 0 || shot == 0 || query == 0 {
        return Err(Error::Parameter(format!(
            "episode shape needs positive way/shot/query, got {way}/{shot}/{query}"
        )));
    }
    if classes.len() < way {
        return Err(Error::Capacity(format!(
            "{way}-way episode requested from {} classes",
            classes.len()
        )));
    }
    let mut rng = stream.rng();
    let chosen: Vec<usize> = index::sample(&mut rng, classes.len(), way)
        .into_iter()
        .map(|i| classes[i])
        .collect();
    let mut support = Vec::with_capacity(way * shot);
    let mut queries = Vec::with_capacity(way * query);
    for (local, &class) in chosen.iter().enumerate() {
        let pool = nodes_by_class.get(&class).map(Vec::as_slice).unwrap_or(&[]);
        if pool.len() < shot + query {
            return Err(Error::Capacity(format!(
                "class {class} has {} nodes, episode needs {}",
                pool.len(),
                shot + query
            )));
        }
        let picks = index::sample(&mut rng, pool.len(), shot + query).into_vec();
        for (k, &i) in picks.iter().enumerate() {
            let member = Member { node: pool[i], class: local };
            if k < shot {
                support.push(member);
            } else {
                queries.push(member);
            }
        }
    }
    Ok(Episode { shape, classes: chosen, support, query: queries })
}

/// Samples episodes from a fixed set of classes, skipping classes too small
/// to supply K + M nodes.
#[derive(Debug, Clone)]
pub struct EpisodeSampler {
    nodes_by_class: BTreeMap<usize, Vec<usize>>,
    eligible: Vec<usize>,
    shape: EpisodeShape,
}

impl EpisodeSampler {
    pub fn new(nodes_by_class: &BTreeMap<usize, Vec<usize>>, classes: &[usize], shape: EpisodeShape) -> Result<Self> {
        let need = shape.shot + shape.query;
        let mut eligible = Vec::with_capacity(classes.len());
        for &c in classes {
            let have = nodes_by_class.get(&c).map_or(0, Vec::len);
            if have >= need {
                eligible.push(c);
            } else {
                warn!("class {c} has {have} nodes (< {need}); excluded from sampling");
            }
        }
        if eligible.len() < shape.way {
            return Err(Error::Capacity(format!(
                "only {} of {} classes can supply {need} nodes, {}-way episodes need {}",
                eligible.len(),
                classes.len(),
                shape.way,
                shape.way
            )));
        }
        let nodes_by_class = eligible
            .iter()
            .map(|c| (*c, nodes_by_class[c].clone()))
            .collect();
        Ok(Self { nodes_by_class, eligible, shape })
    }

    pub fn shape(&self) -> EpisodeShape {
        self.shape
    }

    pub fn eligible_classes(&self) -> &[usize] {
        &self.eligible
    }

    pub fn sample(&self, stream: SeedStream) -> Result<Episode> {
        sample_episode(&self.nodes_by_class, &self.eligible, self.shape, stream)
    }

    /// `count` episodes; episode `t` uses `stream.child(t)`.
    pub fn sample_many(&self, count: usize, stream: SeedStream) -> Result<Vec<Episode>> {
        (0..count as u64).map(|t| self.sample(stream.child(t))).collect()
    }
}

/// The fixed pool of original meta-training tasks.
pub fn build_task_pool(sampler: &EpisodeSampler, t_org: usize, stream: SeedStream) -> Result<Vec<Episode>> {
    sampler.sample_many(t_org, stream)
}
