//! Sparse graph container, symmetric normalization with self-loops, and
//! parameter-free feature propagation.
//!
//! The propagated matrix `P = Ă^ℓ Z` is computed with `ℓ` sparse-dense
//! products; `Ă^ℓ` itself is never materialized.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Compressed sparse row pattern (no values).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Csr {
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
}

impl Csr {
    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub fn contains(&self, u: usize, v: usize) -> bool {
        self.row(u).binary_search(&v).is_ok()
    }
}

/// Undirected, unweighted attributed graph.
#[derive(Debug, Clone)]
pub struct SparseGraph {
    adjacency: Csr,
    features: Array2<f64>,
    labels: Vec<usize>,
}

impl SparseGraph {
    /// Builds a graph from an edge list, an `n × d` feature matrix and one
    /// class id per node.
    ///
    /// Edges are symmetrized and deduplicated; self-loops in the input are
    /// dropped since normalization adds them back.
    pub fn new(edges: &[(usize, usize)], features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        let n = features.nrows();
        if labels.len() != n {
            return Err(Error::Format(format!(
                "{} labels for {} feature rows",
                labels.len(),
                n
            )));
        }
        if let Some((idx, v)) = features.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let d = features.ncols().max(1);
            return Err(Error::Format(format!(
                "non-finite feature {v} at row {}, column {}",
                idx / d,
                idx % d
            )));
        }
        let mut neighbours: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::Format(format!(
                    "edge ({u}, {v}) references a node outside [0, {n})"
                )));
            }
            if u == v {
                continue;
            }
            neighbours[u].push(v);
            neighbours[v].push(u);
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for mut row in neighbours {
            row.sort_unstable();
            row.dedup();
            col_idx.extend(row);
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            adjacency: Csr { row_ptr, col_idx },
            features,
            labels,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn adjacency(&self) -> &Csr {
        &self.adjacency
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Undirected edges `(u, v)` with `u < v`, in row order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.n_nodes())
            .flat_map(|u| {
                self.adjacency
                    .row(u)
                    .iter()
                    .filter(move |&&v| v > u)
                    .map(move |&v| (u, v))
            })
            .collect()
    }

    pub fn n_edges(&self) -> usize {
        self.adjacency.nnz() / 2
    }

    /// Sorted, deduplicated class ids present in the label map.
    pub fn classes(&self) -> Vec<usize> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Node ids of each class, keyed by class id, in ascending node order.
    pub fn nodes_by_class(&self) -> std::collections::BTreeMap<usize, Vec<usize>> {
        let mut map: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (node, &c) in self.labels.iter().enumerate() {
            map.entry(c).or_default().push(node);
        }
        map
    }
}

/// `Ă = D̂^{-1/2} (A + I) D̂^{-1/2}` in CSR form.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    pattern: Csr,
    values: Vec<f64>,
    degrees: Vec<usize>,
}

impl NormalizedAdjacency {
    pub fn n_nodes(&self) -> usize {
        self.degrees.len()
    }

    /// Self-loop-augmented degrees `D̂ᵢ`.
    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn pattern(&self) -> &Csr {
        &self.pattern
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        let lo = self.pattern.row_ptr[u];
        match self.pattern.row(u).binary_search(&v) {
            Ok(k) => self.values[lo + k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.n_nodes();
        let mut out = Array2::zeros((n, n));
        for u in 0..n {
            let lo = self.pattern.row_ptr[u];
            for (k, &v) in self.pattern.row(u).iter().enumerate() {
                out[[u, v]] = self.values[lo + k];
            }
        }
        out
    }

    /// One sparse-dense product `Ă · rhs`. Each output row accumulates its
    /// stored entries in column order.
    pub fn spmm(&self, rhs: ArrayView2<f64>) -> Result<Array2<f64>> {
        if rhs.nrows() != self.n_nodes() {
            return Err(Error::Shape(format!(
                "propagation operand has {} rows, graph has {} nodes",
                rhs.nrows(),
                self.n_nodes()
            )));
        }
        let mut out = Array2::zeros((rhs.nrows(), rhs.ncols()));
        for (u, mut row) in out.rows_mut().into_iter().enumerate() {
            let lo = self.pattern.row_ptr[u];
            for (k, &v) in self.pattern.row(u).iter().enumerate() {
                row.scaled_add(self.values[lo + k], &rhs.row(v));
            }
        }
        Ok(out)
    }
}

/// Adds self-loops and applies symmetric degree normalization.
pub fn normalize(graph: &SparseGraph) -> NormalizedAdjacency {
    let adj = graph.adjacency();
    let n = graph.n_nodes();
    let degrees: Vec<usize> = (0..n).map(|u| adj.row(u).len() + 1).collect();

    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::with_capacity(adj.nnz() + n);
    let mut values = Vec::with_capacity(adj.nnz() + n);
    row_ptr.push(0);
    for u in 0..n {
        let row = adj.row(u);
        let split = row.partition_point(|&v| v < u);
        let cols = row[..split].iter().chain(std::iter::once(&u)).chain(&row[split..]);
        for &v in cols {
            col_idx.push(v);
            values.push(1.0 / ((degrees[u] * degrees[v]) as f64).sqrt());
        }
        row_ptr.push(col_idx.len());
    }
    NormalizedAdjacency {
        pattern: Csr { row_ptr, col_idx },
        values,
        degrees,
    }
}

/// `P = Ă^ℓ Z` together with the hop count it was computed for.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagatedFeatures {
    pub values: Array2<f64>,
    pub hops: usize,
}

impl PropagatedFeatures {
    pub fn n_nodes(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

pub fn propagate(adj: &NormalizedAdjacency, features: ArrayView2<f64>, hops: usize) -> Result<PropagatedFeatures> {
    if features.nrows() != adj.n_nodes() {
        return Err(Error::Shape(format!(
            "feature matrix has {} rows, graph has {} nodes",
            features.nrows(),
            adj.n_nodes()
        )));
    }
    let mut values = features.to_owned();
    for _ in 0..hops {
        values = adj.spmm(values.view())?;
    }
    Ok(PropagatedFeatures { values, hops })
}
