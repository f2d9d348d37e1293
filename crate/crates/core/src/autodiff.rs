//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::gradients`] on a scalar result walks the record backwards and
//! returns the exact gradient for every registered parameter. A tape is
//! meant to live for a single optimizer step and then be dropped.
//!
//! Every forward op checks operand shapes and rejects non-finite results,
//! so a bad value is reported where it is produced instead of surfacing
//! later as a NaN loss.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifies a trainable parameter across tapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub u32);

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Parameter(ParamId),
    Constant,
    Intermediate,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    RowScale(Var, Var),
    Sigmoid(Var),
    Ln(Var),
    Exp(Var),
    RowSoftmax(Var),
    RowLogSoftmax(Var),
    SqDist(Var, Var),
    PairwiseSqDist(Var, Var),
    Convex(Var, Var, f64),
    ConvexRows(Var, Var, Array1<f64>),
    RowSelect(Var, Vec<usize>),
    RowMean(Var),
    Sum(Var),
    Transpose(Var),
    VStack(Vec<Var>),
    HStack(Vec<Var>),
    PickCols(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    role: Role,
    op: Op,
}

/// Per-parameter gradients, one entry for every parameter registered on the
/// tape. Parameters the loss does not depend on get a zero matrix.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<ParamId, Array2<f64>>,
}

impl GradientMap {
    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Array2<f64>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        match self.shape(v) {
            (1, 1) => Ok(self.value(v)[[0, 0]]),
            s => Err(Error::Contract(format!("expected a scalar node, got shape {s:?}"))),
        }
    }

    pub fn role(&self, v: Var) -> Role {
        self.nodes[v.0].role
    }

    pub fn param(&mut self, id: ParamId, value: &Array2<f64>) -> Result<Var> {
        self.push(value.clone(), Role::Parameter(id), Op::Leaf)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Result<Var> {
        self.push(value, Role::Constant, Op::Leaf)
    }

    fn push(&mut self, value: Array2<f64>, role: Role, op: Op) -> Result<Var> {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        if let Some(bad) = value.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite value {bad} produced by {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node { value, role, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn derived(&mut self, value: Array2<f64>, op: Op) -> Result<Var> {
        self.push(value, Role::Intermediate, op)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.value(a).shape(), self.value(b).shape()));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).1 != self.shape(b).0 {
            return Err(shape_err("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let v = self.value(a).dot(self.value(b));
        self.derived(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        self.derived(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("subtract", a, b)?;
        let v = self.value(a) - self.value(b);
        self.derived(v, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a) * c;
        self.derived(v, Op::Scale(a, c))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("multiply", a, b)?;
        let v = self.value(a) * self.value(b);
        self.derived(v, Op::Mul(a, b))
    }

    /// Scales row `i` of `a` (n×h) by `s[i]` (s is n×1).
    pub fn row_scale(&mut self, a: Var, s: Var) -> Result<Var> {
        let (n, _) = self.shape(a);
        if self.shape(s) != (n, 1) {
            return Err(shape_err("row-broadcast-multiply", self.value(a).shape(), self.value(s).shape()));
        }
        let v = self.value(a) * self.value(s);
        self.derived(v, Op::RowScale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).mapv(sigmoid);
        self.derived(v, Op::Sigmoid(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let v = self.value(a).mapv(f64::ln);
        self.derived(v, Op::Ln(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).mapv(f64::exp);
        self.derived(v, Op::Exp(a))
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let total = row.sum();
            row /= total;
        }
        self.derived(v, Op::RowSoftmax(a))
    }

    /// `ln(row_softmax(a))` computed without forming the softmax.
    pub fn row_log_softmax(&mut self, a: Var) -> Result<Var> {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.derived(v, Op::RowLogSoftmax(a))
    }

    /// Squared Euclidean distance of every row of `rows` (n×h) to `row`
    /// (1×h); the result is n×1.
    pub fn sq_dist(&mut self, rows: Var, row: Var) -> Result<Var> {
        let (_, h) = self.shape(rows);
        if self.shape(row) != (1, h) {
            return Err(shape_err("squared-distance", self.value(rows).shape(), self.value(row).shape()));
        }
        let r = self.value(row).row(0).to_owned();
        let d: Vec<f64> = self
            .value(rows)
            .rows()
            .into_iter()
            .map(|x| x.iter().zip(r.iter()).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect();
        let n = d.len();
        let v = Array2::from_shape_vec((n, 1), d).expect("n×1");
        self.derived(v, Op::SqDist(rows, row))
    }

    /// Squared Euclidean distances between every row of `rows` (n×h) and
    /// every row of `centers` (k×h); the result is n×k.
    pub fn pairwise_sq_dist(&mut self, rows: Var, centers: Var) -> Result<Var> {
        let (n, h) = self.shape(rows);
        let (k, hc) = self.shape(centers);
        if h != hc {
            return Err(shape_err("squared-distance", self.value(rows).shape(), self.value(centers).shape()));
        }
        let x = self.value(rows);
        let c = self.value(centers);
        let v = Array2::from_shape_fn((n, k), |(i, j)| {
            x.row(i).iter().zip(c.row(j)).map(|(a, b)| (a - b) * (a - b)).sum()
        });
        self.derived(v, Op::PairwiseSqDist(rows, centers))
    }

    /// `λ·a + (1−λ)·b`.
    pub fn convex(&mut self, a: Var, b: Var, lambda: f64) -> Result<Var> {
        self.same_shape("convex-combine", a, b)?;
        let mut v = self.value(a) * lambda + self.value(b) * (1.0 - lambda);
        clamp_between(&mut v, self.value(a), self.value(b));
        self.derived(v, Op::Convex(a, b, lambda))
    }

    /// Row-wise convex combination with one coefficient per row.
    pub fn convex_rows(&mut self, a: Var, b: Var, lambdas: &[f64]) -> Result<Var> {
        self.same_shape("convex-combine", a, b)?;
        if lambdas.len() != self.shape(a).0 {
            return Err(Error::Shape(format!(
                "convex-combine: {} coefficients for {} rows",
                lambdas.len(),
                self.shape(a).0
            )));
        }
        let lam = Array1::from(lambdas.to_vec());
        let mut v = self.value(a).clone();
        for ((mut out, rb), &l) in v.rows_mut().into_iter().zip(self.value(b).rows()).zip(lambdas) {
            out.zip_mut_with(&rb, |x, &y| *x = l * *x + (1.0 - l) * y);
        }
        clamp_between(&mut v, self.value(a), self.value(b));
        self.derived(v, Op::ConvexRows(a, b, lam))
    }

    pub fn row_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let n = self.shape(a).0;
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!("row-select: index {bad} out of {n} rows")));
        }
        let v = self.value(a).select(Axis(0), indices);
        self.derived(v, Op::RowSelect(a, indices.to_vec()))
    }

    /// Mean over rows; the result is 1×h.
    pub fn row_mean(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).0 == 0 {
            return Err(Error::Contract("row-mean of an empty matrix".into()));
        }
        let v = self.value(a).mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        self.derived(v, Op::RowMean(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.derived(v, Op::Sum(a))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).t().to_owned();
        self.derived(v, Op::Transpose(a))
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Shape(format!("vstack: {e}")))?;
        self.derived(v, Op::VStack(parts.to_vec()))
    }

    pub fn hstack(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| Error::Shape(format!("hstack: {e}")))?;
        self.derived(v, Op::HStack(parts.to_vec()))
    }

    /// Picks column `cols[i]` from row `i`; the result is n×1.
    pub fn pick_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (n, m) = self.shape(a);
        if cols.len() != n || cols.iter().any(|&c| c >= m) {
            return Err(Error::Shape(format!("pick-cols: {} indices for a {n}×{m} matrix", cols.len())));
        }
        let val = self.value(a);
        let v = Array2::from_shape_fn((n, 1), |(i, _)| val[[i, cols[i]]]);
        self.derived(v, Op::PickCols(a, cols.to_vec()))
    }

    /// Gradients of the scalar `loss` with respect to every parameter node.
    pub fn gradients(&self, loss: Var) -> Result<GradientMap> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "gradients requested for a non-scalar node of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut acc = |var: Var, delta: Array2<f64>| match &mut adj[var.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            };
            match &node.op {
                Op::Leaf => {
                    // Parameter gradients are collected below; keep the value.
                    adj[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    acc(*a, g.dot(&self.value(*b).t()));
                    acc(*b, self.value(*a).t().dot(&g));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, -&g);
                    acc(*a, g);
                }
                Op::Scale(a, c) => acc(*a, g * *c),
                Op::Mul(a, b) => {
                    acc(*a, &g * self.value(*b));
                    acc(*b, &g * self.value(*a));
                }
                Op::RowScale(a, s) => {
                    let da = &g * self.value(*s);
                    let ds = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*a, da);
                    acc(*s, ds);
                }
                Op::Sigmoid(a) => acc(*a, &g * &node.value.mapv(|y| y * (1.0 - y))),
                Op::Ln(a) => acc(*a, &g / self.value(*a)),
                Op::Exp(a) => acc(*a, &g * &node.value),
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let inner = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*a, y * &(&g - &inner));
                }
                Op::RowLogSoftmax(a) => {
                    let p = node.value.mapv(f64::exp);
                    let total = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*a, &g - &(&p * &total));
                }
                Op::SqDist(rows, row) => {
                    let diff = self.value(*rows) - self.value(*row);
                    let d_rows = &diff * &(&g * 2.0);
                    let d_row = -d_rows.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(*rows, d_rows);
                    acc(*row, d_row);
                }
                Op::PairwiseSqDist(rows, centers) => {
                    let x = self.value(*rows);
                    let c = self.value(*centers);
                    let mut dx = Array2::<f64>::zeros(x.dim());
                    let mut dc = Array2::<f64>::zeros(c.dim());
                    for (i, xi) in x.rows().into_iter().enumerate() {
                        for (j, cj) in c.rows().into_iter().enumerate() {
                            let w = 2.0 * g[[i, j]];
                            if w == 0.0 {
                                continue;
                            }
                            let mut dxi = dx.row_mut(i);
                            let mut dcj = dc.row_mut(j);
                            for t in 0..xi.len() {
                                let d = w * (xi[t] - cj[t]);
                                dxi[t] += d;
                                dcj[t] -= d;
                            }
                        }
                    }
                    acc(*rows, dx);
                    acc(*centers, dc);
                }
                Op::Convex(a, b, lambda) => {
                    acc(*a, &g * *lambda);
                    acc(*b, g * (1.0 - lambda));
                }
                Op::ConvexRows(a, b, lam) => {
                    let mut da = g.clone();
                    let mut db = g;
                    for ((mut ra, mut rb), &l) in da.rows_mut().into_iter().zip(db.rows_mut()).zip(lam) {
                        ra *= l;
                        rb *= 1.0 - l;
                    }
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::RowSelect(a, indices) => {
                    // Scatter straight into the accumulator; selections are
                    // usually a few rows of a large matrix.
                    let shape = self.shape(*a);
                    let d = adj[a.0].get_or_insert_with(|| Array2::zeros(shape));
                    for (k, &i) in indices.iter().enumerate() {
                        let mut r = d.row_mut(i);
                        r += &g.row(k);
                    }
                }
                Op::RowMean(a) => {
                    let (n, h) = self.shape(*a);
                    let row = g.row(0).to_owned() / n as f64;
                    acc(*a, row.broadcast((n, h)).expect("broadcast").to_owned());
                }
                Op::Sum(a) => acc(*a, Array2::from_elem(self.shape(*a), g[[0, 0]])),
                Op::Transpose(a) => acc(*a, g.t().as_standard_layout().into_owned()),
                Op::VStack(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.shape(p).0;
                        acc(p, g.slice(ndarray::s![start..start + rows, ..]).to_owned());
                        start += rows;
                    }
                }
                Op::HStack(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let cols = self.shape(p).1;
                        acc(p, g.slice(ndarray::s![.., start..start + cols]).to_owned());
                        start += cols;
                    }
                }
                Op::PickCols(a, cols) => {
                    let mut d = Array2::zeros(self.shape(*a));
                    for (i, &c) in cols.iter().enumerate() {
                        d[[i, c]] += g[[i, 0]];
                    }
                    acc(*a, d);
                }
            }
        }

        let mut grads = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Role::Parameter(id) = node.role {
                let g = adj
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Array2::zeros(node.value.dim()));
                match grads.get_mut(&id) {
                    Some(existing) => *existing += &g,
                    None => {
                        grads.insert(id, g);
                    }
                }
            }
        }
        Ok(GradientMap { grads })
    }
}

/// Removes rounding excursions outside the segment between the two sources.
fn clamp_between(v: &mut Array2<f64>, a: &Array2<f64>, b: &Array2<f64>) {
    ndarray::Zip::from(v).and(a).and(b).for_each(|v, &a, &b| {
        *v = v.clamp(a.min(b), a.max(b));
    });
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "subtract",
        Op::Scale(..) => "scale",
        Op::Mul(..) => "multiply",
        Op::RowScale(..) => "row-broadcast-multiply",
        Op::Sigmoid(..) => "sigmoid",
        Op::Ln(..) => "ln",
        Op::Exp(..) => "exp",
        Op::RowSoftmax(..) => "row-softmax",
        Op::RowLogSoftmax(..) => "row-log-softmax",
        Op::SqDist(..) | Op::PairwiseSqDist(..) => "squared-distance",
        Op::Convex(..) | Op::ConvexRows(..) => "convex-combine",
        Op::RowSelect(..) => "row-select",
        Op::RowMean(..) => "row-mean",
        Op::Sum(..) => "sum",
        Op::Transpose(..) => "transpose",
        Op::VStack(..) => "vstack",
        Op::HStack(..) => "hstack",
        Op::PickCols(..) => "pick-cols",
    }
}
