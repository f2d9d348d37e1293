//! Degree-refined simple graph convolution.
//!
//! Given propagated features `P`, the encoder computes
//!
//! ```text
//! H = P·W*          κ = P·W_deg         α = ln D̂
//! β = softmax(σ(α ⊙ κ))  (over all n nodes)
//! X = β ⊙ H          (row i of H scaled by βᵢ)
//! ```
//!
//! With degree refinement disabled the output is `H` itself.
//!
//! [`EncoderInput`], which feeds training and evaluation, returns `n·X`:
//! β then has mean one instead of sum one, so refined rows stay on the scale
//! of `H` rather than shrinking by `1/n`. The relative node weights are
//! unchanged and a constant factor is absorbed by the metric projection.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::PropagatedFeatures;

pub const W_STAR: ParamId = ParamId(0);
pub const W_DEG: ParamId = ParamId(1);

pub const DEFAULT_HIDDEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    /// d × h collapsed propagation weights.
    pub w_star: Array2<f64>,
    /// d × 1 interaction-weight head.
    pub w_deg: Array2<f64>,
}

impl EncoderParams {
    /// Fan-in uniform initialization in `[−1/√d, 1/√d]`.
    pub fn init<R: Rng>(feature_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if hidden == 0 || feature_dim == 0 {
            return Err(Error::Parameter(format!(
                "encoder needs positive dimensions, got d = {feature_dim}, h = {hidden}"
            )));
        }
        let bound = 1.0 / (feature_dim as f64).sqrt();
        let w_star = Array2::from_shape_fn((feature_dim, hidden), |_| rng.random_range(-bound..=bound));
        let w_deg = Array2::from_shape_fn((feature_dim, 1), |_| rng.random_range(-bound..=bound));
        Ok(Self { w_star, w_deg })
    }

    pub fn feature_dim(&self) -> usize {
        self.w_star.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w_star.ncols()
    }
}

/// Tape handles for the encoder parameters of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub w_star: Var,
    pub w_deg: Var,
}

impl EncoderVars {
    pub fn register(tape: &mut Tape, params: &EncoderParams) -> Result<Self> {
        Ok(Self {
            w_star: tape.param(W_STAR, &params.w_star)?,
            w_deg: tape.param(W_DEG, &params.w_deg)?,
        })
    }
}

/// Node centralities `α = ln D̂` as an n × 1 column.
pub fn centralities(degrees: &[usize]) -> Array2<f64> {
    Array1::from_iter(degrees.iter().map(|&d| (d as f64).ln()))
        .insert_axis(Axis(1))
}

/// Tape-level intermediates of one encoder pass.
#[derive(Debug, Clone, Copy)]
pub struct EncodedVars {
    pub h: Var,
    pub kappa: Option<Var>,
    pub beta: Option<Var>,
    pub x: Var,
}

fn check_dims(p: ArrayView2<f64>, params: &EncoderParams) -> Result<()> {
    if p.ncols() != params.feature_dim() {
        return Err(Error::Shape(format!(
            "propagated features have {} columns, encoder expects {}",
            p.ncols(),
            params.feature_dim()
        )));
    }
    Ok(())
}

/// Records the encoder on `tape`. `p` and `alpha` are constants holding the
/// propagated features and the centralities; pass `alpha = None` to skip
/// degree refinement.
pub fn encode_on_tape(tape: &mut Tape, p: Var, alpha: Option<Var>, vars: EncoderVars) -> Result<EncodedVars> {
    let h = tape.matmul(p, vars.w_star)?;
    let Some(alpha) = alpha else {
        return Ok(EncodedVars { h, kappa: None, beta: None, x: h });
    };
    if tape.shape(alpha) != (tape.shape(p).0, 1) {
        return Err(Error::Shape(format!(
            "{} centralities for {} nodes",
            tape.shape(alpha).0,
            tape.shape(p).0
        )));
    }
    let kappa = tape.matmul(p, vars.w_deg)?;
    let scored = tape.mul(alpha, kappa)?;
    let gated = tape.sigmoid(scored)?;
    let row = tape.transpose(gated)?;
    let soft = tape.row_softmax(row)?;
    let beta = tape.transpose(soft)?;
    let x = tape.row_scale(h, beta)?;
    Ok(EncodedVars { h, kappa: Some(kappa), beta: Some(beta), x })
}

/// Everything the encoder needs from the graph, computed once per dataset.
#[derive(Debug, Clone)]
pub struct EncoderInput {
    pub propagated: PropagatedFeatures,
    pub alpha: Array2<f64>,
    /// Apply degree refinement; `false` gives the plain SGC head.
    pub refine: bool,
}

impl EncoderInput {
    pub fn new(propagated: PropagatedFeatures, degrees: &[usize], refine: bool) -> Result<Self> {
        if degrees.len() != propagated.n_nodes() {
            return Err(Error::Shape(format!(
                "{} degrees for {} propagated rows",
                degrees.len(),
                propagated.n_nodes()
            )));
        }
        Ok(Self { alpha: centralities(degrees), propagated, refine })
    }

    pub fn n_nodes(&self) -> usize {
        self.propagated.n_nodes()
    }

    pub fn feature_dim(&self) -> usize {
        self.propagated.dim()
    }

    /// Records the forward pass and returns the node embedding matrix
    /// (`n·X` when refined, `H` otherwise).
    pub fn forward(&self, tape: &mut Tape, vars: EncoderVars) -> Result<Var> {
        let p = tape.constant(self.propagated.values.clone())?;
        if !self.refine {
            return tape.matmul(p, vars.w_star);
        }
        let alpha = tape.constant(self.alpha.clone())?;
        let x = encode_on_tape(tape, p, Some(alpha), vars)?.x;
        tape.scale(x, self.n_nodes() as f64)
    }

    /// Node embeddings for fixed parameters.
    pub fn embed(&self, params: &EncoderParams) -> Result<Array2<f64>> {
        check_dims(self.propagated.values.view(), params)?;
        let mut tape = Tape::new();
        let vars = EncoderVars::register(&mut tape, params)?;
        let x = self.forward(&mut tape, vars)?;
        Ok(tape.value(x).clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedEmbeddings {
    pub h: Array2<f64>,
    pub kappa: Array2<f64>,
    pub alpha: Array2<f64>,
    pub beta: Array2<f64>,
    pub x: Array2<f64>,
}

pub fn encode(p: &PropagatedFeatures, degrees: &[usize], params: &EncoderParams) -> Result<RefinedEmbeddings> {
    check_dims(p.values.view(), params)?;
    if degrees.len() != p.n_nodes() {
        return Err(Error::Shape(format!(
            "{} degrees for {} propagated rows",
            degrees.len(),
            p.n_nodes()
        )));
    }
    let mut tape = Tape::new();
    let vars = EncoderVars::register(&mut tape, params)?;
    let pv = tape.constant(p.values.clone())?;
    let alpha = centralities(degrees);
    let av = tape.constant(alpha.clone())?;
    let out = encode_on_tape(&mut tape, pv, Some(av), vars)?;
    Ok(RefinedEmbeddings {
        h: tape.value(out.h).clone(),
        kappa: tape.value(out.kappa.expect("refined")).clone(),
        alpha,
        beta: tape.value(out.beta.expect("refined")).clone(),
        x: tape.value(out.x).clone(),
    })
}

/// `H = P·W*` without degree refinement.
pub fn encode_plain(p: &PropagatedFeatures, params: &EncoderParams) -> Result<Array2<f64>> {
    check_dims(p.values.view(), params)?;
    Ok(p.values.dot(&params.w_star))
}
