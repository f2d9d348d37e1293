//! Numerical checks of the mixup generalization analysis.
//!
//! Everything here operates on embedding rows `x ∈ R^h` and a linear scorer
//! `θ`. Moments are raw second moments `Σ = (1/m) Σ x xᵀ`; callers that need
//! the centered form call [`center`] first.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::episodes::{Episode, EpisodeSampler};
use crate::error::{Error, Result};
use crate::mixup::BetaSampler;
use crate::protonet::{score_episodes, Checkpoint, ModelParams};
use crate::encoder::EncoderInput;
use crate::seed::SeedStream;

const PSD_TOLERANCE: f64 = 1e-10;

/// Subtracts the column mean from every row.
pub fn center(x: ArrayView2<f64>) -> Array2<f64> {
    match x.mean_axis(Axis(0)) {
        Some(mean) => &x - &mean,
        None => x.to_owned(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMoments {
    pub sigma: Array2<f64>,
    pub mean: Array1<f64>,
    pub rank: usize,
    /// Number of rows the moments were computed from.
    pub m: usize,
    eigenvalues: Vec<f64>,
    eigenvectors: Array2<f64>,
}

impl EmbeddingMoments {
    /// Second moment of the rows of `x` (m × h).
    pub fn compute(x: ArrayView2<f64>) -> Result<Self> {
        let (m, h) = x.dim();
        if m == 0 || h == 0 {
            return Err(Error::Shape(format!("moments need a non-empty matrix, got {m}×{h}")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite embedding".into()));
        }
        let mut sigma = x.t().dot(&x) / m as f64;
        // Symmetrize away rounding before the eigendecomposition.
        sigma = (&sigma + &sigma.t()) / 2.0;
        let mean = x.mean_axis(Axis(0)).expect("m > 0");
        let eig = SymmetricEigen::new(DMatrix::from_fn(h, h, |i, j| sigma[[i, j]]));
        let eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        let min = eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        if min < -PSD_TOLERANCE {
            return Err(Error::Domain(format!("second moment has eigenvalue {min}")));
        }
        let eigenvectors = Array2::from_shape_fn((h, h), |(i, j)| eig.eigenvectors[(i, j)]);
        let max = eigenvalues.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let threshold = m.max(h) as f64 * max * 1e-12;
        let rank = eigenvalues.iter().filter(|&&v| v.abs() > threshold && v > 0.0).count();
        Ok(Self { sigma, mean, rank, m, eigenvalues, eigenvectors })
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }

    fn threshold(&self) -> f64 {
        let max = self.eigenvalues.iter().map(|v| v.abs()).fold(0.0, f64::max);
        self.m.max(self.dim()) as f64 * max * 1e-12
    }

    /// `Σ^{†/2}`: inverse square roots of the eigenvalues above the rank
    /// threshold, zero elsewhere.
    pub fn pinv_sqrt(&self) -> Array2<f64> {
        let h = self.dim();
        let t = self.threshold();
        let mut out = Array2::zeros((h, h));
        for (k, &lambda) in self.eigenvalues.iter().enumerate() {
            if lambda > t && lambda > 0.0 {
                let v = self.eigenvectors.column(k);
                let s = 1.0 / lambda.sqrt();
                for i in 0..h {
                    for j in 0..h {
                        out[[i, j]] += s * v[i] * v[j];
                    }
                }
            }
        }
        out
    }

    /// `θᵀ Σ θ`.
    pub fn nu(&self, theta: ArrayView1<f64>) -> Result<f64> {
        if theta.len() != self.dim() {
            return Err(Error::Shape(format!("θ of length {} against {}×{} moments", theta.len(), self.dim(), self.dim())));
        }
        Ok(theta.dot(&self.sigma.dot(&theta)).max(0.0))
    }

    /// Largest `θ_jᵀ Σ θ_j` over the columns of a projection matrix.
    pub fn nu_of_projection(&self, theta: ArrayView2<f64>) -> Result<f64> {
        theta.columns().into_iter().map(|c| self.nu(c)).try_fold(0.0, |acc, v| Ok(f64::max(acc, v?)))
    }
}

fn check_binary(queries: ArrayView2<f64>, c1: ArrayView1<f64>, c2: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<()> {
    let h = queries.ncols();
    if c1.len() != h || c2.len() != h || theta.len() != h {
        return Err(Error::Shape(format!(
            "queries of width {h}, prototypes {}/{}, θ {}",
            c1.len(),
            c2.len(),
            theta.len()
        )));
    }
    Ok(())
}

/// `P = ⟨x − (C₁+C₂)/2, θ⟩` for each query row.
pub fn margins(queries: ArrayView2<f64>, c1: ArrayView1<f64>, c2: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<Vec<f64>> {
    check_binary(queries, c1, c2, theta)?;
    let mid = (&c1 + &c2) / 2.0;
    Ok(queries.rows().into_iter().map(|x| (&x - &mid).dot(&theta)).collect())
}

/// `Σ_q 1 / (1 + exp P_q)`.
pub fn binary_loss(queries: ArrayView2<f64>, c1: ArrayView1<f64>, c2: ArrayView1<f64>, theta: ArrayView1<f64>) -> Result<f64> {
    Ok(margins(queries, c1, c2, theta)?.into_iter().map(|p| sigmoid(-p)).sum())
}

/// Query rows and the two prototypes of one binary task.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryTask {
    pub queries: Array2<f64>,
    pub c1: Array1<f64>,
    pub c2: Array1<f64>,
}

/// Mean over all query rows of `φ(P)(φ(P) − ½) / (2(1 + e^P)) · θᵀΣθ`.
pub fn regularizer_m(tasks: &[BinaryTask], theta: ArrayView1<f64>, moments: &EmbeddingMoments) -> Result<f64> {
    let nu = moments.nu(theta)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for t in tasks {
        for p in margins(t.queries.view(), t.c1.view(), t.c2.view(), theta)? {
            let phi = sigmoid(p);
            // 1 / (1 + e^P) = φ(−P), stable for large |P|.
            total += phi * (phi - 0.5) * sigmoid(-p) / 2.0;
            count += 1;
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(total / count as f64 * nu)
}

fn check_shapes(eta: f64, gamma: f64) -> Result<()> {
    if eta > 0.0 && gamma > 0.0 && eta.is_finite() && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("Beta shapes must be positive, got {eta}, {gamma}")))
    }
}

/// Mean of `(η/(η+γ)) Beta(η+1, γ) + (γ/(η+γ)) Beta(γ+1, η)`.
pub fn lambda_bar(eta: f64, gamma: f64) -> Result<f64> {
    check_shapes(eta, gamma)?;
    let s = eta + gamma;
    Ok(eta / s * (eta + 1.0) / (s + 1.0) + gamma / s * (gamma + 1.0) / (s + 1.0))
}

/// One draw from the mixture whose mean is [`lambda_bar`].
pub fn sample_lambda_mixture<R: Rng + ?Sized>(eta: f64, gamma: f64, rng: &mut R) -> Result<f64> {
    check_shapes(eta, gamma)?;
    if rng.random_bool(eta / (eta + gamma)) {
        BetaSampler::new(eta + 1.0, gamma)?.sample(rng)
    } else {
        BetaSampler::new(gamma + 1.0, eta)?.sample(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorReport {
    pub scales: Vec<f64>,
    /// `|L(x + sδ) − L(x) − s gᵀδ − ½ s² δᵀHδ|` per scale.
    pub residuals: Vec<f64>,
    /// Least-squares slope of `ln r` against `ln s`; `None` when some
    /// residual is at rounding level.
    pub slope: Option<f64>,
}

/// Second-order expansion check of `f` at `x` along `direction`.
///
/// The directional derivatives come from five-point central differences of
/// `t ↦ f(x + tδ)` with step `1e-2`.
pub fn taylor_check<F>(f: F, x: ArrayView1<f64>, direction: ArrayView1<f64>, scales: &[f64]) -> Result<TaylorReport>
where
    F: Fn(ArrayView1<f64>) -> f64,
{
    if x.len() != direction.len() {
        return Err(Error::Shape(format!("point of length {} and direction of length {}", x.len(), direction.len())));
    }
    if direction.iter().all(|&v| v == 0.0) {
        return Err(Error::Parameter("direction must be non-zero".into()));
    }
    if scales.len() < 4 {
        return Err(Error::Parameter(format!("need at least 4 scales, got {}", scales.len())));
    }
    if scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) || scales.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Parameter("scales must be positive and strictly decreasing".into()));
    }
    let phi = |t: f64| f((&x + &(&direction * t)).view());
    let step = 1e-2;
    let f0 = phi(0.0);
    let (fm2, fm1, fp1, fp2) = (phi(-2.0 * step), phi(-step), phi(step), phi(2.0 * step));
    let d1 = (fm2 - 8.0 * fm1 + 8.0 * fp1 - fp2) / (12.0 * step);
    let d2 = (-fm2 + 16.0 * fm1 - 30.0 * f0 + 16.0 * fp1 - fp2) / (12.0 * step * step);
    let residuals: Vec<f64> = scales
        .iter()
        .map(|&s| (phi(s) - f0 - s * d1 - 0.5 * s * s * d2).abs())
        .collect();
    let floor = 1e-12 * (1.0 + f0.abs());
    let slope = if residuals.iter().all(|&r| r > floor) {
        let pts: Vec<(f64, f64)> = scales.iter().zip(&residuals).map(|(s, r)| (s.ln(), r.ln())).collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        Some(sxy / sxx)
    } else {
        None
    };
    Ok(TaylorReport { scales: scales.to_vec(), residuals, slope })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RademacherEstimate {
    pub estimate: f64,
    pub stderr: f64,
    /// `√(ν · rank / m)`.
    pub bound: f64,
    pub rank: usize,
    pub m: usize,
    pub trials: usize,
}

/// Monte-Carlo empirical Rademacher complexity of `{x ↦ θᵀx : θᵀΣθ ≤ ν}`.
///
/// For a fixed sign vector the supremum is `(√ν/m)‖Σ^{†/2} Σᵢ σᵢxᵢ‖`, with
/// `Σ` the second moment of the rows of `x`. Trial `t` draws its signs from
/// `stream.child(t)`.
pub fn rademacher_mc(x: ArrayView2<f64>, nu: f64, trials: usize, stream: SeedStream) -> Result<RademacherEstimate> {
    if !(nu >= 0.0 && nu.is_finite()) {
        return Err(Error::Parameter(format!("ν must be >= 0, got {nu}")));
    }
    if trials == 0 {
        return Err(Error::Parameter("need at least one trial".into()));
    }
    let moments = EmbeddingMoments::compute(x)?;
    let root = moments.pinv_sqrt();
    let m = x.nrows();
    let whitened = x.dot(&root);
    let scale = nu.sqrt() / m as f64;
    let values: Vec<f64> = (0..trials)
        .map(|t| {
            let mut rng = stream.child(t as u64).rng();
            let mut acc = Array1::<f64>::zeros(whitened.ncols());
            for row in whitened.rows() {
                if rng.random_bool(0.5) {
                    acc += &row;
                } else {
                    acc -= &row;
                }
            }
            scale * acc.dot(&acc).sqrt()
        })
        .collect();
    let n = trials as f64;
    let estimate = values.iter().sum::<f64>() / n;
    let stderr = if trials > 1 {
        let var = values.iter().map(|v| (v - estimate).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    let bound = (nu * moments.rank as f64 / m as f64).sqrt();
    Ok(RademacherEstimate { estimate, stderr, bound, rank: moments.rank, m, trials })
}

fn check_bound_inputs(nu: f64, counts: [(usize, &str); 2], epsilon: f64) -> Result<()> {
    if !(nu >= 0.0 && nu.is_finite()) {
        return Err(Error::Parameter(format!("ν must be >= 0, got {nu}")));
    }
    for (c, name) in counts {
        if c == 0 {
            return Err(Error::Parameter(format!("{name} must be >= 1")));
        }
    }
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::Parameter(format!("ε must lie in (0, 1], got {epsilon}")));
    }
    Ok(())
}

/// Gap bound over `T` tasks with `m` samples each.
pub fn theorem1_bound(nu: f64, rank: usize, m: usize, t: usize, epsilon: f64) -> Result<f64> {
    check_bound_inputs(nu, [(m, "m"), (t, "T")], epsilon)?;
    let (r, m, t) = (rank as f64, m as f64, t as f64);
    let conf = (2.0 / epsilon).ln();
    Ok(2.0 * ((nu * r / m).sqrt() + (nu / t).sqrt() * r) + 3.0 * ((conf / (2.0 * m)).sqrt() + (conf / (2.0 * t)).sqrt()))
}

/// Bound between the training and the test distribution with `m` training
/// and `n_q` test samples.
pub fn theorem2_bound(nu: f64, rank: usize, m: usize, n_q: usize, epsilon: f64) -> Result<f64> {
    check_bound_inputs(nu, [(m, "m"), (n_q, "n_q")], epsilon)?;
    let lead = 2.0 * (nu * rank as f64).sqrt() + ((1.0 / epsilon).ln() / 2.0).sqrt();
    Ok(lead * ((1.0 / m as f64).sqrt() + (1.0 / n_q as f64).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapPoint {
    pub epoch: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    pub gap: f64,
}

/// Accuracy on the un-augmented training pool minus accuracy on fresh test
/// episodes.
pub fn generalization_gap(
    input: &EncoderInput,
    params: &ModelParams,
    pool: &[Episode],
    test: &EpisodeSampler,
    n_tasks: usize,
    stream: SeedStream,
) -> Result<GapPoint> {
    let x = input.embed(&params.encoder)?;
    let theta = &params.metric.theta;
    let train_acc = score_episodes(&x, pool, theta)?.mean_acc;
    let test_acc = score_episodes(&x, &test.sample_many(n_tasks, stream)?, theta)?.mean_acc;
    Ok(GapPoint { epoch: 0, train_acc, test_acc, gap: train_acc - test_acc })
}

/// Gap trace recorded by training checkpoints that had a test monitor.
pub fn gap_trace(checkpoints: &[Checkpoint]) -> Vec<GapPoint> {
    checkpoints
        .iter()
        .filter_map(|c| {
            let test_acc = c.test_acc?;
            Some(GapPoint { epoch: c.epoch, train_acc: c.train_acc, test_acc, gap: c.train_acc - test_acc })
        })
        .collect()
}

/// Centered query embeddings of every task in `pool`.
pub fn query_embeddings(x: &Array2<f64>, pool: &[Episode]) -> Array2<f64> {
    let nodes: Vec<usize> = pool.iter().flat_map(|e| e.query_nodes()).collect();
    center(x.select(Axis(0), &nodes).view())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub nu: f64,
    pub rank: usize,
    /// Samples per task.
    pub m: usize,
    /// Number of training tasks.
    pub t: usize,
    /// Test samples per task.
    pub n_q: usize,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub inputs: BoundInputs,
    pub theorem1_bound: f64,
    pub theorem2_bound: f64,
    pub rademacher: RademacherEstimate,
    pub empirical_gap: Vec<GapPoint>,
}

impl BoundReport {
    pub fn new(inputs: BoundInputs, rademacher: RademacherEstimate, empirical_gap: Vec<GapPoint>) -> Result<Self> {
        let i = &inputs;
        Ok(Self {
            theorem1_bound: theorem1_bound(i.nu, i.rank, i.m, i.t, i.epsilon)?,
            theorem2_bound: theorem2_bound(i.nu, i.rank, i.m, i.n_q, i.epsilon)?,
            inputs,
            rademacher,
            empirical_gap,
        })
    }
}
