//! Closed-form probabilistic kernels, in plain `f64` and as graph builders.

use efe_autodiff::{Graph, Real, Tensor, Var};

use crate::error::NumericsError;

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-9;
/// Floor applied to the encoder's variance head.
pub const VAR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self, NumericsError> {
        if mean.len() != variance.len() {
            return Err(NumericsError::LengthMismatch { left: mean.len(), right: variance.len() });
        }
        if variance.iter().any(|&v| !(v > 0.0)) {
            return Err(NumericsError::NonPositiveVariance);
        }
        Ok(DiagGaussian { mean, variance })
    }

    /// Unit-variance Gaussian around `mean`.
    pub fn unit(mean: Vec<f64>) -> Self {
        let variance = vec![1.0; mean.len()];
        DiagGaussian { mean, variance }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Categorical {
    probs: Vec<f64>,
}

impl Categorical {
    pub fn new(probs: Vec<f64>) -> Result<Self, NumericsError> {
        let total: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-6 {
            return Err(NumericsError::NotADistribution);
        }
        Ok(Categorical { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index drawn by inverse CDF from a uniform `u ∈ [0, 1)`.
    pub fn sample_with(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // u landed in the rounding gap above the total; take the last
        // index with nonzero mass.
        self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

/// `mean + sqrt(variance) ⊙ noise`.
pub fn reparameterize(d: &DiagGaussian, noise: &[f64]) -> Result<Vec<f64>, NumericsError> {
    if noise.len() != d.dim() {
        return Err(NumericsError::LengthMismatch { left: d.dim(), right: noise.len() });
    }
    Ok(d.mean.iter().zip(&d.variance).zip(noise).map(|((m, v), e)| m + v.sqrt() * e).collect())
}

/// `KL[p ‖ q]` split as energy `−Σ p ln q` plus the entropy term `Σ p ln p`
/// (the negated entropy of `p`), so the two addends sum to the divergence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlSplit {
    pub energy: f64,
    pub entropy: f64,
}

impl KlSplit {
    pub fn total(&self) -> f64 {
        self.energy + self.entropy
    }
}

pub fn kl_categorical(p: &Categorical, q: &Categorical) -> Result<KlSplit, NumericsError> {
    if p.len() != q.len() {
        return Err(NumericsError::LengthMismatch { left: p.len(), right: q.len() });
    }
    let mut energy = 0.0;
    let mut entropy = 0.0;
    for (&pi, &qi) in p.probs.iter().zip(&q.probs) {
        energy -= pi * qi.max(PROB_FLOOR).ln();
        entropy += pi * pi.max(PROB_FLOOR).ln();
    }
    Ok(KlSplit { energy, entropy })
}

/// `KL[a ‖ b]` for diagonal Gaussians.
pub fn kl_diag_gaussian(a: &DiagGaussian, b: &DiagGaussian) -> Result<f64, NumericsError> {
    if a.dim() != b.dim() {
        return Err(NumericsError::LengthMismatch { left: a.dim(), right: b.dim() });
    }
    let mut kl = 0.0;
    for i in 0..a.dim() {
        let (va, vb) = (a.variance[i], b.variance[i]);
        let d = a.mean[i] - b.mean[i];
        kl += (vb / va).ln() + (va + d * d) / vb - 1.0;
    }
    Ok((0.5 * kl).max(0.0))
}

/// `softmax(−gamma · g)`, max-subtracted.
pub fn boltzmann(g: &[f64], gamma: f64) -> Categorical {
    assert!(gamma > 0.0, "precision must be positive");
    let logits: Vec<f64> = g.iter().map(|&v| -gamma * v).collect();
    Categorical { probs: efe_autodiff::graph::softmax(&logits) }
}

pub fn mse(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64, NumericsError> {
    if a.shape() != b.shape() {
        return Err(NumericsError::ShapeMismatch { left: a.shape().to_vec(), right: b.shape().to_vec() });
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

// ---- graph builders ----------------------------------------------------

/// Differentiable `mean + sqrt(variance) ⊙ noise`.
pub fn reparameterize_var<T: Real>(g: &mut Graph<'_, T>, mean: Var, variance: Var, noise: Tensor<T>) -> Var {
    let std = g.sqrt(variance);
    let eps = g.constant(noise);
    let scaled = g.mul(std, eps);
    g.add(mean, scaled)
}

/// Row-wise `KL[p ‖ q]` of `[B, K]` probability matrices, returned as the
/// energy and entropy addends, each of shape `[B]`.
pub fn kl_categorical_rows<T: Real>(g: &mut Graph<'_, T>, p: Var, q: Var) -> (Var, Var) {
    let floor = T::of(PROB_FLOOR);
    let ln_q = g.ln_floor(q, floor);
    let p_ln_q = g.mul(p, ln_q);
    let energy = g.sum_rows(p_ln_q);
    let energy = g.neg(energy);
    let ln_p = g.ln_floor(p, floor);
    let p_ln_p = g.mul(p, ln_p);
    let entropy = g.sum_rows(p_ln_p);
    (energy, entropy)
}

/// Row-wise `KL[N(mean, variance) ‖ N(0, I)]` of `[B, L]` matrices, shape `[B]`.
pub fn kl_standard_normal_rows<T: Real>(g: &mut Graph<'_, T>, mean: Var, variance: Var) -> Var {
    let mean_sq = g.square(mean);
    let ln_var = g.ln_floor(variance, T::of(VAR_FLOOR * 1e-3));
    let a = g.add(variance, mean_sq);
    let b = g.sub(a, ln_var);
    let c = g.add_scalar(b, -T::one());
    let rows = g.sum_rows(c);
    g.scale(rows, T::of(0.5))
}

/// Mean squared difference over all elements.
pub fn mse_var<T: Real>(g: &mut Graph<'_, T>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let sq = g.square(d);
    g.mean(sq)
}
