//! Closed-form densities and divergences for the diagonal Gaussian,
//! Dirichlet, categorical and Bernoulli distributions.
//!
//! Every function here has a plain `f64` form working on a single vector
//! and a differentiable form in [`graph`] that works row-wise on a batch.

use crate::autodiff::softplus;
use crate::error::{Error, Result};
use crate::special::{ln_gamma, psi};

/// `N(mean, diag(exp(log_var)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    log_var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::shape("DiagGaussian", &[mean.len()], &[log_var.len()]));
        }
        if !log_var.iter().chain(&mean).all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("Gaussian parameters must be finite".into()));
        }
        Ok(Self { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `log N(z; mean, diag(exp(log_var)))`.
    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(Error::shape("DiagGaussian::log_density", &[self.dim()], &[z.len()]));
        }
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        Ok(z
            .iter()
            .zip(&self.mean)
            .zip(&self.log_var)
            .map(|((&z, &m), &lv)| -0.5 * (ln_2pi + lv + (z - m) * (z - m) * (-lv).exp()))
            .sum())
    }
}

/// Positive concentration vector of a Dirichlet distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletParams {
    alpha: Vec<f64>,
}

impl DirichletParams {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::InvalidArgument("empty concentration vector".into()));
        }
        if let Some(&bad) = alpha.iter().find(|&&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::Domain {
                func: "Dirichlet concentration",
                value: bad,
            });
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }
}

/// Per-dimension and total `KL(q ‖ N(0, I))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussKl {
    pub per_dim: Vec<f64>,
    pub total: f64,
}

pub fn gauss_kl_std(q: &DiagGaussian) -> GaussKl {
    let per_dim: Vec<f64> = q
        .mean
        .iter()
        .zip(&q.log_var)
        .map(|(&m, &lv)| gauss_kl_term(m, lv))
        .collect();
    let total = per_dim.iter().sum();
    GaussKl { per_dim, total }
}

/// `½(μ² + σ² − 1 − log σ²)` for one coordinate.
#[inline]
pub fn gauss_kl_term(mean: f64, log_var: f64) -> f64 {
    0.5 * (mean * mean + log_var.exp() - log_var - 1.0)
}

/// Reparameterized draw `mean + exp(½·log_var) ⊙ noise`.
pub fn gauss_sample(q: &DiagGaussian, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != q.dim() {
        return Err(Error::shape("gauss_sample", &[q.dim()], &[noise.len()]));
    }
    Ok(q.mean
        .iter()
        .zip(&q.log_var)
        .zip(noise)
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// Closed-form `KL(Dir(q) ‖ Dir(p))`.
pub fn dirichlet_kl(q: &DirichletParams, p: &DirichletParams) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::shape("dirichlet_kl", &[q.len()], &[p.len()]));
    }
    let sq: f64 = q.alpha.iter().sum();
    let sp: f64 = p.alpha.iter().sum();
    let psi_sq = psi(sq);
    let mut kl = ln_gamma(sq) - ln_gamma(sp);
    for (&a, &b) in q.alpha.iter().zip(&p.alpha) {
        kl += ln_gamma(b) - ln_gamma(a) + (a - b) * (psi(a) - psi_sq);
    }
    Ok(kl)
}

/// Conjugate update of a symmetric prior `Dir(alpha_p·1)` after observing
/// class `y`: `alpha_p·1 + onehot(y)`.
pub fn dirichlet_posterior(alpha_p: f64, classes: usize, y: usize) -> Result<DirichletParams> {
    if y >= classes {
        return Err(Error::OutOfRange {
            what: "class label",
            index: y,
            len: classes,
        });
    }
    let mut alpha = vec![alpha_p; classes];
    alpha[y] += 1.0;
    DirichletParams::new(alpha)
}

/// The Dirichlet mean `α / Σα`, used as `q(y|x)`.
pub fn class_prob_from_dirichlet(q: &DirichletParams) -> Vec<f64> {
    let s: f64 = q.alpha.iter().sum();
    q.alpha.iter().map(|a| a / s).collect()
}

pub fn categorical_nll(log_probs: &[f64], y: usize) -> Result<f64> {
    log_probs.get(y).map(|lp| -lp).ok_or(Error::OutOfRange {
        what: "class label",
        index: y,
        len: log_probs.len(),
    })
}

/// `Σ x·log σ(l) + (1 − x)·log(1 − σ(l))`, written as `Σ x·l − softplus(l)`.
pub fn bernoulli_recon_ll(logits: &[f64], x: &[f64]) -> Result<f64> {
    if logits.len() != x.len() {
        return Err(Error::shape("bernoulli_recon_ll", &[logits.len()], &[x.len()]));
    }
    check_unit_interval(x)?;
    Ok(logits.iter().zip(x).map(|(&l, &x)| x * l - softplus(l)).sum())
}

pub(crate) fn check_unit_interval(x: &[f64]) -> Result<()> {
    match x.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
        Some(&value) => Err(Error::Domain {
            func: "Bernoulli target",
            value,
        }),
        None => Ok(()),
    }
}

/// Batched, differentiable versions. Row `r` of every input belongs to
/// example `r`; per-example results come back as `rows × 1` columns.
pub mod graph {
    use super::check_unit_interval;
    use crate::autodiff::{Tape, Var};
    use crate::error::{Error, Result};
    use crate::special::ln_gamma;
    use crate::tensor::Tensor;

    /// Per-coordinate Gaussian KL, same shape as `mean`.
    pub fn gauss_kl_std(tape: &mut Tape, mean: Var, log_var: Var) -> Result<Var> {
        let m2 = tape.square(mean)?;
        let var = tape.exp(log_var)?;
        let a = tape.add(m2, var)?;
        let b = tape.sub(a, log_var)?;
        let c = tape.shift(b, -1.0)?;
        tape.scale(c, 0.5)
    }

    pub fn gauss_sample(tape: &mut Tape, mean: Var, log_var: Var, noise: Var) -> Result<Var> {
        if tape.value(noise).shape() != tape.value(mean).shape() {
            return Err(Error::shape(
                "gauss_sample",
                tape.value(mean).shape(),
                tape.value(noise).shape(),
            ));
        }
        let half = tape.scale(log_var, 0.5)?;
        let std = tape.exp(half)?;
        let scaled = tape.mul(std, noise)?;
        tape.add(mean, scaled)
    }

    /// `KL(Dir(q_r) ‖ Dir(p_r))` per row; `p` is fixed.
    pub fn dirichlet_kl(tape: &mut Tape, q: Var, p: &Tensor) -> Result<Var> {
        let (rows, cols) = tape.value(q).dims2()?;
        if p.shape() != [rows, cols] {
            return Err(Error::shape("dirichlet_kl", tape.value(q).shape(), p.shape()));
        }
        let p_const: Vec<f64> = (0..rows)
            .map(|r| {
                let row = p.row_slice(r);
                row.iter().map(|&b| ln_gamma(b)).sum::<f64>() - ln_gamma(row.iter().sum())
            })
            .collect();
        let p_const = tape.constant(Tensor::new(&[rows, 1], p_const)?);
        let p_var = tape.constant(p.clone());

        let sq = tape.sum_cols(q)?;
        let lg_sq = tape.lgamma(sq)?;
        let lg_q = tape.lgamma(q)?;
        let sum_lg_q = tape.sum_cols(lg_q)?;
        let psi_q = tape.digamma(q)?;
        let psi_sq = tape.digamma(sq)?;
        let dpsi = tape.sub(psi_q, psi_sq)?;
        let diff = tape.sub(q, p_var)?;
        let cross = tape.mul(diff, dpsi)?;
        let cross = tape.sum_cols(cross)?;

        let a = tape.sub(lg_sq, sum_lg_q)?;
        let b = tape.add(a, p_const)?;
        tape.add(b, cross)
    }

    /// `log(α / Σα)` per row.
    pub fn class_log_prob(tape: &mut Tape, alpha: Var) -> Result<Var> {
        let total = tape.sum_cols(alpha)?;
        let log_total = tape.log(total)?;
        let log_alpha = tape.log(alpha)?;
        tape.sub(log_alpha, log_total)
    }

    pub fn categorical_nll(tape: &mut Tape, log_probs: Var, labels: &[usize]) -> Result<Var> {
        let onehot = one_hot(labels, tape.value(log_probs).dims2()?)?;
        let onehot = tape.constant(onehot);
        let picked = tape.mul(log_probs, onehot)?;
        let picked = tape.sum_cols(picked)?;
        tape.neg(picked)
    }

    pub fn bernoulli_recon_ll(tape: &mut Tape, logits: Var, x: Var) -> Result<Var> {
        check_unit_interval(tape.value(x).data())?;
        let xl = tape.mul(x, logits)?;
        let sp = tape.softplus(logits)?;
        let ll = tape.sub(xl, sp)?;
        tape.sum_cols(ll)
    }

    pub(crate) fn one_hot(labels: &[usize], (rows, cols): (usize, usize)) -> Result<Tensor> {
        if labels.len() != rows {
            return Err(Error::shape("one_hot", &[labels.len()], &[rows, cols]));
        }
        let mut t = Tensor::zeros(&[rows, cols]);
        for (r, &y) in labels.iter().enumerate() {
            if y >= cols {
                return Err(Error::OutOfRange {
                    what: "class label",
                    index: y,
                    len: cols,
                });
            }
            t.data_mut()[r * cols + y] = 1.0;
        }
        Ok(t)
    }
}
