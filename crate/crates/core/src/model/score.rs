//! Scores from denoiser heads.
//!
//! With `σ̂² = (1 - α) σ²` and `μ̂(x0) = sqrt(α)(x0 - μ) + μ`:
//!
//! ```text
//! s_eps    = -ε / sqrt(σ̂²)
//! s_x0     = -(x - μ̂(x0)) / σ̂²
//! s_hybrid = λ s_eps + (1 - λ) s_x0,   λ = α^c
//! ```
//!
//! `σ̂²` is floored at [`FLOOR`] before division.

use crate::process::{Condition, ConditionalForwardProcess, FLOOR};
use crate::tensor::{Tape, Tensor, Var};

use super::{HeadVars, Heads, ModelError, NetInput, ScoreNetwork};

/// Exponent of the hybrid weight `λ(t) = α(t)^c`, in `[0.5, 1.5]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HybridConfig {
    c: f64,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl HybridConfig {
    pub const DEFAULT: Self = Self { c: 1.0 };

    pub fn new(c: f64) -> Result<Self, ModelError> {
        if (0.5..=1.5).contains(&c) {
            Ok(Self { c })
        } else {
            Err(ModelError::HybridExponent(c))
        }
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn lambda(&self, alpha: f64) -> f64 {
        lambda(alpha, self.c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Parametrization {
    Eps,
    X0,
    Hybrid(HybridConfig),
}

impl Parametrization {
    pub fn name(&self) -> &'static str {
        match self {
            Parametrization::Eps => "eps",
            Parametrization::X0 => "x0",
            Parametrization::Hybrid(_) => "hybrid",
        }
    }

    /// Whether the ε head contributes to the score, and so to the loss.
    pub fn uses_eps(&self) -> bool {
        !matches!(self, Parametrization::X0)
    }

    pub fn uses_x0(&self) -> bool {
        !matches!(self, Parametrization::Eps)
    }

    /// Score at time `t` from head values.
    pub fn score(
        &self,
        process: &ConditionalForwardProcess,
        heads: &Heads,
        x: &Tensor,
        mu: &Tensor,
        t: f64,
    ) -> Result<Tensor, ModelError> {
        let alpha = process.alpha(t)?;
        let s2 = process.sigma_hat2(t)?;
        match self {
            Parametrization::Eps => Ok(score_eps(&heads.eps, s2)),
            Parametrization::X0 => score_x0(x, &heads.x0, mu, alpha, s2),
            Parametrization::Hybrid(h) => hybrid_combine(
                h.lambda(alpha),
                &score_eps(&heads.eps, s2),
                &score_x0(x, &heads.x0, mu, alpha, s2)?,
            ),
        }
    }

    /// Same as [`score`](Self::score), recorded on a tape.
    pub fn score_var(
        &self,
        tape: &mut Tape,
        process: &ConditionalForwardProcess,
        heads: HeadVars,
        x: Var,
        mu: Var,
        t: f64,
    ) -> Result<Var, ModelError> {
        let alpha = process.alpha(t)?;
        let s2 = process.sigma_hat2(t)?.max(FLOOR);
        let eps_part = |tape: &mut Tape| tape.scale(heads.eps, -1.0 / s2.sqrt());
        let x0_part = |tape: &mut Tape| -> Result<Var, ModelError> {
            // -(x - μ - sqrt(α)(x0 - μ)) / σ̂²
            let d = tape.sub(heads.x0, mu)?;
            let d = tape.scale(d, alpha.sqrt())?;
            let xm = tape.sub(x, mu)?;
            let r = tape.sub(xm, d)?;
            Ok(tape.scale(r, -1.0 / s2)?)
        };
        match self {
            Parametrization::Eps => Ok(eps_part(tape)?),
            Parametrization::X0 => x0_part(tape),
            Parametrization::Hybrid(h) => {
                let lam = h.lambda(alpha);
                if lam == 1.0 {
                    return Ok(eps_part(tape)?);
                }
                if lam == 0.0 {
                    return x0_part(tape);
                }
                let a = eps_part(tape)?;
                let a = tape.scale(a, lam)?;
                let b = x0_part(tape)?;
                let b = tape.scale(b, 1.0 - lam)?;
                Ok(tape.add(a, b)?)
            }
        }
    }
}

/// `λ = α^c`.
pub fn lambda(alpha: f64, c: f64) -> f64 {
    alpha.powf(c)
}

/// `-ε / sqrt(σ̂²)`.
pub fn score_eps(eps: &Tensor, sigma_hat2: f64) -> Tensor {
    eps.scale(-1.0 / sigma_hat2.max(FLOOR).sqrt())
}

/// `-(x - μ̂(x0)) / σ̂²`.
pub fn score_x0(x: &Tensor, x0: &Tensor, mu: &Tensor, alpha: f64, sigma_hat2: f64) -> Result<Tensor, ModelError> {
    let mu_hat = ConditionalForwardProcess::mu_hat_with_alpha(x0, mu, alpha)?;
    let inv = -1.0 / sigma_hat2.max(FLOOR);
    Ok(x.zip_map(&mu_hat, |a, m| (a - m) * inv)?)
}

/// `λ s_eps + (1 - λ) s_x0`, returning an input unchanged at `λ ∈ {0, 1}`.
pub fn hybrid_combine(lambda: f64, s_eps: &Tensor, s_x0: &Tensor) -> Result<Tensor, ModelError> {
    if lambda == 1.0 {
        return Ok(s_eps.clone());
    }
    if lambda == 0.0 {
        return Ok(s_x0.clone());
    }
    Ok(s_eps.zip_map(s_x0, |a, b| lambda * a + (1.0 - lambda) * b)?)
}

/// Anything that yields `∇ log p_t(x | y)`.
pub trait ScoreFn: Sync {
    fn score(&self, x: &Tensor, cond: &Condition, t: f64) -> Result<Tensor, ModelError>;
}

/// Exact score of the Gaussian toy law `N(μ(y), σ²I)`.
#[derive(Debug, Clone, Copy)]
pub struct AnalyticGaussianScore<'a> {
    pub process: &'a ConditionalForwardProcess,
}

impl ScoreFn for AnalyticGaussianScore<'_> {
    fn score(&self, x: &Tensor, cond: &Condition, _t: f64) -> Result<Tensor, ModelError> {
        Ok(self.process.analytic_gaussian_score(x, cond)?)
    }
}

/// Always zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroScore;

impl ScoreFn for ZeroScore {
    fn score(&self, x: &Tensor, _cond: &Condition, _t: f64) -> Result<Tensor, ModelError> {
        Ok(Tensor::zeros(x.shape()))
    }
}

/// A trained network read through a parametrization.
#[derive(Debug, Clone, Copy)]
pub struct ModelScore<'a> {
    pub net: &'a ScoreNetwork,
    pub process: &'a ConditionalForwardProcess,
    pub param: Parametrization,
}

impl ModelScore<'_> {
    pub fn heads(&self, x: &Tensor, cond: &Condition, t: f64) -> Result<Heads, ModelError> {
        self.net.heads(
            x,
            &cond.lr,
            &cond.mu,
            t / self.process.horizon(),
            self.process.sigma2().sqrt(),
        )
    }

    /// Records the score on `tape` with parameters `params`; `lr` and `mu`
    /// must already be on the tape.
    pub fn score_var(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        lr: Var,
        mu: Var,
        t: f64,
    ) -> Result<Var, ModelError> {
        let input = NetInput {
            x,
            lr,
            mu,
            t: t / self.process.horizon(),
            sigma: self.process.sigma2().sqrt(),
        };
        let heads = self.net.forward(tape, params, &input)?;
        self.param.score_var(tape, self.process, heads, x, mu, t)
    }
}

impl ScoreFn for ModelScore<'_> {
    fn score(&self, x: &Tensor, cond: &Condition, t: f64) -> Result<Tensor, ModelError> {
        let heads = self.heads(x, cond, t)?;
        self.param.score(self.process, &heads, x, &cond.mu, t)
    }
}
