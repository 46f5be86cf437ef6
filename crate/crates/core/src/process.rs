//! The conditional forward SDE
//!
//! ```text
//! dx = -½ β(t) (x - μ(y)) dt + sqrt(β(t) σ²) dw
//! ```
//!
//! with a linear rate `β`, `μ(y)` the bicubic upscale of the low-resolution
//! image and a scalar pixel variance `σ²`. Its transition law from `x0` is
//! Gaussian with mean `sqrt(α)(x0 - μ) + μ` and variance `(1 - α) σ²`.

use crate::image::{upscale, ImageError};
use crate::rng::{standard_normal, Rng};
use crate::tensor::{Tensor, TensorError};

/// Lower bound applied to `α(t)` and to `σ̂²` before division.
pub const FLOOR: f64 = 1e-12;
/// Earliest time used for training draws and as the sampling endpoint.
pub const T_MIN: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum ProcessError {
    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("invalid variance {0}")]
    Variance(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Linear noise rate `β(t) = β0 + (βT - β0) t / T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaSchedule {
    beta0: f64,
    beta_t: f64,
    horizon: f64,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        Self {
            beta0: 0.1,
            beta_t: 20.0,
            horizon: 1.0,
        }
    }
}

impl BetaSchedule {
    pub fn new(beta0: f64, beta_t: f64, horizon: f64) -> Result<Self, ProcessError> {
        if !(beta0 > 0.0 && beta0 <= beta_t && beta_t.is_finite()) {
            return Err(ProcessError::Schedule(format!(
                "need 0 < beta0 <= betaT, got {beta0}, {beta_t}"
            )));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(ProcessError::Schedule(format!("horizon {horizon}")));
        }
        Ok(Self { beta0, beta_t, horizon })
    }

    pub fn beta0(&self) -> f64 {
        self.beta0
    }

    pub fn beta_t(&self) -> f64 {
        self.beta_t
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// `β(t)`; not range-checked, callers integrate slightly past the ends.
    pub fn beta(&self, t: f64) -> f64 {
        self.beta0 + (self.beta_t - self.beta0) * t / self.horizon
    }

    /// `∫₀ᵗ β(s) ds`.
    pub fn integral(&self, t: f64) -> f64 {
        self.beta0 * t + (self.beta_t - self.beta0) * t * t / (2.0 * self.horizon)
    }

    fn check(&self, t: f64) -> Result<(), ProcessError> {
        if (0.0..=self.horizon).contains(&t) {
            Ok(())
        } else {
            Err(ProcessError::TimeOutOfRange {
                t,
                horizon: self.horizon,
            })
        }
    }

    /// `α(t) = exp(-∫₀ᵗ β)`, floored at [`FLOOR`].
    pub fn alpha(&self, t: f64) -> Result<f64, ProcessError> {
        self.check(t)?;
        Ok((-self.integral(t)).exp().max(FLOOR))
    }

    /// `1 - α(t)` without cancellation for small `t`.
    pub fn one_minus_alpha(&self, t: f64) -> Result<f64, ProcessError> {
        self.check(t)?;
        Ok(-(-self.integral(t)).exp_m1())
    }
}

/// A low-resolution image together with its conditional mean `μ(y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub lr: Tensor,
    pub mu: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalForwardProcess {
    pub schedule: BetaSchedule,
    sigma2: f64,
    pub scale: usize,
}

/// Transition mean and variance from a known clean image.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionStats {
    pub mu_hat: Tensor,
    pub sigma_hat2: f64,
}

impl ConditionalForwardProcess {
    pub fn new(schedule: BetaSchedule, sigma2: f64, scale: usize) -> Result<Self, ProcessError> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(ProcessError::Variance(sigma2));
        }
        Ok(Self {
            schedule,
            sigma2,
            scale,
        })
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn horizon(&self) -> f64 {
        self.schedule.horizon
    }

    pub fn alpha(&self, t: f64) -> Result<f64, ProcessError> {
        self.schedule.alpha(t)
    }

    /// `σ̂²(t) = (1 - α(t)) σ²`, unfloored.
    pub fn sigma_hat2(&self, t: f64) -> Result<f64, ProcessError> {
        Ok(self.schedule.one_minus_alpha(t)? * self.sigma2)
    }

    /// `μ(y)`: bicubic upscale by the process scale.
    pub fn mu_of_y(&self, lr: &Tensor) -> Result<Tensor, ProcessError> {
        Ok(upscale(lr, self.scale)?)
    }

    pub fn condition(&self, lr: &Tensor) -> Result<Condition, ProcessError> {
        Ok(Condition {
            lr: lr.clone(),
            mu: self.mu_of_y(lr)?,
        })
    }

    /// `μ̂ = sqrt(α)(x0 - μ) + μ` for a given mean and `α`.
    pub fn mu_hat_with_alpha(x0: &Tensor, mu: &Tensor, alpha: f64) -> Result<Tensor, ProcessError> {
        let k = alpha.sqrt();
        Ok(x0.zip_map(mu, |x, m| k * (x - m) + m)?)
    }

    pub fn transition_stats(&self, x0: &Tensor, cond: &Condition, t: f64) -> Result<TransitionStats, ProcessError> {
        let alpha = self.alpha(t)?;
        Ok(TransitionStats {
            mu_hat: Self::mu_hat_with_alpha(x0, &cond.mu, alpha)?,
            sigma_hat2: self.sigma_hat2(t)?,
        })
    }

    /// `x_t = μ̂ + sqrt(σ̂²) noise`.
    pub fn sample_transition(
        &self,
        x0: &Tensor,
        cond: &Condition,
        t: f64,
        noise: &Tensor,
    ) -> Result<Tensor, ProcessError> {
        let st = self.transition_stats(x0, cond, t)?;
        Ok(st.mu_hat.axpy(st.sigma_hat2.sqrt(), noise)?)
    }

    /// Score of `N(μ(y), σ²I)`, which the forward process leaves invariant.
    pub fn analytic_gaussian_score(&self, x: &Tensor, cond: &Condition) -> Result<Tensor, ProcessError> {
        let inv = 1.0 / self.sigma2;
        Ok(x.zip_map(&cond.mu, |x, m| -(x - m) * inv)?)
    }

    /// Euler–Maruyama trajectory from `0` to `T`, all `steps + 1` states.
    pub fn euler_maruyama_forward(
        &self,
        x0: &Tensor,
        cond: &Condition,
        steps: usize,
        rng: &mut Rng,
    ) -> Result<Vec<Tensor>, ProcessError> {
        if x0.shape() != cond.mu.shape() {
            return Err(TensorError::Shape {
                op: "euler_maruyama_forward",
                detail: format!("{:?} vs {:?}", x0.shape(), cond.mu.shape()),
            }
            .into());
        }
        let mut traj = Vec::with_capacity(steps + 1);
        let mut x = x0.data().to_vec();
        traj.push(x0.clone());
        let sim = ForwardSimulation {
            process: self,
            t_end: self.horizon(),
            steps,
            drift_scale: 1.0,
        };
        sim.run(&mut x, cond.mu.data(), rng, |_, _, state| {
            traj.push(Tensor::new(x0.shape(), state.to_vec()).expect("shape preserved"));
        });
        Ok(traj)
    }
}

/// Streaming Euler–Maruyama over many independent paths sharing one mean.
///
/// `drift_scale` multiplies the mean-reverting drift; `1.0` is the true
/// process and `-1.0` is used to check that statistical harnesses detect a
/// broken simulator.
#[derive(Debug, Clone, Copy)]
pub struct ForwardSimulation<'a> {
    pub process: &'a ConditionalForwardProcess,
    pub t_end: f64,
    pub steps: usize,
    pub drift_scale: f64,
}

impl ForwardSimulation<'_> {
    /// Advances `state` (any whole number of copies of `mu`) from `0` to
    /// `t_end`. `observe(k, t, state)` runs after step `k` (1-based).
    pub fn run(&self, state: &mut [f64], mu: &[f64], rng: &mut Rng, mut observe: impl FnMut(usize, f64, &[f64])) {
        assert!(!mu.is_empty() && state.len().is_multiple_of(mu.len()));
        let dt = self.t_end / self.steps as f64;
        let sigma2 = self.process.sigma2;
        for k in 0..self.steps {
            let t = k as f64 * dt;
            let beta = self.process.schedule.beta(t);
            let decay = 0.5 * beta * dt * self.drift_scale;
            let diff = (beta * sigma2 * dt).sqrt();
            for (i, x) in state.iter_mut().enumerate() {
                let m = mu[i % mu.len()];
                *x += -decay * (*x - m) + diff * standard_normal(rng);
            }
            observe(k + 1, (k + 1) as f64 * dt, state);
        }
    }
}
