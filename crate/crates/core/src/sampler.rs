//! Sampling `x ~ p(x | y)` by integrating from `t = T` down to `t_end`.
//!
//! The probability-flow ODE is
//!
//! ```text
//! dx/dt = -½ β(t) (x - μ(y)) - ½ β(t) σ² s(x, y, t)
//! ```
//!
//! started from `x(T) ~ N(μ(y), σ²I)`. The reverse SDE uses the drift
//! `-½ β (x - μ) - β σ² s` and diffusion `sqrt(β σ²)`. No clamping or final
//! denoising is applied; the state at `t_end` is the sample.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use crate::model::{ModelError, ScoreFn};
use crate::process::{Condition, ConditionalForwardProcess, T_MIN};
use crate::rng::{normal_tensor, rng, standard_normal, Rng};
use crate::solver::{dopri5, rk4, DynError, SolveError, SolverStats, Tolerance};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum SampleError {
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid sampler config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMethod {
    AdaptiveRk,
    Rk4Fixed,
    ReverseSde,
}

impl SamplerMethod {
    pub fn name(&self) -> &'static str {
        match self {
            SamplerMethod::AdaptiveRk => "adaptive-rk",
            SamplerMethod::Rk4Fixed => "rk4-fixed",
            SamplerMethod::ReverseSde => "reverse-sde",
        }
    }
}

impl std::str::FromStr for SamplerMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adaptive-rk" => Ok(Self::AdaptiveRk),
            "rk4-fixed" => Ok(Self::Rk4Fixed),
            "reverse-sde" => Ok(Self::ReverseSde),
            _ => Err(format!("unknown sampler method {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub method: SamplerMethod,
    pub atol: f64,
    pub rtol: f64,
    /// Step count for the fixed-step methods.
    pub steps: usize,
    pub t_end: f64,
    /// Scale of the initial noise: `x(T) = μ + temperature σ ξ`. `1` samples
    /// the model's law; `0` starts every trajectory at `μ`.
    pub temperature: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            method: SamplerMethod::AdaptiveRk,
            atol: 1e-4,
            rtol: 1e-4,
            steps: 1000,
            t_end: T_MIN,
            temperature: 1.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, horizon: f64) -> Result<(), SampleError> {
        if !(self.atol > 0.0 && self.rtol > 0.0) {
            return Err(SampleError::Config("atol and rtol must be positive".into()));
        }
        if self.steps == 0 {
            return Err(SampleError::Config("steps must be at least 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(SampleError::Config(format!(
                "temperature {} must be finite and >= 0",
                self.temperature
            )));
        }
        if !(self.t_end >= 0.0 && self.t_end < horizon) {
            return Err(SampleError::Config(format!(
                "t_end {} outside [0, {horizon})",
                self.t_end
            )));
        }
        Ok(())
    }

    pub fn tolerance(&self) -> Tolerance {
        Tolerance {
            atol: self.atol,
            rtol: self.rtol,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    pub image: Tensor,
    /// Score evaluations.
    pub nfe: usize,
    pub stats: SolverStats,
    /// Seconds.
    pub wall_time: f64,
}

/// Counts score evaluations made through it.
pub struct CountingScore<'a> {
    inner: &'a dyn ScoreFn,
    count: AtomicUsize,
}

impl<'a> CountingScore<'a> {
    pub fn new(inner: &'a dyn ScoreFn) -> Self {
        Self {
            inner,
            count: AtomicUsize::new(0),
        }
    }

    pub fn count(&self) -> usize {
        self.count.load(Ordering::Relaxed)
    }
}

impl ScoreFn for CountingScore<'_> {
    fn score(&self, x: &Tensor, cond: &Condition, t: f64) -> Result<Tensor, ModelError> {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.score(x, cond, t)
    }
}

/// `x(T) = μ(y) + σ ξ`; consumes the first draws of `rng`.
pub fn initial_state(process: &ConditionalForwardProcess, cond: &Condition, rng: &mut Rng) -> Tensor {
    tempered_initial_state(process, cond, rng, 1.0)
}

/// `x(T) = μ(y) + temperature σ ξ`; draws `ξ` even at temperature 0 so the
/// stream position does not depend on it.
pub fn tempered_initial_state(
    process: &ConditionalForwardProcess,
    cond: &Condition,
    rng: &mut Rng,
    temperature: f64,
) -> Tensor {
    let noise = normal_tensor(rng, cond.mu.shape());
    cond.mu
        .axpy(temperature * process.sigma2().sqrt(), &noise)
        .expect("same shape")
}

/// Probability-flow drift `-½ β (x - μ) - ½ β σ² s` written into `out`.
pub fn pf_drift(
    process: &ConditionalForwardProcess,
    score: &dyn ScoreFn,
    cond: &Condition,
    t: f64,
    x: &[f64],
    out: &mut [f64],
) -> Result<(), ModelError> {
    let xt = Tensor::new(cond.mu.shape(), x.to_vec())?;
    let s = score.score(&xt, cond, t)?;
    let beta = process.schedule.beta(t);
    let k = 0.5 * beta * process.sigma2();
    for (((o, &xi), &m), &si) in out.iter_mut().zip(x).zip(cond.mu.data()).zip(s.data()) {
        *o = -0.5 * beta * (xi - m) - k * si;
    }
    Ok(())
}

/// Integrates the probability-flow ODE from `T` to `cfg.t_end` starting at
/// `x`, with the adaptive or the fixed-step solver according to `cfg`.
pub fn solve_probability_flow(
    process: &ConditionalForwardProcess,
    score: &dyn ScoreFn,
    cond: &Condition,
    x: &mut [f64],
    cfg: &SamplerConfig,
) -> Result<SolverStats, SampleError> {
    cfg.validate(process.horizon())?;
    let f = |t: f64, x: &[f64], dx: &mut [f64]| -> Result<(), DynError> {
        pf_drift(process, score, cond, t, x, dx).map_err(Into::into)
    };
    let horizon = process.horizon();
    Ok(match cfg.method {
        SamplerMethod::AdaptiveRk => dopri5(f, x, horizon, cfg.t_end, cfg.tolerance())?,
        SamplerMethod::Rk4Fixed => rk4(f, x, horizon, cfg.t_end, cfg.steps)?,
        SamplerMethod::ReverseSde => return Err(SampleError::Config("reverse-sde is not an ODE method".into())),
    })
}

fn finish(
    image: Vec<f64>,
    cond: &Condition,
    nfe: usize,
    stats: SolverStats,
    start: Instant,
) -> Result<SampleResult, SampleError> {
    let image = Tensor::new(cond.mu.shape(), image).map_err(ModelError::from)?;
    if !image.all_finite() {
        return Err(SolveError::NonFinite { t: 0.0 }.into());
    }
    Ok(SampleResult {
        image,
        nfe,
        stats,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Adaptive probability-flow sample; `cfg.method` is ignored.
pub fn probability_flow_sample(
    process: &ConditionalForwardProcess,
    score: &dyn ScoreFn,
    cond: &Condition,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<SampleResult, SampleError> {
    let cfg = SamplerConfig {
        method: SamplerMethod::AdaptiveRk,
        ..*cfg
    };
    ode_sample(process, score, cond, &cfg, seed)
}

/// Fixed-step RK4 probability-flow sample with the same initial draw as
/// [`probability_flow_sample`] for equal seeds.
pub fn rk4_fixed_sample(
    process: &ConditionalForwardProcess,
    score: &dyn ScoreFn,
    cond: &Condition,
    steps: usize,
    t_end: f64,
    seed: u64,
) -> Result<SampleResult, SampleError> {
    let cfg = SamplerConfig {
        method: SamplerMethod::Rk4Fixed,
        steps,
        t_end,
        ..SamplerConfig::default()
    };
    ode_sample(process, score, cond, &cfg, seed)
}

fn ode_sample(
    process: &ConditionalForwardProcess,
    score: &dyn ScoreFn,
    cond: &Condition,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<SampleResult, SampleError> {
    let start = Instant::now();
    let counted = CountingScore::new(score);
    let mut x = tempered_initial_state(process, cond, &mut rng(seed), cfg.temperature).into_data();
    let stats = solve_probability_flow(process, &counted, cond, &mut x, cfg)?;
    finish(x, cond, counted.count(), stats, start)
}

/// Euler–Maruyama on the reverse SDE with `steps` uniform steps.
pub fn reverse_sde_sample(
    process: &ConditionalForwardProcess,
    score: &dyn ScoreFn,
    cond: &Condition,
    steps: usize,
    t_end: f64,
    seed: u64,
) -> Result<SampleResult, SampleError> {
    let cfg = SamplerConfig {
        method: SamplerMethod::ReverseSde,
        steps,
        t_end,
        ..SamplerConfig::default()
    };
    sde_sample(process, score, cond, &cfg, seed)
}

fn sde_sample(
    process: &ConditionalForwardProcess,
    score: &dyn ScoreFn,
    cond: &Condition,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<SampleResult, SampleError> {
    cfg.validate(process.horizon())?;
    let (steps, t_end) = (cfg.steps, cfg.t_end);
    let start = Instant::now();
    let mut r = rng(seed);
    let mut x = tempered_initial_state(process, cond, &mut r, cfg.temperature);
    let h = (process.horizon() - t_end) / steps as f64;
    let sigma2 = process.sigma2();
    let mut nfe = 0;
    for k in 0..steps {
        let t = process.horizon() - k as f64 * h;
        let s = score.score(&x, cond, t)?;
        nfe += 1;
        let beta = process.schedule.beta(t);
        let g = (beta * sigma2 * h).sqrt();
        let data = x.data_mut();
        for (i, xi) in data.iter_mut().enumerate() {
            let m = cond.mu.data()[i];
            *xi += (0.5 * beta * (*xi - m) + beta * sigma2 * s.data()[i]) * h + g * standard_normal(&mut r);
        }
    }
    let stats = SolverStats {
        accepted: steps,
        rejected: 0,
        nfe,
    };
    finish(x.into_data(), cond, nfe, stats, start)
}

/// Dispatches on `cfg.method`.
pub fn sample(
    process: &ConditionalForwardProcess,
    score: &dyn ScoreFn,
    cond: &Condition,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<SampleResult, SampleError> {
    match cfg.method {
        SamplerMethod::AdaptiveRk | SamplerMethod::Rk4Fixed => ode_sample(process, score, cond, cfg, seed),
        SamplerMethod::ReverseSde => sde_sample(process, score, cond, cfg, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AnalyticGaussianScore, ZeroScore};
    use crate::process::BetaSchedule;

    fn toy(sigma2: f64) -> (ConditionalForwardProcess, Condition) {
        let p = ConditionalForwardProcess::new(BetaSchedule::default(), sigma2, 2).unwrap();
        let lr = Tensor::from_fn(&[1, 2, 2], |i| 0.3 + 0.1 * i as f64);
        let c = p.condition(&lr).unwrap();
        (p, c)
    }

    #[test]
    fn tiny_variance_with_zero_score_collapses_to_mean() {
        // the zero-score flow expands x - μ by exp(½∫β) ≈ 150 on the way down
        let (p, c) = toy(1e-30);
        let r = probability_flow_sample(&p, &ZeroScore, &c, &SamplerConfig::default(), 3).unwrap();
        assert!(r.image.max_abs_diff(&c.mu) < 1e-9);
        assert!(r.nfe >= 1);
    }

    #[test]
    fn same_seed_same_image() {
        let (p, c) = toy(0.04);
        let s = AnalyticGaussianScore { process: &p };
        let cfg = SamplerConfig::default();
        let a = probability_flow_sample(&p, &s, &c, &cfg, 11).unwrap();
        let b = probability_flow_sample(&p, &s, &c, &cfg, 11).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.nfe, b.nfe);
        let d = probability_flow_sample(&p, &s, &c, &cfg, 12).unwrap();
        assert_ne!(a.image, d.image);
        let e = reverse_sde_sample(&p, &s, &c, 100, T_MIN, 5).unwrap();
        assert_eq!(e.image, reverse_sde_sample(&p, &s, &c, 100, T_MIN, 5).unwrap().image);
    }

    #[test]
    fn zero_drift_keeps_initial_draw() {
        // with the Gaussian score the probability-flow drift vanishes identically
        let (p, c) = toy(0.04);
        let s = AnalyticGaussianScore { process: &p };
        let r = rk4_fixed_sample(&p, &s, &c, 10, T_MIN, 4).unwrap();
        let x_t = initial_state(&p, &c, &mut rng(4));
        assert!(r.image.max_abs_diff(&x_t) < 1e-15);
        assert_eq!(r.nfe, 40);
    }

    #[test]
    fn nfe_matches_invocations() {
        let (p, c) = toy(0.04);
        let s = AnalyticGaussianScore { process: &p };
        let counter = CountingScore::new(&s);
        let r = reverse_sde_sample(&p, &counter, &c, 150, T_MIN, 1).unwrap();
        assert_eq!(r.nfe, 150);
        assert_eq!(counter.count(), 150);
        let counter = CountingScore::new(&s);
        let r = probability_flow_sample(&p, &counter, &c, &SamplerConfig::default(), 1).unwrap();
        assert_eq!(r.nfe, counter.count());
        assert_eq!(r.nfe, r.stats.nfe);
    }

    /// A Gaussian score with the wrong variance, so the flow is not trivial.
    struct Misscaled<'a>(AnalyticGaussianScore<'a>);

    impl ScoreFn for Misscaled<'_> {
        fn score(&self, x: &Tensor, cond: &Condition, t: f64) -> Result<Tensor, ModelError> {
            Ok(self.0.score(x, cond, t)?.scale(0.7))
        }
    }

    #[test]
    fn rk4_and_adaptive_agree_on_nontrivial_flow() {
        let (p, c) = toy(0.04);
        let s = Misscaled(AnalyticGaussianScore { process: &p });
        let a = probability_flow_sample(&p, &s, &c, &SamplerConfig::default(), 2).unwrap();
        let b = rk4_fixed_sample(&p, &s, &c, 1000, T_MIN, 2).unwrap();
        let x_t = initial_state(&p, &c, &mut rng(2));
        assert!(b.image.max_abs_diff(&x_t) > 0.1);
        assert!(a.image.max_abs_diff(&b.image) < 1e-3);
        assert!(a.nfe < b.nfe);
    }

    #[test]
    fn single_step_reverse_sde_is_finite() {
        let (p, c) = toy(0.04);
        let s = AnalyticGaussianScore { process: &p };
        let r = reverse_sde_sample(&p, &s, &c, 1, T_MIN, 0).unwrap();
        assert!(r.image.all_finite());
    }

    #[test]
    fn zero_temperature_starts_at_the_mean() {
        let (p, c) = toy(0.04);
        let cfg = SamplerConfig {
            temperature: 0.0,
            ..SamplerConfig::default()
        };
        // zero score: the flow only contracts toward μ, so μ is a fixed point
        let r = sample(&p, &ZeroScore, &c, &cfg, 5).unwrap();
        assert!(r.image.max_abs_diff(&c.mu) < 1e-12);
        let a = sample(&p, &ZeroScore, &c, &SamplerConfig::default(), 5).unwrap();
        let b = sample(
            &p,
            &ZeroScore,
            &c,
            &SamplerConfig {
                temperature: 1.0,
                ..cfg
            },
            5,
        )
        .unwrap();
        assert_eq!(a.image, b.image);
    }

    #[test]
    fn config_validation() {
        let (p, c) = toy(0.04);
        let bad = SamplerConfig {
            atol: 0.0,
            ..SamplerConfig::default()
        };
        assert!(sample(&p, &ZeroScore, &c, &bad, 0).is_err());
        let bad = SamplerConfig {
            t_end: 1.0,
            ..SamplerConfig::default()
        };
        assert!(sample(&p, &ZeroScore, &c, &bad, 0).is_err());
        let bad = SamplerConfig {
            temperature: -0.5,
            ..SamplerConfig::default()
        };
        assert!(sample(&p, &ZeroScore, &c, &bad, 0).is_err());
        assert_eq!("rk4-fixed".parse::<SamplerMethod>().unwrap(), SamplerMethod::Rk4Fixed);
        assert!("euler".parse::<SamplerMethod>().is_err());
    }
}
