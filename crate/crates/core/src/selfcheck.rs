//! Executable oracle checks: forward moment preservation, transition law,
//! Gaussian sampler recovery, adjoint gradients and RK4 convergence order.
//!
//! Each check is deterministic for a given seed and reports a one-line
//! detail alongside pass/fail.

use std::time::Instant;

use crate::adjoint::{adjoint_gradients, integrate, unrolled_gradients, AdjointSolver, ProbabilityFlow};
use crate::model::{
    AnalyticGaussianScore, HybridConfig, ModelConfig, ModelError, ModelScore, Parametrization, ScoreFn, ScoreNetwork,
};
use crate::process::{BetaSchedule, Condition, ConditionalForwardProcess, ForwardSimulation};
use crate::rng::{derive_seed, normal_tensor, rng, standard_normal};
use crate::sampler::{
    initial_state, probability_flow_sample, reverse_sde_sample, solve_probability_flow, SamplerConfig, SamplerMethod,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "{} {}: {} ({:.1} s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SelfcheckOptions {
    /// Fewer paths and seeds; tolerances widen with the standard errors.
    pub quick: bool,
    /// Flips the sign of the forward drift in the moment check, which must
    /// then fail.
    pub corrupt_drift_sign: bool,
    pub seed: u64,
}

/// Runs every check in order.
pub fn run(opts: SelfcheckOptions) -> Vec<CheckOutcome> {
    let q = opts.quick;
    let drift = if opts.corrupt_drift_sign { -1.0 } else { 1.0 };
    // per-pixel variance bounds; the quick bound is about 4.5 standard errors at 2000 paths
    let var_tol = if q { 0.15 } else { 0.05 };
    vec![
        moments_check(
            if q { 2_000 } else { 10_000 },
            if q { 250 } else { 1000 },
            var_tol,
            drift,
            opts.seed,
        ),
        transition_check(
            if q { 2_000 } else { 10_000 },
            if q { 250 } else { 1000 },
            var_tol,
            opts.seed,
        ),
        gaussian_sampling_check(if q { 500 } else { 2000 }, if q { 200 } else { 1000 }, 0.10, opts.seed),
        adjoint_check(if q { 2 } else { 5 }, opts.seed),
        convergence_order_check(opts.seed),
    ]
}

fn timed(name: &'static str, f: impl FnOnce() -> (bool, String)) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = f();
    CheckOutcome {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// 8×8 single-channel condition: μ is the bicubic upscale of a random 4×4 LR.
fn small_condition(process: &ConditionalForwardProcess, seed: u64) -> Condition {
    let mut r = rng(seed);
    let lr = Tensor::from_fn(&[1, 4, 4], |_| 0.5 + 0.2 * standard_normal(&mut r));
    process.condition(&lr).expect("valid low-resolution shape")
}

/// Per-coordinate mean and unbiased variance of `paths` interleaved copies.
fn column_moments(state: &[f64], width: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (state.len() / width) as f64;
    let mut mean = vec![0.0; width];
    for (i, v) in state.iter().enumerate() {
        mean[i % width] += v;
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; width];
    for (i, v) in state.iter().enumerate() {
        var[i % width] += (v - mean[i % width]).powi(2);
    }
    var.iter_mut().for_each(|s| *s /= n - 1.0);
    (mean, var)
}

/// Largest mean gap in standard errors and largest relative variance error.
fn moment_errors(mean: &[f64], var: &[f64], mu: &[f64], target_var: f64, n: f64) -> (f64, f64) {
    let se = (target_var / n).sqrt();
    let z = mean.iter().zip(mu).map(|(m, t)| (m - t).abs() / se).fold(0.0, f64::max);
    let rel = var.iter().map(|v| (v / target_var - 1.0).abs()).fold(0.0, f64::max);
    (z, rel)
}

/// Euler–Maruyama from a two-point law with mean μ and variance σ²: the mean
/// and variance must stay at μ and σ² at `T/4`, `T/2` and `T`: mean within
/// 4 SE and variance within `var_tol` relative, per pixel.
pub fn moments_check(paths: usize, steps: usize, var_tol: f64, drift_scale: f64, seed: u64) -> CheckOutcome {
    timed("forward-moments", || {
        let sigma2 = 0.04;
        let process = ConditionalForwardProcess::new(BetaSchedule::default(), sigma2, 2).expect("valid");
        let cond = small_condition(&process, derive_seed(seed, 1));
        let mu = cond.mu.data();
        let mut r = rng(derive_seed(seed, 2));
        let sd = sigma2.sqrt();
        let mut state: Vec<f64> = (0..paths * mu.len())
            .map(|i| mu[i % mu.len()] + if standard_normal(&mut r) < 0.0 { -sd } else { sd })
            .collect();
        let sim = ForwardSimulation {
            process: &process,
            t_end: process.horizon(),
            steps,
            drift_scale,
        };
        let checkpoints = [steps / 4, steps / 2, steps];
        let (mut worst_z, mut worst_rel) = (0.0f64, 0.0f64);
        sim.run(&mut state, mu, &mut r, |k, _, s| {
            if checkpoints.contains(&k) {
                let (m, v) = column_moments(s, mu.len());
                let (z, rel) = moment_errors(&m, &v, mu, sigma2, paths as f64);
                worst_z = worst_z.max(z);
                worst_rel = worst_rel.max(rel);
            }
        });
        let passed = worst_z < 4.0 && worst_rel < var_tol;
        (
            passed,
            format!(
                "{paths} paths, {steps} steps: max mean gap {worst_z:.2} SE, max variance error {:.2}%",
                100.0 * worst_rel
            ),
        )
    })
}

/// Euler–Maruyama from a fixed `x0 ≠ μ` against the closed-form transition
/// law at `t = 0.5`: mean within 4 SE, variance ratio within `1 ± var_tol`.
pub fn transition_check(paths: usize, steps: usize, var_tol: f64, seed: u64) -> CheckOutcome {
    timed("transition-law", || {
        let process = ConditionalForwardProcess::new(BetaSchedule::default(), 0.04, 2).expect("valid");
        let cond = small_condition(&process, derive_seed(seed, 3));
        let mut r = rng(derive_seed(seed, 4));
        let offsets = normal_tensor(&mut r, cond.mu.shape());
        let x0 = cond.mu.axpy(0.3, &offsets).expect("same shape");
        let t = 0.5;
        let stats = process.transition_stats(&x0, &cond, t).expect("t in range");
        let mut state: Vec<f64> = x0.data().iter().copied().cycle().take(paths * x0.len()).collect();
        let sim = ForwardSimulation {
            process: &process,
            t_end: t,
            steps,
            drift_scale: 1.0,
        };
        sim.run(&mut state, cond.mu.data(), &mut r, |_, _, _| {});
        let (m, v) = column_moments(&state, x0.len());
        let (z, _) = moment_errors(&m, &v, stats.mu_hat.data(), stats.sigma_hat2, paths as f64);
        let ratios = v.iter().map(|v| v / stats.sigma_hat2);
        let (lo, hi) = ratios.fold((f64::INFINITY, 0.0f64), |(lo, hi), q| (lo.min(q), hi.max(q)));
        let passed = z < 4.0 && lo >= 1.0 - var_tol && hi <= 1.0 + var_tol;
        (
            passed,
            format!("{paths} paths at t = {t}: max mean gap {z:.2} SE, variance ratio in [{lo:.4}, {hi:.4}]"),
        )
    })
}

/// Score of `N(μ, v)` data under the forward process: the marginal at `t`
/// is `N(μ, α v + (1 - α) σ²)`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianLawScore<'a> {
    pub process: &'a ConditionalForwardProcess,
    pub data_var: f64,
}

impl ScoreFn for GaussianLawScore<'_> {
    fn score(&self, x: &Tensor, cond: &Condition, t: f64) -> Result<Tensor, ModelError> {
        let alpha = self.process.alpha(t)?;
        let var = alpha * self.data_var + self.process.sigma_hat2(t)?;
        Ok(x.zip_map(&cond.mu, |x, m| -(x - m) / var)?)
    }
}

/// Pooled mean gap (max over pixels, in SE) and pooled relative variance
/// error of a set of samples drawn around `mu`.
fn sample_errors(samples: &[Tensor], mu: &Tensor, target_var: f64) -> (f64, f64) {
    let flat: Vec<f64> = samples.iter().flat_map(|s| s.data().iter().copied()).collect();
    let (mean, _) = column_moments(&flat, mu.len());
    let se = (target_var / samples.len() as f64).sqrt();
    let z = mean
        .iter()
        .zip(mu.data())
        .map(|(m, t)| (m - t).abs() / se)
        .fold(0.0, f64::max);
    let pooled = flat
        .iter()
        .enumerate()
        .map(|(i, v)| (v - mean[i % mu.len()]).powi(2))
        .sum::<f64>()
        / (flat.len() as f64 - mu.len() as f64);
    (z, (pooled / target_var - 1.0).abs())
}

/// Probability-flow and reverse-SDE sampling with exact Gaussian scores must
/// reproduce the Gaussian law: mean within 4 SE per pixel, pooled variance
/// within `var_tol` relative.
pub fn gaussian_sampling_check(samples: usize, sde_steps: usize, var_tol: f64, seed: u64) -> CheckOutcome {
    timed("gaussian-sampling", || {
        let sigma2 = 0.04;
        let process = ConditionalForwardProcess::new(BetaSchedule::default(), sigma2, 2).expect("valid");
        let cond = small_condition(&process, derive_seed(seed, 5));
        let stationary = AnalyticGaussianScore { process: &process };
        // data variance below σ²: the flow has to contract, so the solver is exercised
        let narrow = GaussianLawScore {
            process: &process,
            data_var: sigma2 / 4.0,
        };
        let cfg = SamplerConfig::default();
        let base = derive_seed(seed, 6);
        let draw = |f: &dyn Fn(u64) -> Tensor| -> Vec<Tensor> {
            (0..samples as u64).map(|i| f(derive_seed(base, i))).collect()
        };
        let runs: [(&str, Vec<Tensor>, f64); 3] = [
            (
                "flow",
                draw(&|s| {
                    probability_flow_sample(&process, &stationary, &cond, &cfg, s)
                        .expect("finite")
                        .image
                }),
                sigma2,
            ),
            (
                "sde",
                draw(&|s| {
                    reverse_sde_sample(&process, &stationary, &cond, sde_steps, cfg.t_end, s)
                        .expect("finite")
                        .image
                }),
                sigma2,
            ),
            (
                "flow-narrow",
                draw(&|s| {
                    probability_flow_sample(&process, &narrow, &cond, &cfg, s)
                        .expect("finite")
                        .image
                }),
                // the marginal the flow should land on at t_end
                narrow.data_var * process.alpha(cfg.t_end).expect("in range")
                    + process.sigma_hat2(cfg.t_end).expect("in range"),
            ),
        ];
        let mut passed = true;
        let mut parts = Vec::new();
        for (name, xs, var) in &runs {
            let (z, rel) = sample_errors(xs, &cond.mu, *var);
            passed &= z < 4.0 && rel < var_tol;
            parts.push(format!("{name} {z:.2} SE / {:.1}%", 100.0 * rel));
        }
        (passed, format!("{samples} samples: {}", parts.join(", ")))
    })
}

/// A ~1350-parameter network, a condition, a start state and a cotangent.
pub struct TinyFlowCase {
    pub process: ConditionalForwardProcess,
    pub net: ScoreNetwork,
    pub cond: Condition,
    pub x_start: Tensor,
    pub cotangent: Tensor,
    pub param: Parametrization,
}

impl TinyFlowCase {
    pub fn new(seed: u64) -> Self {
        let process = ConditionalForwardProcess::new(BetaSchedule::default(), 0.04, 2).expect("valid");
        let net = ScoreNetwork::new(ModelConfig::tiny(1, 2), seed).expect("valid config");
        let cond = small_condition(&process, derive_seed(seed, 7));
        let mut r = rng(derive_seed(seed, 8));
        let x_start = initial_state(&process, &cond, &mut r);
        let cotangent = normal_tensor(&mut r, cond.mu.shape());
        Self {
            process,
            net,
            cond,
            x_start,
            cotangent,
            param: Parametrization::Hybrid(HybridConfig::DEFAULT),
        }
    }

    pub fn flow(&self) -> ProbabilityFlow<'_> {
        ProbabilityFlow {
            score: self.score(),
            cond: &self.cond,
        }
    }

    pub fn score(&self) -> ModelScore<'_> {
        ModelScore {
            net: &self.net,
            process: &self.process,
            param: self.param,
        }
    }
}

/// End of the integration interval for gradient checks; 20 RK4 steps do not
/// resolve the flow much closer to 0.
pub const ADJOINT_T_END: f64 = 0.01;
pub const ADJOINT_STEPS: usize = 20;

/// Worst `|adjoint - unrolled| / (1e-3 |unrolled| + 1e-6)` over parameters and
/// the initial-state gradient; `<= 1` passes.
pub fn adjoint_mismatch(flow: &ProbabilityFlow<'_>, x_start: &Tensor, cotangent: &Tensor) -> Result<f64, String> {
    let rk = AdjointSolver::Rk4 { steps: ADJOINT_STEPS };
    let horizon = flow.score.process.horizon();
    let (x_final, _) = integrate(flow, x_start, horizon, ADJOINT_T_END, rk).map_err(|e| e.to_string())?;
    let adj = adjoint_gradients(flow, &x_final, horizon, ADJOINT_T_END, cotangent, rk).map_err(|e| e.to_string())?;
    let (unrolled, gx) = unrolled_gradients(flow, x_start, horizon, ADJOINT_T_END, ADJOINT_STEPS, cotangent)
        .map_err(|e| e.to_string())?;
    let pairs = adj
        .dl_dparams
        .iter()
        .zip(&unrolled)
        .chain(std::iter::once((&adj.dl_dx_init, &gx)));
    let mut worst = 0.0f64;
    for (a, u) in pairs {
        for (x, y) in a.data().iter().zip(u.data()) {
            worst = worst.max((x - y).abs() / (1e-3 * y.abs() + 1e-6));
        }
    }
    Ok(worst)
}

/// Relative error of the adjoint directional derivative against a central
/// difference of the loss `⟨w, x(t_end)⟩` along a random parameter direction.
pub fn adjoint_fd_error(case: &TinyFlowCase, seed: u64) -> Result<f64, String> {
    let rk = AdjointSolver::Rk4 { steps: ADJOINT_STEPS };
    let horizon = case.process.horizon();
    let flow = case.flow();
    let (x_final, _) = integrate(&flow, &case.x_start, horizon, ADJOINT_T_END, rk).map_err(|e| e.to_string())?;
    let adj =
        adjoint_gradients(&flow, &x_final, horizon, ADJOINT_T_END, &case.cotangent, rk).map_err(|e| e.to_string())?;
    let mut r = rng(seed);
    let dir: Vec<f64> = (0..case.net.param_count()).map(|_| standard_normal(&mut r)).collect();
    let analytic: f64 = adj
        .dl_dparams
        .iter()
        .flat_map(|g| g.data().iter().copied())
        .zip(&dir)
        .map(|(g, v)| g * v)
        .sum();
    let base = case.net.flat_params();
    let loss_at = |k: f64| -> Result<f64, String> {
        let flat: Vec<f64> = base.iter().zip(&dir).map(|(p, v)| p + k * v).collect();
        let net = ScoreNetwork::from_flat(*case.net.config(), &flat).map_err(|e| e.to_string())?;
        let flow = ProbabilityFlow {
            score: ModelScore {
                net: &net,
                process: &case.process,
                param: case.param,
            },
            cond: &case.cond,
        };
        let (x, _) = integrate(&flow, &case.x_start, horizon, ADJOINT_T_END, rk).map_err(|e| e.to_string())?;
        Ok(x.data().iter().zip(case.cotangent.data()).map(|(a, b)| a * b).sum())
    };
    let h = 1e-4;
    let fd = (loss_at(h)? - loss_at(-h)?) / (2.0 * h);
    Ok((analytic - fd).abs() / fd.abs().max(1e-12))
}

/// Adjoint vs. unrolled RK4 on `seeds` tiny networks plus one finite-difference
/// directional check.
pub fn adjoint_check(seeds: u64, seed: u64) -> CheckOutcome {
    timed("adjoint-gradients", || {
        let mut worst = 0.0f64;
        for i in 0..seeds {
            let case = TinyFlowCase::new(derive_seed(seed, 100 + i));
            match adjoint_mismatch(&case.flow(), &case.x_start, &case.cotangent) {
                Ok(m) => worst = worst.max(m),
                Err(e) => return (false, format!("seed {i}: {e}")),
            }
        }
        let fd = match adjoint_fd_error(&TinyFlowCase::new(derive_seed(seed, 99)), derive_seed(seed, 98)) {
            Ok(e) => e,
            Err(e) => return (false, e),
        };
        (
            worst <= 1.0 && fd < 1e-3,
            format!("{seeds} seeds: worst mismatch {worst:.3} of tolerance, finite-difference error {fd:.2e}"),
        )
    })
}

/// Observed orders `log2(e(n) / e(2n))` of fixed-step RK4 on the probability
/// flow, with errors measured against a run at `reference` steps.
pub fn rk4_orders(
    process: &ConditionalForwardProcess,
    score: &dyn ScoreFn,
    cond: &Condition,
    x_start: &Tensor,
    t_end: f64,
    steps: &[usize],
    reference: usize,
) -> Result<(Vec<f64>, Vec<f64>), String> {
    let run = |n: usize| -> Result<Vec<f64>, String> {
        let mut x = x_start.data().to_vec();
        let cfg = SamplerConfig {
            method: SamplerMethod::Rk4Fixed,
            steps: n,
            t_end,
            ..SamplerConfig::default()
        };
        solve_probability_flow(process, score, cond, &mut x, &cfg).map_err(|e| e.to_string())?;
        Ok(x)
    };
    let exact = run(reference)?;
    let mut errors = Vec::with_capacity(steps.len());
    for &n in steps {
        let x = run(n)?;
        errors.push(x.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    let orders = errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    Ok((errors, orders))
}

/// Steps for the order check, doubling; the interval ends at 0.05 where the
/// flow is smooth enough for the asymptotic regime to be visible.
pub const ORDER_STEPS: [usize; 4] = [10, 20, 40, 80];
pub const ORDER_T_END: f64 = 0.05;

/// RK4 convergence order on a tiny-network probability flow; the finest
/// observed order must lie in `4 ± 0.5`.
pub fn convergence_order_check(seed: u64) -> CheckOutcome {
    timed("rk4-order", || {
        let case = TinyFlowCase::new(derive_seed(seed, 200));
        let score = case.score();
        match rk4_orders(
            &case.process,
            &score,
            &case.cond,
            &case.x_start,
            ORDER_T_END,
            &ORDER_STEPS,
            2560,
        ) {
            Ok((errors, orders)) => {
                let last = *orders.last().expect("at least two step counts");
                let fmt = |v: &[f64], p: usize| v.iter().map(|x| format!("{x:.p$e}")).collect::<Vec<_>>().join(" ");
                (
                    (last - 4.0).abs() <= 0.5,
                    format!("errors {} orders {}", fmt(&errors, 2), fmt(&orders, 2)),
                )
            }
            Err(e) => (false, e),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_selfcheck_passes() {
        let out = run(SelfcheckOptions {
            quick: true,
            ..Default::default()
        });
        for o in &out {
            println!("{}", o.line());
        }
        assert!(out.iter().all(|o| o.passed));
    }

    #[test]
    #[ignore = "full path counts; run with --ignored"]
    fn full_selfcheck_passes() {
        let out = run(SelfcheckOptions::default());
        for o in &out {
            println!("{}", o.line());
        }
        assert!(out.iter().all(|o| o.passed));
    }

    #[test]
    fn corrupted_drift_fails_the_moment_check() {
        let o = moments_check(500, 100, 0.15, -1.0, 0);
        assert!(!o.passed, "{}", o.line());
    }

    #[test]
    fn gaussian_law_score_reduces_to_stationary_case() {
        let p = ConditionalForwardProcess::new(BetaSchedule::default(), 0.09, 2).unwrap();
        let c = small_condition(&p, 1);
        let x = c.mu.map(|m| m + 0.1);
        let a = GaussianLawScore {
            process: &p,
            data_var: 0.09,
        }
        .score(&x, &c, 0.4)
        .unwrap();
        let b = p.analytic_gaussian_score(&x, &c).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn column_moments_examples() {
        let (m, v) = column_moments(&[1.0, 10.0, 3.0, 10.0], 2);
        assert_eq!(m, vec![2.0, 10.0]);
        assert_eq!(v, vec![2.0, 0.0]);
    }
}
