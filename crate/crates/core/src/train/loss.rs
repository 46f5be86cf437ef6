//! Training objectives.
//!
//! The score-matching loss for a pair `(x, y)`, time `t` and noise `ε` is
//!
//! ```text
//! ‖ε_θ(x_t, y, t) - ε‖² + ‖x0_θ(x_t, y, t) - x‖²,   x_t = μ̂(x, y, t) + sqrt(σ̂²(t)) ε
//! ```
//!
//! where a term is dropped when its head does not feed the parametrization's
//! score. Norms are sums over pixels; batch losses are means over samples.

use rand::Rng as _;
use rayon::prelude::*;

use crate::adjoint::{adjoint_gradients, integrate, AdjointSolver, ProbabilityFlow};
use crate::image::{ImageError, SrSample};
use crate::model::{Heads, ModelScore, NetInput, Parametrization, ScoreFn, ScoreNetwork};
use crate::process::{Condition, ConditionalForwardProcess};
use crate::rng::{derive_seed, normal_tensor, rng};
use crate::sampler::{initial_state, probability_flow_sample, SamplerConfig};
use crate::tensor::{Tape, Tensor, Var};

use super::{FeatureExtractor, TrainError};

/// Lower bound applied to an estimated `σ²` before it parametrizes a process.
pub const SIGMA2_FLOOR: f64 = 1e-6;

/// A high-resolution target with its conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub hr: Tensor,
    pub cond: Condition,
}

pub fn prepare_pairs(process: &ConditionalForwardProcess, samples: &[SrSample]) -> Result<Vec<TrainPair>, TrainError> {
    samples
        .iter()
        .map(|s| {
            let cond = process.condition(&s.lr)?;
            if cond.mu.shape() != s.hr.shape() {
                return Err(TrainError::Config(format!(
                    "hr shape {:?} does not match upscaled lr {:?}",
                    s.hr.shape(),
                    cond.mu.shape()
                )));
            }
            Ok(TrainPair { hr: s.hr.clone(), cond })
        })
        .collect()
}

/// One `(t, ε)` draw for the score-matching loss.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub t: f64,
    pub eps: Tensor,
}

/// A loss value and its gradient, one tensor per network parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grads: Vec<Tensor>,
}

/// Pooled residual variance of `hr - μ(lr)` over every pixel of every sample.
pub fn estimate_sigma2<F>(samples: &[SrSample], mu_of_y: F) -> Result<f64, TrainError>
where
    F: Fn(&Tensor) -> Result<Tensor, ImageError>,
{
    let (mut n, mut sum, mut sum_sq) = (0usize, 0.0, 0.0);
    for s in samples {
        let r = s.hr.sub(&mu_of_y(&s.lr)?)?;
        n += r.len();
        sum += r.sum();
        sum_sq += r.norm_sq();
    }
    if n == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let mean = sum / n as f64;
    Ok((sum_sq / n as f64 - mean * mean).max(0.0))
}

/// The loss terms for given head values, without a tape.
pub fn head_loss(heads: &Heads, eps: &Tensor, x: &Tensor, param: Parametrization) -> Result<f64, TrainError> {
    let mut total = 0.0;
    if param.uses_eps() {
        total += heads.eps.sub(eps)?.norm_sq();
    }
    if param.uses_x0() {
        total += heads.x0.sub(x)?.norm_sq();
    }
    Ok(total)
}

fn sample_loss_var(
    tape: &mut Tape,
    net: &ScoreNetwork,
    params: &[Var],
    process: &ConditionalForwardProcess,
    param: Parametrization,
    pair: &TrainPair,
    draw: &NoiseDraw,
) -> Result<Var, TrainError> {
    let xt = process.sample_transition(&pair.hr, &pair.cond, draw.t, &draw.eps)?;
    let input = NetInput {
        x: tape.constant(xt),
        lr: tape.constant(pair.cond.lr.clone()),
        mu: tape.constant(pair.cond.mu.clone()),
        t: draw.t / process.horizon(),
        sigma: process.sigma2().sqrt(),
    };
    let heads = net.forward(tape, params, &input)?;
    let mut terms = Vec::with_capacity(2);
    if param.uses_eps() {
        let target = tape.constant(draw.eps.clone());
        let d = tape.sub(heads.eps, target)?;
        let sq = tape.square(d)?;
        terms.push(tape.sum(sq)?);
    }
    if param.uses_x0() {
        let target = tape.constant(pair.hr.clone());
        let d = tape.sub(heads.x0, target)?;
        let sq = tape.square(d)?;
        terms.push(tape.sum(sq)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

fn check_batch(batch: &[&TrainPair], n: usize) -> Result<(), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if batch.len() != n {
        return Err(TrainError::Config(format!(
            "{} pairs but {n} draws or seeds",
            batch.len()
        )));
    }
    Ok(())
}

/// Sums per-sample results in index order, so the result does not depend on
/// how rayon scheduled the work.
fn reduce_mean(parts: Vec<LossGrad>) -> LossGrad {
    let n = parts.len() as f64;
    let mut it = parts.into_iter();
    let mut acc = it.next().expect("non-empty batch");
    for p in it {
        acc.value += p.value;
        for (a, g) in acc.grads.iter_mut().zip(&p.grads) {
            *a = a.add(g).expect("same parameter shapes");
        }
    }
    acc.value /= n;
    for a in &mut acc.grads {
        *a = a.scale(1.0 / n);
    }
    acc
}

/// Batch score-matching loss and its parameter gradient.
pub fn score_matching_loss(
    net: &ScoreNetwork,
    process: &ConditionalForwardProcess,
    param: Parametrization,
    batch: &[&TrainPair],
    draws: &[NoiseDraw],
) -> Result<LossGrad, TrainError> {
    check_batch(batch, draws.len())?;
    let parts = batch
        .par_iter()
        .zip(draws)
        .map(|(pair, draw)| {
            let mut tape = Tape::new();
            let params = net.bind(&mut tape, true);
            let loss = sample_loss_var(&mut tape, net, &params, process, param, pair, draw)?;
            let value = tape.value(loss).item();
            let mut g = tape.backward(loss)?;
            let grads = params
                .iter()
                .zip(net.params())
                .map(|(&v, p)| g.take_or_zeros(v, p.shape()))
                .collect();
            Ok(LossGrad { value, grads })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(reduce_mean(parts))
}

/// Batch score-matching loss without gradients.
pub fn score_matching_loss_value(
    net: &ScoreNetwork,
    process: &ConditionalForwardProcess,
    param: Parametrization,
    batch: &[&TrainPair],
    draws: &[NoiseDraw],
) -> Result<f64, TrainError> {
    check_batch(batch, draws.len())?;
    let values = batch
        .par_iter()
        .zip(draws)
        .map(|(pair, draw)| {
            let xt = process.sample_transition(&pair.hr, &pair.cond, draw.t, &draw.eps)?;
            let score = ModelScore { net, process, param };
            let heads = score.heads(&xt, &pair.cond, draw.t)?;
            head_loss(&heads, &draw.eps, &pair.hr, param)
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// `per_pair` draws for every pair, with `t` stratified over `[t_min, T]`.
pub fn validation_draws(
    process: &ConditionalForwardProcess,
    pairs: &[TrainPair],
    per_pair: usize,
    t_min: f64,
    seed: u64,
) -> Vec<(usize, NoiseDraw)> {
    let span = process.horizon() - t_min;
    let mut out = Vec::with_capacity(pairs.len() * per_pair);
    for (i, pair) in pairs.iter().enumerate() {
        let mut r = rng(derive_seed(seed, i as u64));
        for k in 0..per_pair {
            let u = (k as f64 + r.gen::<f64>()) / per_pair as f64;
            let eps = normal_tensor(&mut r, pair.hr.shape());
            out.push((
                i,
                NoiseDraw {
                    t: t_min + span * u,
                    eps,
                },
            ));
        }
    }
    out
}

/// Mean of `‖sqrt(σ̂²) s_θ(x_t) + ε‖²` over the draws.
///
/// Unlike the training loss this compares scores, so it is comparable
/// across parametrizations: each one is judged on the score it produces.
pub fn validation_score_loss(
    net: &ScoreNetwork,
    process: &ConditionalForwardProcess,
    param: Parametrization,
    pairs: &[TrainPair],
    draws: &[(usize, NoiseDraw)],
) -> Result<f64, TrainError> {
    if draws.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let score = ModelScore { net, process, param };
    let values = draws
        .par_iter()
        .map(|(i, draw)| {
            let pair = &pairs[*i];
            let xt = process.sample_transition(&pair.hr, &pair.cond, draw.t, &draw.eps)?;
            let s = score.score(&xt, &pair.cond, draw.t)?;
            let sd = process.sigma_hat2(draw.t)?.sqrt();
            Ok(s.zip_map(&draw.eps, |s, e| sd * s + e)?.norm_sq())
        })
        .collect::<Result<Vec<f64>, TrainError>>()?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// `‖F(a) - F(b)‖₂`.
pub fn feature_distance(features: &FeatureExtractor, a: &Tensor, b: &Tensor) -> Result<f64, TrainError> {
    Ok(features.apply(a)?.sub(&features.apply(b)?)?.norm_sq().sqrt())
}

/// Quality loss for one pair: the sample `SR_θ(y)` is the probability-flow
/// solution from `x(T) = μ + σ ξ(seed)` and gradients come from the adjoint.
/// Also returns the number of drift evaluations.
#[allow(clippy::too_many_arguments)]
pub fn quality_loss_sample(
    net: &ScoreNetwork,
    process: &ConditionalForwardProcess,
    param: Parametrization,
    pair: &TrainPair,
    features: &FeatureExtractor,
    solver: AdjointSolver,
    t_end: f64,
    seed: u64,
) -> Result<(LossGrad, usize), TrainError> {
    let flow = ProbabilityFlow {
        score: ModelScore { net, process, param },
        cond: &pair.cond,
    };
    let x_start = initial_state(process, &pair.cond, &mut rng(seed));
    let (sr, fwd) = integrate(&flow, &x_start, process.horizon(), t_end, solver)?;

    let mut tape = Tape::new();
    let x = tape.leaf(sr.clone(), true);
    let fx = features.apply_var(&mut tape, x)?;
    let target = tape.constant(features.apply(&pair.hr)?);
    let d = tape.sub(fx, target)?;
    let sq = tape.square(d)?;
    let sq = tape.sum(sq)?;
    let norm = tape.value(sq).item().sqrt();
    if norm == 0.0 {
        let grads = net.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        return Ok((LossGrad { value: 0.0, grads }, fwd.nfe));
    }
    // d‖v‖ = d‖v‖² / (2‖v‖)
    let g_sq = tape.vjp(sq, &Tensor::scalar(1.0 / (2.0 * norm)), &[x])?;
    let adj = adjoint_gradients(&flow, &sr, process.horizon(), t_end, &g_sq[0], solver)?;
    Ok((
        LossGrad {
            value: norm,
            grads: adj.dl_dparams,
        },
        fwd.nfe + adj.stats.nfe,
    ))
}

/// Batch mean of [`quality_loss_sample`] with one seed per pair.
#[allow(clippy::too_many_arguments)]
pub fn quality_loss(
    net: &ScoreNetwork,
    process: &ConditionalForwardProcess,
    param: Parametrization,
    batch: &[&TrainPair],
    features: &FeatureExtractor,
    solver: AdjointSolver,
    t_end: f64,
    seeds: &[u64],
) -> Result<LossGrad, TrainError> {
    check_batch(batch, seeds.len())?;
    let parts = batch
        .par_iter()
        .zip(seeds)
        .map(|(pair, &seed)| {
            quality_loss_sample(net, process, param, pair, features, solver, t_end, seed).map(|(lg, _)| lg)
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(reduce_mean(parts))
}

/// Mean feature distance between probability-flow samples and targets; pair
/// `i` uses seed `derive_seed(seed, i)`.
pub fn validation_feature_distance(
    net: &ScoreNetwork,
    process: &ConditionalForwardProcess,
    param: Parametrization,
    pairs: &[TrainPair],
    features: &FeatureExtractor,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<f64, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let score = ModelScore { net, process, param };
    let values = pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let s = probability_flow_sample(process, &score, &pair.cond, sampler, derive_seed(seed, i as u64))?;
            feature_distance(features, &s.image, &pair.hr)
        })
        .collect::<Result<Vec<f64>, TrainError>>()?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{make_synthetic_dataset, upscale, DatasetKind};
    use crate::model::{HybridConfig, ModelConfig};
    use crate::process::BetaSchedule;
    use crate::rng::standard_normal;
    use crate::solver::Tolerance;

    fn toy_process(sigma2: f64) -> ConditionalForwardProcess {
        ConditionalForwardProcess::new(BetaSchedule::default(), sigma2, 2).unwrap()
    }

    fn toy_pairs(process: &ConditionalForwardProcess, n: usize, seed: u64) -> Vec<TrainPair> {
        let data = make_synthetic_dataset(DatasetKind::GaussianToy { sigma: 0.2 }, n, 8, 2, seed).unwrap();
        prepare_pairs(process, &data).unwrap()
    }

    fn draws(pairs: &[TrainPair], seed: u64) -> Vec<NoiseDraw> {
        let mut r = rng(seed);
        pairs
            .iter()
            .map(|p| NoiseDraw {
                t: r.gen_range(0.01..1.0),
                eps: normal_tensor(&mut r, p.hr.shape()),
            })
            .collect()
    }

    const HYBRID: Parametrization = Parametrization::Hybrid(HybridConfig::DEFAULT);

    #[test]
    fn oracle_heads_give_zero_loss() {
        let process = toy_process(0.04);
        let pairs = toy_pairs(&process, 3, 1);
        for (pair, draw) in pairs.iter().zip(draws(&pairs, 2)) {
            let heads = Heads {
                eps: draw.eps.clone(),
                x0: pair.hr.clone(),
            };
            assert_eq!(head_loss(&heads, &draw.eps, &pair.hr, HYBRID).unwrap(), 0.0);
        }
    }

    #[test]
    fn zero_heads_loss_is_chi_square_plus_data_norm() {
        let process = toy_process(0.04);
        let pairs = toy_pairs(&process, 400, 3);
        let draws = draws(&pairs, 4);
        let d = pairs[0].hr.len() as f64;
        let mut total = 0.0;
        let mut data_norm = 0.0;
        for (pair, draw) in pairs.iter().zip(&draws) {
            let zero = Heads {
                eps: Tensor::zeros(pair.hr.shape()),
                x0: Tensor::zeros(pair.hr.shape()),
            };
            total += head_loss(&zero, &draw.eps, &pair.hr, HYBRID).unwrap();
            data_norm += pair.hr.norm_sq();
        }
        let n = pairs.len() as f64;
        let expected = d + data_norm / n;
        // sd of the chi-square part of the mean is sqrt(2d / n)
        let se = (2.0 * d / n).sqrt();
        assert!((total / n - expected).abs() < 4.0 * se, "{} vs {expected}", total / n);

        let eps_only = head_loss(
            &Heads {
                eps: Tensor::zeros(&[1, 8, 8]),
                x0: Tensor::zeros(&[1, 8, 8]),
            },
            &draws[0].eps,
            &pairs[0].hr,
            Parametrization::Eps,
        )
        .unwrap();
        assert_eq!(eps_only, draws[0].eps.norm_sq());
    }

    #[test]
    fn tape_loss_matches_tensor_loss() {
        let process = toy_process(0.04);
        let pairs = toy_pairs(&process, 4, 5);
        let draws = draws(&pairs, 6);
        let net = ScoreNetwork::new(ModelConfig::tiny(1, 2), 3).unwrap();
        let batch: Vec<&TrainPair> = pairs.iter().collect();
        for param in [Parametrization::Eps, Parametrization::X0, HYBRID] {
            let lg = score_matching_loss(&net, &process, param, &batch, &draws).unwrap();
            let v = score_matching_loss_value(&net, &process, param, &batch, &draws).unwrap();
            assert!((lg.value - v).abs() < 1e-9 * v.abs());
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let process = toy_process(0.04);
        let pairs = toy_pairs(&process, 2, 7);
        let draws = draws(&pairs, 8);
        let batch: Vec<&TrainPair> = pairs.iter().collect();
        let config = ModelConfig {
            stage_channels: [2, 3],
            ..ModelConfig::tiny(1, 2)
        };
        let net = ScoreNetwork::new(config, 4).unwrap();
        assert!((400..=700).contains(&net.param_count()), "{}", net.param_count());
        let lg = score_matching_loss(&net, &process, HYBRID, &batch, &draws).unwrap();
        let flat_grad: Vec<f64> = lg.grads.iter().flat_map(|g| g.data().to_vec()).collect();
        let base = net.flat_params();
        let h = 1e-5;
        for i in (0..base.len()).step_by(5) {
            let at = |k: f64| {
                let mut p = base.clone();
                p[i] += k;
                let n = ScoreNetwork::from_flat(config, &p).unwrap();
                score_matching_loss_value(&n, &process, HYBRID, &batch, &draws).unwrap()
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            let g = flat_grad[i];
            assert!(
                (fd - g).abs() <= 1e-4 * fd.abs().max(g.abs()) + 1e-7,
                "param {i}: fd {fd} vs {g}"
            );
        }
    }

    #[test]
    fn sigma2_examples() {
        let up = |lr: &Tensor| upscale(lr, 2);
        assert!(matches!(estimate_sigma2(&[], up), Err(TrainError::EmptyDataset)));

        let exact = make_synthetic_dataset(DatasetKind::GaussianToy { sigma: 0.0 }, 4, 8, 2, 1).unwrap();
        assert_eq!(estimate_sigma2(&exact, up).unwrap(), 0.0);

        let noisy = make_synthetic_dataset(DatasetKind::GaussianToy { sigma: 0.2 }, 1600, 8, 2, 2).unwrap();
        let v = estimate_sigma2(&noisy, up).unwrap();
        assert!((v / 0.04 - 1.0).abs() < 0.05, "{v}");

        let lr = Tensor::full(&[1, 2, 2], 0.5);
        let mu = upscale(&lr, 2).unwrap();
        let a = 0.3;
        let two_point = [
            SrSample {
                hr: mu.map(|m| m + a),
                lr: lr.clone(),
                scale: 2,
            },
            SrSample {
                hr: mu.map(|m| m - a),
                lr,
                scale: 2,
            },
        ];
        assert!((estimate_sigma2(&two_point, up).unwrap() - a * a).abs() < 1e-12);
    }

    #[test]
    fn quality_loss_identity_examples() {
        let id = FeatureExtractor::identity();
        let x = Tensor::from_fn(&[1, 8, 8], |i| (i as f64 * 0.1).cos());
        assert_eq!(feature_distance(&id, &x, &x).unwrap(), 0.0);
        let delta = 0.05;
        let shifted = x.map(|v| v + delta);
        let d = feature_distance(&id, &shifted, &x).unwrap();
        assert!((d - delta * 8.0).abs() < 1e-12);
    }

    #[test]
    fn quality_loss_gradient_matches_finite_difference() {
        let process = toy_process(0.04);
        let pairs = toy_pairs(&process, 1, 9);
        let net = ScoreNetwork::new(ModelConfig::tiny(1, 2), 11).unwrap();
        let fx = FeatureExtractor::identity();
        let solver = AdjointSolver::Adaptive(Tolerance { atol: 1e-9, rtol: 1e-9 });
        let t_end = 0.01;
        let (lg, nfe) = quality_loss_sample(&net, &process, HYBRID, &pairs[0], &fx, solver, t_end, 3).unwrap();
        assert!(lg.value > 0.0 && nfe > 0);

        let mut r = rng(5);
        let dir: Vec<f64> = (0..net.param_count()).map(|_| standard_normal(&mut r)).collect();
        let flat: Vec<f64> = lg.grads.iter().flat_map(|g| g.data().to_vec()).collect();
        let analytic: f64 = flat.iter().zip(&dir).map(|(g, v)| g * v).sum();
        let base = net.flat_params();
        let h = 1e-4;
        let at = |k: f64| {
            let p: Vec<f64> = base.iter().zip(&dir).map(|(p, v)| p + k * v).collect();
            let n = ScoreNetwork::from_flat(*net.config(), &p).unwrap();
            quality_loss_sample(&n, &process, HYBRID, &pairs[0], &fx, solver, t_end, 3)
                .unwrap()
                .0
                .value
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        assert!((fd - analytic).abs() < 1e-3 * fd.abs(), "fd {fd} adjoint {analytic}");
    }

    #[test]
    fn quality_loss_of_random_conv_is_finite() {
        let process = toy_process(0.04);
        let pairs = toy_pairs(&process, 2, 10);
        let net = ScoreNetwork::new(ModelConfig::tiny(1, 2), 12).unwrap();
        let fx = FeatureExtractor::random_conv(1, 4, 1).unwrap();
        let batch: Vec<&TrainPair> = pairs.iter().collect();
        let solver = AdjointSolver::Adaptive(Tolerance { atol: 1e-3, rtol: 1e-3 });
        let lg = quality_loss(&net, &process, HYBRID, &batch, &fx, solver, 1e-3, &[1, 2]).unwrap();
        assert!(lg.value.is_finite() && lg.value > 0.0);
        assert!(lg.grads.iter().all(Tensor::all_finite));
        assert!(quality_loss(&net, &process, HYBRID, &batch, &fx, solver, 1e-3, &[1]).is_err());
    }
}
