//! The training loop.

use std::time::Instant;

use rand::Rng as _;

use crate::adjoint::AdjointSolver;
use crate::model::{HybridConfig, Parametrization, ScoreNetwork};
use crate::process::{ConditionalForwardProcess, T_MIN};
use crate::rng::{derive_seed, normal_tensor, rng};
use crate::sampler::{SamplerConfig, SamplerMethod};

use super::loss::{quality_loss, score_matching_loss, validation_draws, validation_score_loss, NoiseDraw, TrainPair};
use super::{Adam, FeatureExtractor, LinearDecay, TrainError};

/// Candidate hybrid exponents, default first so that ties keep it.
pub const HYBRID_GRID: [f64; 3] = [1.0, 0.5, 1.5];

/// Seed stream reserved for validation draws.
const VALIDATION_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    /// Fraction of `total_steps` after which the quality loss is added.
    pub quality_loss_start_fraction: f64,
    pub quality_loss_weight: f64,
    pub t_min: f64,
    pub parametrization: Parametrization,
    pub seed: u64,
    /// Solver used to draw `SR_θ(y)` for the quality loss.
    pub quality_sampler: SamplerConfig,
    /// Leading batch entries that get a quality-loss sample; 0 means all.
    pub quality_batch: usize,
    /// Validate every this many steps; 0 validates only at the end.
    pub validation_every: usize,
    /// Noise draws per validation pair.
    pub validation_draws: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_start: 1e-4,
            lr_end: 1e-5,
            batch_size: 16,
            total_steps: 1000,
            quality_loss_start_fraction: 0.7,
            quality_loss_weight: 0.1,
            t_min: T_MIN,
            parametrization: Parametrization::Hybrid(HybridConfig::DEFAULT),
            seed: 0,
            quality_sampler: SamplerConfig {
                atol: 1e-3,
                rtol: 1e-3,
                ..SamplerConfig::default()
            },
            quality_batch: 0,
            validation_every: 0,
            validation_draws: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, horizon: f64) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr_end > 0.0 && self.lr_end <= self.lr_start && self.lr_start.is_finite()) {
            return bad(format!(
                "need 0 < lr_end <= lr_start, got {} and {}",
                self.lr_end, self.lr_start
            ));
        }
        if !(0.0..=1.0).contains(&self.quality_loss_start_fraction) {
            return bad(format!(
                "quality_loss_start_fraction {} outside [0, 1]",
                self.quality_loss_start_fraction
            ));
        }
        if !(self.quality_loss_weight >= 0.0 && self.quality_loss_weight.is_finite()) {
            return bad(format!("quality_loss_weight {} must be >= 0", self.quality_loss_weight));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.t_min > 0.0 && self.t_min < horizon) {
            return bad(format!("t_min {} outside (0, {horizon})", self.t_min));
        }
        if self.validation_draws == 0 {
            return bad("validation_draws must be at least 1".into());
        }
        if self.quality_sampler.method == SamplerMethod::ReverseSde {
            return bad("the quality loss needs an ODE sampler".into());
        }
        self.quality_sampler.validate(horizon)?;
        Ok(())
    }

    /// First step at which the quality loss is active, if ever.
    pub fn quality_start(&self) -> Option<usize> {
        if self.quality_loss_weight == 0.0 {
            return None;
        }
        let start = (self.quality_loss_start_fraction * self.total_steps as f64).ceil() as usize;
        (start < self.total_steps).then_some(start)
    }

    fn adjoint_solver(&self) -> AdjointSolver {
        match self.quality_sampler.method {
            SamplerMethod::Rk4Fixed => AdjointSolver::Rk4 {
                steps: self.quality_sampler.steps,
            },
            _ => AdjointSolver::Adaptive(self.quality_sampler.tolerance()),
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub score_loss: f64,
    /// Zero while the quality loss is inactive.
    pub quality_loss: f64,
    pub lr: f64,
    /// Seconds since training started.
    pub wall_time: f64,
}

impl StepRecord {
    /// `step, score_loss, quality_loss, lr, wall_time`.
    pub fn log_line(&self) -> String {
        format!(
            "{}, {:.9e}, {:.9e}, {:.6e}, {:.3}",
            self.step, self.score_loss, self.quality_loss, self.lr, self.wall_time
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationRecord {
    /// Steps completed when the record was taken.
    pub step: usize,
    pub score_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: ScoreNetwork,
    pub records: Vec<StepRecord>,
    pub validations: Vec<ValidationRecord>,
}

pub struct Trainer<'a> {
    net: ScoreNetwork,
    process: &'a ConditionalForwardProcess,
    cfg: TrainConfig,
    features: FeatureExtractor,
    train: Vec<TrainPair>,
    val: Vec<TrainPair>,
    val_draws: Vec<(usize, NoiseDraw)>,
    adam: Adam,
    schedule: LinearDecay,
    step: usize,
    started: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(
        net: ScoreNetwork,
        process: &'a ConditionalForwardProcess,
        cfg: TrainConfig,
        features: FeatureExtractor,
        train: Vec<TrainPair>,
        val: Vec<TrainPair>,
    ) -> Result<Self, TrainError> {
        cfg.validate(process.horizon())?;
        if train.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        for p in train.iter().chain(&val) {
            net.check_shapes(p.hr.shape(), p.cond.lr.shape())?;
        }
        let val_draws = validation_draws(
            process,
            &val,
            cfg.validation_draws,
            cfg.t_min,
            derive_seed(cfg.seed, VALIDATION_STREAM),
        );
        let schedule = LinearDecay {
            start: cfg.lr_start,
            end: cfg.lr_end,
            total: cfg.total_steps,
        };
        Ok(Self {
            adam: Adam::new(net.params()),
            net,
            process,
            cfg,
            features,
            train,
            val,
            val_draws,
            schedule,
            step: 0,
            started: Instant::now(),
        })
    }

    pub fn net(&self) -> &ScoreNetwork {
        &self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Steps completed.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    /// One optimizer step. All randomness for step `k` comes from
    /// `derive_seed(seed, k)` and is drawn before the parallel section.
    pub fn step(&mut self) -> Result<StepRecord, TrainError> {
        let k = self.step;
        let step_seed = derive_seed(self.cfg.seed, k as u64);
        let mut r = rng(step_seed);
        let horizon = self.process.horizon();
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        let mut draws = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let pair = &self.train[r.gen_range(0..self.train.len())];
            let t = self.cfg.t_min + (horizon - self.cfg.t_min) * r.gen::<f64>();
            draws.push(NoiseDraw {
                t,
                eps: normal_tensor(&mut r, pair.hr.shape()),
            });
            batch.push(pair);
        }
        let param = self.cfg.parametrization;
        let mut total = score_matching_loss(&self.net, self.process, param, &batch, &draws)?;
        if !total.value.is_finite() || !total.grads.iter().all(|g| g.all_finite()) {
            return Err(TrainError::NonFinite { step: k, what: "score" });
        }
        let score_loss = total.value;

        let mut quality = 0.0;
        if self.cfg.quality_start().is_some_and(|s| k >= s) {
            let n = match self.cfg.quality_batch {
                0 => batch.len(),
                q => q.min(batch.len()),
            };
            let seeds: Vec<u64> = (0..n).map(|i| derive_seed(step_seed, i as u64)).collect();
            let q = quality_loss(
                &self.net,
                self.process,
                param,
                &batch[..n],
                &self.features,
                self.cfg.adjoint_solver(),
                self.cfg.quality_sampler.t_end,
                &seeds,
            )
            .map_err(|e| match e {
                TrainError::Adjoint(_) | TrainError::Sample(_) => TrainError::NonFinite {
                    step: k,
                    what: "quality",
                },
                e => e,
            })?;
            if !q.value.is_finite() || !q.grads.iter().all(|g| g.all_finite()) {
                return Err(TrainError::NonFinite {
                    step: k,
                    what: "quality",
                });
            }
            quality = q.value;
            let w = self.cfg.quality_loss_weight;
            for (g, qg) in total.grads.iter_mut().zip(&q.grads) {
                *g = g.axpy(w, qg)?;
            }
        }

        let lr = self.schedule.at(k);
        let adam = &mut self.adam;
        self.net.update_params(|p| adam.step(p, &total.grads, lr));
        self.step += 1;
        Ok(StepRecord {
            step: k,
            score_loss,
            quality_loss: quality,
            lr,
            wall_time: self.started.elapsed().as_secs_f64(),
        })
    }

    /// Validation score loss on the fixed validation draws.
    pub fn validate(&self) -> Result<ValidationRecord, TrainError> {
        Ok(ValidationRecord {
            step: self.step,
            score_loss: validation_score_loss(
                &self.net,
                self.process,
                self.cfg.parametrization,
                &self.val,
                &self.val_draws,
            )?,
        })
    }

    /// Runs the remaining steps, reporting each record as it is produced.
    pub fn run(
        mut self,
        mut on_step: impl FnMut(&StepRecord),
        mut on_validation: impl FnMut(&ValidationRecord),
    ) -> Result<TrainOutcome, TrainError> {
        let mut records = Vec::with_capacity(self.cfg.total_steps - self.step.min(self.cfg.total_steps));
        let mut validations = Vec::new();
        let every = self.cfg.validation_every;
        while !self.is_done() {
            let rec = self.step()?;
            on_step(&rec);
            records.push(rec);
            let periodic = every > 0 && self.step.is_multiple_of(every);
            if !self.val.is_empty() && (periodic || self.is_done()) {
                let v = self.validate()?;
                on_validation(&v);
                validations.push(v);
            }
        }
        Ok(TrainOutcome {
            net: self.net,
            records,
            validations,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ExponentSelection {
    pub c: f64,
    /// `(c, final validation score loss)` for every candidate.
    pub losses: Vec<(f64, f64)>,
    pub net: ScoreNetwork,
}

/// Trains one hybrid model per exponent in [`HYBRID_GRID`] from the same
/// initialization and keeps the one with the lowest validation score loss.
pub fn select_hybrid_exponent(
    init: &ScoreNetwork,
    process: &ConditionalForwardProcess,
    cfg: &TrainConfig,
    features: &FeatureExtractor,
    train: &[TrainPair],
    val: &[TrainPair],
) -> Result<ExponentSelection, TrainError> {
    if val.is_empty() {
        return Err(TrainError::Config("selecting c needs a validation set".into()));
    }
    let draws = validation_draws(
        process,
        val,
        cfg.validation_draws,
        cfg.t_min,
        derive_seed(cfg.seed, VALIDATION_STREAM),
    );
    let mut best: Option<(f64, f64, ScoreNetwork)> = None;
    let mut losses = Vec::with_capacity(HYBRID_GRID.len());
    for c in HYBRID_GRID {
        let param = Parametrization::Hybrid(HybridConfig::new(c)?);
        let cfg = TrainConfig {
            parametrization: param,
            validation_every: 0,
            ..cfg.clone()
        };
        let trainer = Trainer::new(init.clone(), process, cfg, features.clone(), train.to_vec(), Vec::new())?;
        let net = trainer.run(|_| {}, |_| {})?.net;
        let loss = validation_score_loss(&net, process, param, val, &draws)?;
        losses.push((c, loss));
        if best.as_ref().is_none_or(|b| loss < b.1) {
            best = Some((c, loss, net));
        }
    }
    let (c, _, net) = best.expect("grid is non-empty");
    Ok(ExponentSelection { c, losses, net })
}
