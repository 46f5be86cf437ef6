//! Flat `key = value` run configuration with `#` comments.

use std::fmt::Write as _;
use std::path::PathBuf;

use diffsr::image::DatasetKind;
use diffsr::model::{HybridConfig, ModelConfig, Parametrization};
use diffsr::process::BetaSchedule;
use diffsr::sampler::{SamplerConfig, SamplerMethod};
use diffsr::train::{FeatureExtractor, TrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelPreset {
    Tiny,
    Toy,
    Texture,
}

/// `sigma2 = auto` estimates the process variance from the training set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sigma2 {
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // dataset
    pub dataset: String,
    pub dataset_dir: PathBuf,
    pub dataset_size: usize,
    pub val_count: usize,
    pub hr_size: usize,
    pub scale: usize,
    pub data_sigma: f64,
    pub data_seed: u64,
    // model and process
    pub model: ModelPreset,
    pub model_seed: u64,
    pub beta0: f64,
    pub beta_t: f64,
    pub horizon: f64,
    pub sigma2: Sigma2,
    pub parametrization: String,
    pub hybrid_c: f64,
    // training
    pub lr_start: f64,
    pub lr_end: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub quality_loss_start_fraction: f64,
    pub quality_loss_weight: f64,
    pub quality_batch: usize,
    pub t_min: f64,
    pub seed: u64,
    pub validation_every: usize,
    pub validation_draws: usize,
    pub features: String,
    pub checkpoint_every: usize,
    pub out_dir: PathBuf,
    // sampling
    pub method: SamplerMethod,
    pub atol: f64,
    pub rtol: f64,
    pub sampler_steps: usize,
    pub t_end: f64,
    pub temperature: f64,
    pub bench_tolerances: Vec<f64>,
    pub bench_rk4_steps: Vec<usize>,
    pub bench_sde_steps: Vec<usize>,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let s = SamplerConfig::default();
        let b = BetaSchedule::default();
        Self {
            dataset: "gaussian-toy".into(),
            dataset_dir: "data".into(),
            dataset_size: 272,
            val_count: 16,
            hr_size: 16,
            scale: 2,
            data_sigma: 0.2,
            data_seed: 0,
            model: ModelPreset::Toy,
            model_seed: 0,
            beta0: b.beta0(),
            beta_t: b.beta_t(),
            horizon: b.horizon(),
            sigma2: Sigma2::Auto,
            parametrization: "hybrid".into(),
            hybrid_c: HybridConfig::DEFAULT.c(),
            lr_start: t.lr_start,
            lr_end: t.lr_end,
            batch_size: t.batch_size,
            steps: t.total_steps,
            quality_loss_start_fraction: t.quality_loss_start_fraction,
            quality_loss_weight: t.quality_loss_weight,
            quality_batch: t.quality_batch,
            t_min: t.t_min,
            seed: t.seed,
            validation_every: t.validation_every,
            validation_draws: t.validation_draws,
            features: "auto".into(),
            checkpoint_every: 0,
            out_dir: "run".into(),
            method: s.method,
            atol: s.atol,
            rtol: s.rtol,
            sampler_steps: s.steps,
            t_end: s.t_end,
            temperature: s.temperature,
            bench_tolerances: vec![1e-2, 1e-3, 1e-4],
            bench_rk4_steps: vec![10, 20, 50],
            bench_sde_steps: vec![100, 1000],
            threads: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("invalid value {value:?} for {key}"))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, String> {
    value
        .split_whitespace()
        .map(|v| parse(key, v))
        .collect::<Result<Vec<T>, String>>()
        .and_then(|v| {
            if v.is_empty() {
                Err(format!("{key} is empty"))
            } else {
                Ok(v)
            }
        })
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

impl RunConfig {
    /// Sets one key. Unknown keys and malformed values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "dataset" => {
                if !matches!(value, "gaussian-toy" | "texture-sr") {
                    return Err(format!(
                        "unknown dataset {value:?}; expected gaussian-toy or texture-sr"
                    ));
                }
                self.dataset = value.into();
            }
            "dataset_dir" => self.dataset_dir = value.into(),
            "dataset_size" => self.dataset_size = parse(key, value)?,
            "val_count" => self.val_count = parse(key, value)?,
            "hr_size" => self.hr_size = parse(key, value)?,
            "scale" => self.scale = parse(key, value)?,
            "data_sigma" => self.data_sigma = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "model" => {
                self.model = match value {
                    "tiny" => ModelPreset::Tiny,
                    "toy" => ModelPreset::Toy,
                    "texture" => ModelPreset::Texture,
                    _ => return Err(format!("unknown model {value:?}; expected tiny, toy or texture")),
                }
            }
            "model_seed" => self.model_seed = parse(key, value)?,
            "beta0" => self.beta0 = parse(key, value)?,
            "beta_t" => self.beta_t = parse(key, value)?,
            "horizon" => self.horizon = parse(key, value)?,
            "sigma2" => {
                self.sigma2 = if value == "auto" {
                    Sigma2::Auto
                } else {
                    Sigma2::Fixed(parse(key, value)?)
                }
            }
            "parametrization" => {
                if !matches!(value, "eps" | "x0" | "hybrid") {
                    return Err(format!("unknown parametrization {value:?}; expected eps, x0 or hybrid"));
                }
                self.parametrization = value.into();
            }
            "hybrid_c" => self.hybrid_c = parse(key, value)?,
            "lr_start" => self.lr_start = parse(key, value)?,
            "lr_end" => self.lr_end = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "quality_loss_start_fraction" => self.quality_loss_start_fraction = parse(key, value)?,
            "quality_loss_weight" => self.quality_loss_weight = parse(key, value)?,
            "quality_batch" => self.quality_batch = parse(key, value)?,
            "t_min" => self.t_min = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "validation_every" => self.validation_every = parse(key, value)?,
            "validation_draws" => self.validation_draws = parse(key, value)?,
            "features" => self.features = value.into(),
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "out_dir" => self.out_dir = value.into(),
            "method" => self.method = value.parse()?,
            "atol" => self.atol = parse(key, value)?,
            "rtol" => self.rtol = parse(key, value)?,
            "sampler_steps" => self.sampler_steps = parse(key, value)?,
            "t_end" => self.t_end = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "bench_tolerances" => self.bench_tolerances = parse_list(key, value)?,
            "bench_rk4_steps" => self.bench_rk4_steps = parse_list(key, value)?,
            "bench_sde_steps" => self.bench_sde_steps = parse_list(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Applies a config file's text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), String> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", idx + 1))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| format!("line {}: {e}", idx + 1))?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), String> {
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| format!("override {o:?} is not key=value"))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Every key with its resolved value, one `key = value` per line, in a
    /// form [`RunConfig::apply_text`] accepts.
    pub fn render(&self) -> String {
        let sigma2 = match self.sigma2 {
            Sigma2::Auto => "auto".to_string(),
            Sigma2::Fixed(v) => v.to_string(),
        };
        let model = match self.model {
            ModelPreset::Tiny => "tiny",
            ModelPreset::Toy => "toy",
            ModelPreset::Texture => "texture",
        };
        let pairs: Vec<(&str, String)> = vec![
            ("dataset", self.dataset.clone()),
            ("dataset_dir", self.dataset_dir.display().to_string()),
            ("dataset_size", self.dataset_size.to_string()),
            ("val_count", self.val_count.to_string()),
            ("hr_size", self.hr_size.to_string()),
            ("scale", self.scale.to_string()),
            ("data_sigma", self.data_sigma.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("model", model.to_string()),
            ("model_seed", self.model_seed.to_string()),
            ("beta0", self.beta0.to_string()),
            ("beta_t", self.beta_t.to_string()),
            ("horizon", self.horizon.to_string()),
            ("sigma2", sigma2),
            ("parametrization", self.parametrization.clone()),
            ("hybrid_c", self.hybrid_c.to_string()),
            ("lr_start", self.lr_start.to_string()),
            ("lr_end", self.lr_end.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("steps", self.steps.to_string()),
            (
                "quality_loss_start_fraction",
                self.quality_loss_start_fraction.to_string(),
            ),
            ("quality_loss_weight", self.quality_loss_weight.to_string()),
            ("quality_batch", self.quality_batch.to_string()),
            ("t_min", self.t_min.to_string()),
            ("seed", self.seed.to_string()),
            ("validation_every", self.validation_every.to_string()),
            ("validation_draws", self.validation_draws.to_string()),
            ("features", self.features.clone()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("method", self.method.name().to_string()),
            ("atol", self.atol.to_string()),
            ("rtol", self.rtol.to_string()),
            ("sampler_steps", self.sampler_steps.to_string()),
            ("t_end", self.t_end.to_string()),
            ("temperature", self.temperature.to_string()),
            ("bench_tolerances", join(&self.bench_tolerances)),
            ("bench_rk4_steps", join(&self.bench_rk4_steps)),
            ("bench_sde_steps", join(&self.bench_sde_steps)),
            ("threads", self.threads.to_string()),
        ];
        let mut s = String::new();
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn dataset_kind(&self) -> DatasetKind {
        match self.dataset.as_str() {
            "texture-sr" => DatasetKind::TextureSr,
            _ => DatasetKind::GaussianToy { sigma: self.data_sigma },
        }
    }

    pub fn model_config(&self, channels: usize) -> ModelConfig {
        match self.model {
            ModelPreset::Tiny => ModelConfig::tiny(channels, self.scale),
            ModelPreset::Toy => ModelConfig {
                channels,
                ..ModelConfig::toy(self.scale)
            },
            ModelPreset::Texture => ModelConfig {
                channels,
                ..ModelConfig::texture(self.scale)
            },
        }
    }

    pub fn parametrization(&self) -> Result<Parametrization, CliError> {
        Ok(match self.parametrization.as_str() {
            "eps" => Parametrization::Eps,
            "x0" => Parametrization::X0,
            _ => Parametrization::Hybrid(HybridConfig::new(self.hybrid_c).map_err(|e| CliError::Usage(e.to_string()))?),
        })
    }

    pub fn schedule(&self) -> Result<BetaSchedule, CliError> {
        BetaSchedule::new(self.beta0, self.beta_t, self.horizon).map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn feature_extractor(&self, channels: usize) -> Result<FeatureExtractor, CliError> {
        let descriptor = if self.features == "auto" {
            format!("randconv c={channels} width=8 seed=0")
        } else {
            self.features.clone()
        };
        FeatureExtractor::from_descriptor(&descriptor).map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        Ok(TrainConfig {
            lr_start: self.lr_start,
            lr_end: self.lr_end,
            batch_size: self.batch_size,
            total_steps: self.steps,
            quality_loss_start_fraction: self.quality_loss_start_fraction,
            quality_loss_weight: self.quality_loss_weight,
            t_min: self.t_min,
            parametrization: self.parametrization()?,
            seed: self.seed,
            quality_sampler: TrainConfig::default().quality_sampler,
            quality_batch: self.quality_batch,
            validation_every: self.validation_every,
            validation_draws: self.validation_draws,
        })
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            method: self.method,
            atol: self.atol,
            rtol: self.rtol,
            steps: self.sampler_steps,
            t_end: self.t_end,
            temperature: self.temperature,
        }
    }
}
