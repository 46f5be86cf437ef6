//! Command-line front end: train, sample, evaluate, benchmark, selfcheck.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "diffsr", version, about = "Conditional diffusion super-resolution")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output: run directory for train, image for sample, CSV otherwise.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Config override, `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SamplerFlags {
    /// adaptive-rk, rk4-fixed or reverse-sde.
    #[arg(long)]
    pub method: Option<String>,
    /// Steps for the fixed-step methods.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub atol: Option<f64>,
    #[arg(long)]
    pub rtol: Option<f64>,
    #[arg(long)]
    pub t_end: Option<f64>,
    /// Initial-noise scale; 0 gives the deterministic flow from μ.
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes checkpoints and logs into the run directory.
    Train {
        /// Generate the synthetic dataset into `dataset_dir` first.
        #[arg(long)]
        generate: bool,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Super-resolve one PPM/PGM image.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        sampler: SamplerFlags,
        /// Print `nfe=<int> wall_time=<s>`.
        #[arg(long)]
        report_nfe: bool,
    },
    /// PSNR, SSIM and feature distance over a manifest, with a bicubic row.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// NFE, wall time and PSNR for every configured sampler setting.
    Benchmark {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Oracle checks of the process, samplers, adjoint and solver.
    Selfcheck {
        /// Fewer paths and seeds.
        #[arg(long)]
        quick: bool,
        /// Reverse the forward drift to check that the harness notices.
        #[arg(long, hide = true)]
        corrupt_drift_sign: bool,
    },
}

fn push<T: ToString>(v: &mut Vec<String>, key: &str, value: &Option<T>) {
    if let Some(x) = value {
        v.push(format!("{key}={}", x.to_string()));
    }
}

impl SamplerFlags {
    fn overrides(&self, v: &mut Vec<String>) {
        push(v, "method", &self.method);
        push(v, "sampler_steps", &self.steps);
        push(v, "atol", &self.atol);
        push(v, "rtol", &self.rtol);
        push(v, "t_end", &self.t_end);
        push(v, "temperature", &self.temperature);
    }
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let c = &cli.common;
    let mut overrides = c.set.clone();
    push(&mut overrides, "seed", &c.seed);
    push(&mut overrides, "threads", &c.threads);
    match &cli.command {
        Command::Train { generate, steps } => {
            push(&mut overrides, "steps", steps);
            push(&mut overrides, "out_dir", &c.out.as_ref().map(|p| p.display()));
            let cfg = commands::resolve(c.config.as_deref(), &overrides)?;
            commands::train(&cfg, *generate)
        }
        Command::Sample {
            checkpoint,
            input,
            sampler,
            report_nfe,
        } => {
            sampler.overrides(&mut overrides);
            let out = c
                .out
                .as_deref()
                .ok_or_else(|| CliError::Usage("sample needs --out <image path>".into()))?;
            let cfg = commands::resolve(c.config.as_deref(), &overrides)?;
            commands::sample_image(&cfg, checkpoint, input, out, *report_nfe)
        }
        Command::Evaluate {
            checkpoint,
            manifest,
            sampler,
        } => {
            sampler.overrides(&mut overrides);
            let cfg = commands::resolve(c.config.as_deref(), &overrides)?;
            commands::evaluate(&cfg, checkpoint.as_deref(), manifest, c.out.as_deref())
        }
        Command::Benchmark { checkpoint, manifest } => {
            let cfg = commands::resolve(c.config.as_deref(), &overrides)?;
            commands::benchmark(&cfg, checkpoint, manifest, c.out.as_deref())
        }
        Command::Selfcheck {
            quick,
            corrupt_drift_sign,
        } => {
            let cfg = commands::resolve(c.config.as_deref(), &overrides)?;
            commands::selfcheck(*quick, *corrupt_drift_sign, cfg.seed)
        }
    }
}
