//! The five verbs. Each resolves its config, echoes it, then acts.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use diffsr::checkpoint::Checkpoint;
use diffsr::image::{
    load_manifest, make_synthetic_dataset, psnr, read_pnm, ssim, upscale, write_dataset, write_pnm, ManifestEntry,
    SrSample,
};
use diffsr::model::{ModelScore, Parametrization, ScoreNetwork};
use diffsr::process::ConditionalForwardProcess;
use diffsr::rng::derive_seed;
use diffsr::sampler::{sample, SampleResult, SamplerConfig, SamplerMethod};
use diffsr::selfcheck::{self, SelfcheckOptions};
use diffsr::tensor::Tensor;
use diffsr::train::{estimate_sigma2, feature_distance, prepare_pairs, Trainer, SIGMA2_FLOOR};

use crate::config::{RunConfig, Sigma2};
use crate::error::CliError;

/// Reads the config file (if any), applies overrides, configures the thread
/// pool and prints the resolved config.
pub fn resolve(config: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = config {
        let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    }
    cfg.apply_overrides(overrides).map_err(CliError::Usage)?;
    if cfg.threads > 0 {
        // fails only if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    println!("# resolved config");
    print!("{}", cfg.render());
    Ok(cfg)
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn read_samples(entries: &[ManifestEntry]) -> Result<Vec<SrSample>, CliError> {
    entries
        .iter()
        .map(|e| {
            Ok(SrSample {
                hr: read_pnm(&e.hr)?,
                lr: read_pnm(&e.lr)?,
                scale: e.scale,
            })
        })
        .collect()
}

struct LogFile {
    path: PathBuf,
    file: File,
}

impl LogFile {
    fn create(path: PathBuf) -> Result<Self, CliError> {
        let file = File::create(&path).map_err(|e| io_err(&path, e))?;
        Ok(Self { path, file })
    }

    fn line(&mut self, s: &str) -> Result<(), CliError> {
        writeln!(self.file, "{s}")
            .and_then(|_| self.file.flush())
            .map_err(|e| io_err(&self.path, e))
    }
}

fn save(
    net: &ScoreNetwork,
    process: &ConditionalForwardProcess,
    param: Parametrization,
    step: usize,
    path: &Path,
) -> Result<(), CliError> {
    Checkpoint::new(net, process, param, step as u64).save(path)?;
    Ok(())
}

/// Trains from `dataset_dir/manifest.txt`, or from a freshly generated
/// dataset (also written there) with `generate`. Writes `metrics.log`,
/// `validation.log`, periodic `step_NNNNNN.ckpt` and `final.ckpt` into
/// `out_dir`.
pub fn train(cfg: &RunConfig, generate: bool) -> Result<(), CliError> {
    let samples = if generate {
        let s = make_synthetic_dataset(
            cfg.dataset_kind(),
            cfg.dataset_size,
            cfg.hr_size,
            cfg.scale,
            cfg.data_seed,
        )?;
        let manifest = write_dataset(&cfg.dataset_dir, &s)?;
        println!("wrote {} samples to {}", s.len(), manifest.display());
        s
    } else {
        let manifest = cfg.dataset_dir.join("manifest.txt");
        if !manifest.is_file() {
            return Err(CliError::Data(format!(
                "dataset manifest {} not found; pass --generate to create it",
                manifest.display()
            )));
        }
        read_samples(&load_manifest(&manifest)?)?
    };
    if cfg.val_count >= samples.len() {
        return Err(CliError::Usage(format!(
            "val_count {} leaves no training samples out of {}",
            cfg.val_count,
            samples.len()
        )));
    }
    let (train_s, val_s) = samples.split_at(samples.len() - cfg.val_count);
    let scale = train_s[0].scale;
    let channels = train_s[0].hr.shape()[0];
    let sigma2 = match cfg.sigma2 {
        Sigma2::Fixed(v) => v,
        Sigma2::Auto => {
            let v = estimate_sigma2(train_s, |lr| upscale(lr, scale))?;
            println!("estimated sigma2 = {v:e}");
            v.max(SIGMA2_FLOOR)
        }
    };
    let process = ConditionalForwardProcess::new(cfg.schedule()?, sigma2, scale)?;
    let train = prepare_pairs(&process, train_s)?;
    let val = prepare_pairs(&process, val_s)?;
    let net = ScoreNetwork::new(cfg.model_config(channels), cfg.model_seed)?;
    println!("model {} ({} parameters)", net.config().descriptor(), net.param_count());
    let tcfg = cfg.train_config()?;
    let param = tcfg.parametrization;
    let features = cfg.feature_extractor(channels)?;
    let has_val = !val.is_empty();
    let mut trainer = Trainer::new(net, &process, tcfg, features, train, val)?;

    fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    let mut metrics = LogFile::create(cfg.out_dir.join("metrics.log"))?;
    let mut validation = LogFile::create(cfg.out_dir.join("validation.log"))?;
    while !trainer.is_done() {
        let rec = trainer.step()?;
        metrics.line(&rec.log_line())?;
        let k = trainer.steps_done();
        let periodic = cfg.validation_every > 0 && k % cfg.validation_every == 0;
        if has_val && (periodic || trainer.is_done()) {
            let v = trainer.validate()?;
            validation.line(&format!("{}, {:.9e}", v.step, v.score_loss))?;
            println!("step {k}: validation score loss {:.6e}", v.score_loss);
        }
        if cfg.checkpoint_every > 0 && k % cfg.checkpoint_every == 0 {
            save(
                trainer.net(),
                &process,
                param,
                k,
                &cfg.out_dir.join(format!("step_{k:06}.ckpt")),
            )?;
        }
    }
    let final_path = cfg.out_dir.join("final.ckpt");
    save(trainer.net(), &process, param, trainer.steps_done(), &final_path)?;
    println!("wrote {}", final_path.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<(ScoreNetwork, ConditionalForwardProcess, Parametrization), CliError> {
    let ckpt = Checkpoint::load(path)?;
    Ok((ckpt.network()?, ckpt.process()?, ckpt.parametrization))
}

fn sample_one(
    net: &ScoreNetwork,
    process: &ConditionalForwardProcess,
    param: Parametrization,
    lr: &Tensor,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<SampleResult, CliError> {
    let cond = process.condition(lr)?;
    net.check_shapes(cond.mu.shape(), lr.shape())?;
    let score = ModelScore { net, process, param };
    Ok(sample(process, &score, &cond, cfg, seed)?)
}

/// Super-resolves one image with the configured sampler and `seed`.
pub fn sample_image(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    report_nfe: bool,
) -> Result<(), CliError> {
    let (net, process, param) = load_model(checkpoint)?;
    let lr = read_pnm(input)?;
    let s = sample_one(&net, &process, param, &lr, &cfg.sampler_config(), cfg.seed)?;
    write_pnm(out, &s.image)?;
    if report_nfe {
        println!("nfe={} wall_time={:.6}", s.nfe, s.wall_time);
    }
    Ok(())
}

const SSIM_WINDOW: usize = 11;

fn clamp01(t: &Tensor) -> Tensor {
    t.map(|v| v.clamp(0.0, 1.0))
}

#[derive(Debug, Default)]
struct Row {
    psnr: f64,
    ssim: f64,
    feature: f64,
    nfe: f64,
    n: usize,
}

impl Row {
    fn add(&mut self, p: f64, s: f64, f: f64, nfe: usize) {
        self.psnr += p;
        self.ssim += s;
        self.feature += f;
        self.nfe += nfe as f64;
        self.n += 1;
    }

    fn mean(&self) -> (f64, f64, f64, f64) {
        let n = self.n.max(1) as f64;
        (self.psnr / n, self.ssim / n, self.feature / n, self.nfe / n)
    }
}

fn csv_path(cfg: &RunConfig, explicit: Option<&Path>, name: &str) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir.join(name))
}

fn write_csv(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Scores predictions against ground truth. Each manifest entry's `sr_path`
/// is used when present; otherwise the checkpoint is sampled with seed
/// `derive_seed(seed, i)`. A bicubic row is always reported.
pub fn evaluate(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    manifest: &Path,
    csv: Option<&Path>,
) -> Result<(), CliError> {
    let entries = load_manifest(manifest)?;
    let model = checkpoint.map(load_model).transpose()?;
    let sampler = cfg.sampler_config();
    let (mut pred, mut bic) = (Row::default(), Row::default());
    let (mut provided, mut sampled) = (0, 0);
    for (i, e) in entries.iter().enumerate() {
        let hr = read_pnm(&e.hr)?;
        let lr = read_pnm(&e.lr)?;
        let features = cfg.feature_extractor(hr.shape()[0])?;
        let bicubic = clamp01(&upscale(&lr, e.scale)?);
        let (prediction, nfe) = match (&e.sr, &model) {
            (Some(sr), _) => {
                provided += 1;
                (read_pnm(sr)?, 0)
            }
            (None, Some((net, process, param))) => {
                sampled += 1;
                let s = sample_one(net, process, *param, &lr, &sampler, derive_seed(cfg.seed, i as u64))?;
                (clamp01(&s.image), s.nfe)
            }
            (None, None) => {
                return Err(CliError::Usage(format!(
                    "manifest entry {} has no sr_path and no --checkpoint was given",
                    i + 1
                )))
            }
        };
        // SSIM needs an 11×11 window; smaller images report NaN
        let ssim_defined = hr.shape()[1] >= SSIM_WINDOW && hr.shape()[2] >= SSIM_WINDOW;
        for (row, img, nfe) in [(&mut pred, &prediction, nfe), (&mut bic, &bicubic, 0)] {
            row.add(
                psnr(img, &hr)?,
                if ssim_defined { ssim(img, &hr)? } else { f64::NAN },
                feature_distance(&features, img, &hr).map_err(CliError::from)?,
                nfe,
            );
        }
    }
    let name = match (provided, sampled) {
        (_, 0) => "provided",
        (0, _) => "model",
        _ => "mixed",
    };
    let mut text = String::from("method, psnr, ssim, feature_distance, mean_nfe, images\n");
    println!(
        "{:<10} {:>9} {:>8} {:>17} {:>9} {:>7}",
        "method", "psnr", "ssim", "feature_distance", "mean_nfe", "images"
    );
    for (label, row) in [(name, &pred), ("bicubic", &bic)] {
        let (p, s, f, n) = row.mean();
        println!("{label:<10} {p:>9.4} {s:>8.5} {f:>17.6} {n:>9.1} {:>7}", row.n);
        text.push_str(&format!("{label}, {p:.6}, {s:.6}, {f:.6}, {n:.2}, {}\n", row.n));
    }
    write_csv(&csv_path(cfg, csv, "evaluate.csv"), &text)
}

/// Runs every sampler setting from the config over the manifest and reports
/// mean NFE, mean wall time per image and mean PSNR against ground truth.
pub fn benchmark(cfg: &RunConfig, checkpoint: &Path, manifest: &Path, csv: Option<&Path>) -> Result<(), CliError> {
    let (net, process, param) = load_model(checkpoint)?;
    let entries = load_manifest(manifest)?;
    let images: Vec<(Tensor, Tensor)> = entries
        .iter()
        .map(|e| Ok((read_pnm(&e.hr)?, read_pnm(&e.lr)?)))
        .collect::<Result<_, CliError>>()?;
    let base = cfg.sampler_config();
    let mut settings: Vec<(SamplerConfig, String)> = Vec::new();
    for &tol in &cfg.bench_tolerances {
        let c = SamplerConfig {
            method: SamplerMethod::AdaptiveRk,
            atol: tol,
            rtol: tol,
            ..base
        };
        settings.push((c, format!("{tol:e}")));
    }
    for &steps in &cfg.bench_rk4_steps {
        settings.push((
            SamplerConfig {
                method: SamplerMethod::Rk4Fixed,
                steps,
                ..base
            },
            steps.to_string(),
        ));
    }
    for &steps in &cfg.bench_sde_steps {
        settings.push((
            SamplerConfig {
                method: SamplerMethod::ReverseSde,
                steps,
                ..base
            },
            steps.to_string(),
        ));
    }
    let mut text = String::from("method, steps_or_tol, nfe, wall_time, psnr_vs_reference\n");
    println!(
        "{:<12} {:>12} {:>9} {:>11} {:>18}",
        "method", "steps_or_tol", "nfe", "wall_time", "psnr_vs_reference"
    );
    let mut emit = |method: &str, setting: &str, nfe: f64, wall: f64, p: f64| {
        println!("{method:<12} {setting:>12} {nfe:>9.1} {wall:>11.4} {p:>18.4}");
        text.push_str(&format!("{method}, {setting}, {nfe:.2}, {wall:.6}, {p:.6}\n"));
    };
    let n = images.len() as f64;
    let start = Instant::now();
    let mut p = 0.0;
    for ((hr, lr), e) in images.iter().zip(&entries) {
        p += psnr(&clamp01(&upscale(lr, e.scale)?), hr)?;
    }
    emit("bicubic", "-", 0.0, start.elapsed().as_secs_f64() / n, p / n);
    for (sc, label) in &settings {
        let (mut nfe, mut wall, mut p) = (0.0, 0.0, 0.0);
        for (i, (hr, lr)) in images.iter().enumerate() {
            let s = sample_one(&net, &process, param, lr, sc, derive_seed(cfg.seed, i as u64))?;
            nfe += s.nfe as f64;
            wall += s.wall_time;
            p += psnr(&clamp01(&s.image), hr)?;
        }
        emit(sc.method.name(), label, nfe / n, wall / n, p / n);
    }
    write_csv(&csv_path(cfg, csv, "benchmark.csv"), &text)
}

/// Runs the oracle checks; every failure is listed in the error.
pub fn selfcheck(quick: bool, corrupt_drift_sign: bool, seed: u64) -> Result<(), CliError> {
    let outcomes = selfcheck::run(SelfcheckOptions {
        quick,
        corrupt_drift_sign,
        seed,
    });
    let mut failed = Vec::new();
    for o in &outcomes {
        println!("{}", o.line());
        if !o.passed {
            failed.push(o.name.to_string());
        }
    }
    if failed.is_empty() {
        println!("all {} checks passed", outcomes.len());
        Ok(())
    } else {
        Err(CliError::Selfcheck(failed))
    }
}
