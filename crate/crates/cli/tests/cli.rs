use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use diffsr::checkpoint::Checkpoint;
use diffsr::model::{ModelConfig, ScoreNetwork};

fn diffsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffsr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// One seeded toy training run shared by the tests below.
struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    run: PathBuf,
    output: Output,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().expect("temp dir");
        let data = dir.path().join("data");
        let run = dir.path().join("run");
        let output = diffsr(&[
            "train",
            "--config",
            s(&golden_dir().join("gauss.cfg")),
            "--generate",
            "--set",
            &format!("dataset_dir={}", s(&data)),
            "--out",
            s(&run),
        ]);
        Fixture {
            _dir: dir,
            data,
            run,
            output,
        }
    })
}

/// `(step, score_loss, quality_loss, lr)` per line; wall time is dropped.
fn parse_log(text: &str) -> Vec<[f64; 4]> {
    text.lines()
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|c| c.trim().parse().expect("number")).collect();
            assert_eq!(v.len(), 5, "{l}");
            [v[0], v[1], v[2], v[3]]
        })
        .collect()
}

#[test]
fn train_matches_golden_log_and_halves_the_loss() {
    let f = fixture();
    assert!(f.output.status.success(), "{}", stderr(&f.output));
    let log = std::fs::read_to_string(f.run.join("metrics.log")).unwrap();
    let got = parse_log(&log);
    let want = parse_log(&std::fs::read_to_string(golden_dir().join("gauss_metrics.log")).unwrap());
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(&want) {
        for (a, b) in g.iter().zip(w) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-12), "{g:?} vs golden {w:?}");
        }
    }
    // single-batch losses are noisy, so compare ten-step windows
    let window = |rows: &[[f64; 4]]| rows.iter().map(|r| r[1]).sum::<f64>() / rows.len() as f64;
    let (first, last) = (window(&got[..10]), window(&got[got.len() - 10..]));
    assert!(last < 0.5 * first, "score loss {first} -> {last}");
    assert!(f.run.join("final.ckpt").is_file());
    assert!(f.run.join("step_000050.ckpt").is_file());
    let val = std::fs::read_to_string(f.run.join("validation.log")).unwrap();
    assert!(val.lines().count() >= 1);
}

#[test]
fn every_command_echoes_its_resolved_config() {
    let f = fixture();
    let out = stdout(&f.output);
    assert!(out.starts_with("# resolved config\n"));
    assert!(
        out.contains("\nmodel = toy\n") && out.contains("\nsteps = 150\n"),
        "{out}"
    );
    let o = diffsr(&["selfcheck", "--quick", "--set", "seed=4"]);
    assert!(stdout(&o).contains("\nseed = 4\n"));
}

#[test]
fn zero_steps_writes_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = diffsr(&[
        "train",
        "--config",
        s(&golden_dir().join("gauss.cfg")),
        "--generate",
        "--steps",
        "0",
        "--set",
        &format!("dataset_dir={}", s(&dir.path().join("data"))),
        "--out",
        s(&run),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = Checkpoint::load(&run.join("final.ckpt")).unwrap();
    assert_eq!(ckpt.step, 0);
    let config = ModelConfig {
        channels: 1,
        ..ModelConfig::toy(2)
    };
    let init = ScoreNetwork::new(config, 5).unwrap();
    assert_eq!(ckpt.params, init.flat_params());
    assert_eq!(std::fs::read_to_string(run.join("metrics.log")).unwrap(), "");
}

#[test]
fn missing_dataset_exits_1_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let o = diffsr(&[
        "train",
        "--set",
        &format!("dataset_dir={}", s(&missing)),
        "--out",
        s(&dir.path().join("run")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(s(&missing)), "{}", stderr(&o));
}

#[test]
fn non_finite_loss_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = diffsr(&[
        "train",
        "--config",
        s(&golden_dir().join("gauss.cfg")),
        "--generate",
        "--set",
        &format!("dataset_dir={}", s(&dir.path().join("data"))),
        "--set",
        "lr_start=1e300",
        "--out",
        s(&dir.path().join("run")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "steps = 3\nlearning_rate = 1\n").unwrap();
    let o = diffsr(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2") && stderr(&o).contains("learning_rate"));
    assert_eq!(diffsr(&["launch"]).status.code(), Some(1));
    assert_eq!(diffsr(&["sample"]).status.code(), Some(1));
    assert_eq!(diffsr(&["selfcheck", "--set", "seed"]).status.code(), Some(1));
    assert_eq!(diffsr(&["--help"]).status.code(), Some(0));
}

fn sample(ckpt: &Path, input: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["sample", "--checkpoint", s(ckpt), "--input", s(input), "--out", s(out)];
    args.extend_from_slice(extra);
    diffsr(&args)
}

fn nfe(o: &Output) -> usize {
    let out = stdout(o);
    let line = out.lines().find(|l| l.starts_with("nfe=")).expect("nfe line");
    line.split_whitespace().next().unwrap()["nfe=".len()..].parse().unwrap()
}

#[test]
fn sampling_is_seeded_and_adaptive_is_cheaper_than_the_sde() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = f.run.join("final.ckpt");
    let lr = f.data.join("lr_0000.pgm");
    let (a, b, c) = (
        dir.path().join("a.pgm"),
        dir.path().join("b.pgm"),
        dir.path().join("c.pgm"),
    );
    assert!(sample(&ckpt, &lr, &a, &["--seed", "3"]).status.success());
    assert!(sample(&ckpt, &lr, &b, &["--seed", "3"]).status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(sample(&ckpt, &lr, &c, &["--seed", "4"]).status.success());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());

    let sde = sample(
        &ckpt,
        &lr,
        &a,
        &["--method", "reverse-sde", "--steps", "1000", "--report-nfe"],
    );
    let ode = sample(&ckpt, &lr, &b, &["--method", "adaptive-rk", "--report-nfe"]);
    assert!(sde.status.success() && ode.status.success());
    assert_eq!(nfe(&sde), 1000);
    assert!(nfe(&ode) < nfe(&sde), "{} vs {}", nfe(&ode), nfe(&sde));
    assert!(stdout(&ode)
        .lines()
        .any(|l| l.starts_with("nfe=") && l.contains(" wall_time=")));
}

#[test]
fn unwritable_output_exits_1() {
    let f = fixture();
    let o = sample(
        &f.run.join("final.ckpt"),
        &f.data.join("lr_0000.pgm"),
        Path::new("/nonexistent-dir/out.pgm"),
        &[],
    );
    assert_eq!(o.status.code(), Some(1));
    let o = sample(
        &f.data.join("manifest.txt"),
        &f.data.join("lr_0000.pgm"),
        Path::new("x.pgm"),
        &[],
    );
    assert_eq!(o.status.code(), Some(1), "a non-checkpoint is a data error");
}

#[test]
fn evaluate_ground_truth_predictions_hit_the_caps() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("tex");
    // 16×16 texture images are large enough for the SSIM window
    let o = diffsr(&[
        "train",
        "--generate",
        "--steps",
        "0",
        "--set",
        "dataset=texture-sr",
        "--set",
        "model=tiny",
        "--set",
        "dataset_size=4",
        "--set",
        "val_count=1",
        "--set",
        "hr_size=16",
        "--set",
        &format!("dataset_dir={}", s(&data)),
        "--out",
        s(&dir.path().join("run")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = std::fs::read_to_string(data.join("manifest.txt")).unwrap();
    let gt: String = manifest
        .lines()
        .map(|l| format!("{l}, {}\n", l.split(',').next().unwrap()))
        .collect();
    std::fs::write(data.join("gt.txt"), gt).unwrap();
    let csv = dir.path().join("eval.csv");
    let o = diffsr(&["evaluate", "--manifest", s(&data.join("gt.txt")), "--out", s(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split(", ").collect()).collect();
    assert_eq!(
        rows[0],
        ["method", "psnr", "ssim", "feature_distance", "mean_nfe", "images"]
    );
    assert_eq!(rows[1][0], "provided");
    assert_eq!(rows[1][1].parse::<f64>().unwrap(), 99.0);
    assert_eq!(rows[1][2].parse::<f64>().unwrap(), 1.0);
    assert_eq!(rows[1][3].parse::<f64>().unwrap(), 0.0);
    assert_eq!(rows[2][0], "bicubic");
    assert!(rows[2][1].parse::<f64>().unwrap() < 99.0);
    assert!(stdout(&o).contains("bicubic"));
}

#[test]
fn evaluate_names_the_bad_manifest_line() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.txt");
    std::fs::write(&m, "# header\na.pgm, b.pgm, 2\na.pgm, b.pgm, three\n").unwrap();
    let o = diffsr(&["evaluate", "--manifest", s(&m)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn evaluate_and_benchmark_a_trained_checkpoint() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = f.run.join("final.ckpt");
    let manifest = dir.path().join("few.txt");
    let lines: String = std::fs::read_to_string(f.data.join("manifest.txt"))
        .unwrap()
        .lines()
        .take(3)
        .map(|l| {
            let c: Vec<&str> = l.split(", ").collect();
            format!("{}, {}, {}\n", s(&f.data.join(c[0])), s(&f.data.join(c[1])), c[2])
        })
        .collect();
    std::fs::write(&manifest, lines).unwrap();

    let csv = dir.path().join("eval.csv");
    let o = diffsr(&[
        "evaluate",
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&manifest),
        "--out",
        s(&csv),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("model, "));
    assert!(text.lines().nth(2).unwrap().starts_with("bicubic, "));

    let csv = dir.path().join("bench.csv");
    let o = diffsr(&[
        "benchmark",
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&manifest),
        "--set",
        "bench_tolerances=1e-3",
        "--set",
        "bench_rk4_steps=10",
        "--set",
        "bench_sde_steps=20",
        "--out",
        s(&csv),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method, steps_or_tol, nfe, wall_time, psnr_vs_reference");
    let methods: Vec<&str> = lines[1..].iter().map(|l| l.split(", ").next().unwrap()).collect();
    assert_eq!(methods, ["bicubic", "adaptive-rk", "rk4-fixed", "reverse-sde"]);
    let rk4: Vec<&str> = lines[3].split(", ").collect();
    assert_eq!(rk4[1], "10");
    assert_eq!(rk4[2].parse::<f64>().unwrap(), 40.0);
}

#[test]
fn selfcheck_quick_passes_and_detects_a_corrupted_drift() {
    let start = std::time::Instant::now();
    let o = diffsr(&["selfcheck", "--quick"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(start.elapsed().as_secs() < 60);
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("PASS ")).count(), 5);

    let o = diffsr(&["selfcheck", "--quick", "--corrupt-drift-sign"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("FAIL forward-moments"));
    assert!(stderr(&o).contains("forward-moments"));
}
