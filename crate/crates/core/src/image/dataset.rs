//! Procedural paired datasets.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;

use crate::rng::{derive_seed, normal_tensor, rng, Rng};
use crate::tensor::Tensor;

use super::{downscale, upscale, write_manifest, write_pnm, ImageError, ManifestEntry};

/// A paired low/high resolution image. `lr` is `hr` reduced by `scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct SrSample {
    pub hr: Tensor,
    pub lr: Tensor,
    pub scale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DatasetKind {
    /// Single channel. `hr = upscale(lr) + sigma * noise`, so the
    /// conditional law of `hr` given `lr` is exactly Gaussian. `hr` is not
    /// clamped and may leave `[0, 1]`.
    GaussianToy { sigma: f64 },
    /// Three channel procedural textures; `lr` is the bicubic reduction.
    TextureSr,
}

impl DatasetKind {
    pub fn channels(&self) -> usize {
        match self {
            DatasetKind::GaussianToy { .. } => 1,
            DatasetKind::TextureSr => 3,
        }
    }
}

/// Generates `n` samples. Sample `i` depends only on `(seed, i)`.
pub fn make_synthetic_dataset(
    kind: DatasetKind,
    n: usize,
    hr_size: usize,
    scale: usize,
    seed: u64,
) -> Result<Vec<SrSample>, ImageError> {
    if ![2, 4, 8].contains(&scale) {
        return Err(ImageError::Shape(format!("scale {scale} not in {{2, 4, 8}}")));
    }
    if hr_size == 0 || !hr_size.is_multiple_of(scale) {
        return Err(ImageError::Shape(format!(
            "hr size {hr_size} not a positive multiple of {scale}"
        )));
    }
    if let DatasetKind::GaussianToy { sigma } = kind {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(ImageError::Shape(format!("invalid sigma {sigma}")));
        }
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng(derive_seed(seed, i as u64));
            match kind {
                DatasetKind::GaussianToy { sigma } => gaussian_toy(&mut r, hr_size, scale, sigma),
                DatasetKind::TextureSr => texture(&mut r, hr_size, scale),
            }
        })
        .collect()
}

fn gaussian_toy(r: &mut Rng, hr: usize, scale: usize, sigma: f64) -> Result<SrSample, ImageError> {
    let lr_size = hr / scale;
    let lr = smooth_field(r, lr_size, 3).map(|v| 0.5 + 0.25 * v);
    let mean = upscale(&lr, scale)?;
    let hr_img = if sigma == 0.0 {
        mean
    } else {
        let noise = normal_tensor(r, mean.shape());
        mean.axpy(sigma, &noise)?
    };
    Ok(SrSample { hr: hr_img, lr, scale })
}

/// `[1, n, n]` sum of a few low-frequency waves, values in `[-1, 1]`.
fn smooth_field(r: &mut Rng, n: usize, waves: usize) -> Tensor {
    let comps: Vec<(f64, f64, f64, f64)> = (0..waves)
        .map(|_| {
            (
                r.gen_range(-1.5..1.5),
                r.gen_range(-1.5..1.5),
                r.gen_range(0.0..2.0 * PI),
                r.gen_range(0.3..1.0),
            )
        })
        .collect();
    let norm: f64 = comps.iter().map(|c| c.3).sum();
    Tensor::from_fn(&[1, n, n], |i| {
        let (y, x) = ((i / n) as f64 / n as f64, (i % n) as f64 / n as f64);
        comps
            .iter()
            .map(|&(fx, fy, ph, a)| a * (2.0 * PI * (fx * x + fy * y) + ph).sin())
            .sum::<f64>()
            / norm
    })
}

struct Polygon {
    verts: Vec<(f64, f64)>,
    color: [f64; 3],
}

impl Polygon {
    /// Even-odd crossing rule; the jittered vertices need not be convex.
    fn contains(&self, x: f64, y: f64) -> bool {
        let mut inside = false;
        let n = self.verts.len();
        for i in 0..n {
            let (x1, y1) = self.verts[i];
            let (x2, y2) = self.verts[(i + 1) % n];
            if (y1 > y) != (y2 > y) && x < x1 + (y - y1) * (x2 - x1) / (y2 - y1) {
                inside = !inside;
            }
        }
        inside
    }
}

fn random_color(r: &mut Rng) -> [f64; 3] {
    [
        r.gen_range(0.05..0.95),
        r.gen_range(0.05..0.95),
        r.gen_range(0.05..0.95),
    ]
}

fn texture(r: &mut Rng, hr: usize, scale: usize) -> Result<SrSample, ImageError> {
    let palette = [random_color(r), random_color(r), random_color(r)];
    let n = hr as f64;
    // oriented sinusoids blend palette[0] and palette[1]
    let waves: Vec<(f64, f64, f64)> = (0..r.gen_range(1..=3))
        .map(|_| {
            let theta = r.gen_range(0.0..PI);
            let freq = r.gen_range(1.0..n / 6.0);
            (theta, freq, r.gen_range(0.0..2.0 * PI))
        })
        .collect();
    let polys: Vec<Polygon> = (0..r.gen_range(1..=3))
        .map(|k| {
            let (cx, cy) = (r.gen_range(0.15..0.85), r.gen_range(0.15..0.85));
            let radius = r.gen_range(0.12..0.35);
            let sides = r.gen_range(3..=6);
            let start = r.gen_range(0.0..2.0 * PI);
            let verts = (0..sides)
                .map(|j| {
                    let a = start + 2.0 * PI * j as f64 / sides as f64 + r.gen_range(-0.3..0.3);
                    let rad = radius * r.gen_range(0.7..1.0);
                    (cx + rad * a.cos(), cy + rad * a.sin())
                })
                .collect();
            let color = if k == 0 { palette[2] } else { random_color(r) };
            Polygon { verts, color }
        })
        .collect();

    const SS: usize = 4;
    let mut img = vec![0.0; 3 * hr * hr];
    for py in 0..hr {
        for px in 0..hr {
            let mut acc = [0.0; 3];
            for sy in 0..SS {
                for sx in 0..SS {
                    let x = (px as f64 + (sx as f64 + 0.5) / SS as f64) / n;
                    let y = (py as f64 + (sy as f64 + 0.5) / SS as f64) / n;
                    let color = match polys.iter().rev().find(|p| p.contains(x, y)) {
                        Some(p) => p.color,
                        None => {
                            let s: f64 = waves
                                .iter()
                                .map(|&(th, f, ph)| (2.0 * PI * f * (x * th.cos() + y * th.sin()) + ph).sin())
                                .sum::<f64>()
                                / waves.len() as f64;
                            let m = 0.5 + 0.5 * s;
                            std::array::from_fn(|c| (1.0 - m) * palette[0][c] + m * palette[1][c])
                        }
                    };
                    for c in 0..3 {
                        acc[c] += color[c];
                    }
                }
            }
            for (c, v) in acc.iter().enumerate() {
                img[(c * hr + py) * hr + px] = v / (SS * SS) as f64;
            }
        }
    }
    let hr_img = Tensor::new(&[3, hr, hr], img)?;
    let lr = downscale(&hr_img, scale)?.map(|v| v.clamp(0.0, 1.0));
    Ok(SrSample { hr: hr_img, lr, scale })
}

/// Writes `hr_NNNN` / `lr_NNNN` images and a `manifest.txt` with relative
/// paths into `dir`. Returns the manifest path.
pub fn write_dataset(dir: &Path, samples: &[SrSample]) -> Result<std::path::PathBuf, ImageError> {
    std::fs::create_dir_all(dir).map_err(|e| ImageError::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let ext = if s.hr.shape()[0] == 1 { "pgm" } else { "ppm" };
        let hr = format!("hr_{i:04}.{ext}");
        let lr = format!("lr_{i:04}.{ext}");
        write_pnm(dir.join(&hr), &s.hr)?;
        write_pnm(dir.join(&lr), &s.lr)?;
        entries.push(ManifestEntry {
            hr: hr.into(),
            lr: lr.into(),
            scale: s.scale,
            sr: None,
        });
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, write_manifest(&entries)).map_err(|e| ImageError::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::read_pnm;

    #[test]
    fn gaussian_toy_zero_sigma_is_exact_upscale() {
        let ds = make_synthetic_dataset(DatasetKind::GaussianToy { sigma: 0.0 }, 4, 8, 2, 1).unwrap();
        for s in &ds {
            assert_eq!(s.hr, upscale(&s.lr, 2).unwrap());
            assert_eq!(s.hr.shape(), &[1, 8, 8]);
            assert_eq!(s.lr.shape(), &[1, 4, 4]);
        }
    }

    #[test]
    fn gaussian_toy_residual_variance() {
        let sigma = 0.2;
        let ds = make_synthetic_dataset(DatasetKind::GaussianToy { sigma }, 1600, 8, 2, 5).unwrap();
        let res: Vec<f64> = ds
            .iter()
            .flat_map(|s| s.hr.sub(&upscale(&s.lr, 2).unwrap()).unwrap().into_data())
            .collect();
        let n = res.len() as f64;
        let mean = res.iter().sum::<f64>() / n;
        let var = res.iter().map(|r| r * r).sum::<f64>() / n - mean * mean;
        assert!(n >= 1e5);
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn texture_is_deterministic_and_in_range() {
        let a = make_synthetic_dataset(DatasetKind::TextureSr, 3, 32, 4, 9).unwrap();
        let b = make_synthetic_dataset(DatasetKind::TextureSr, 3, 32, 4, 9).unwrap();
        assert_eq!(a, b);
        let c = make_synthetic_dataset(DatasetKind::TextureSr, 3, 32, 4, 10).unwrap();
        assert_ne!(a, c);
        for s in &a {
            assert_eq!(s.hr.shape(), &[3, 32, 32]);
            assert_eq!(s.lr.shape(), &[3, 8, 8]);
            assert!(s.hr.data().iter().chain(s.lr.data()).all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn texture_is_not_trivially_upscalable() {
        let ds = make_synthetic_dataset(DatasetKind::TextureSr, 8, 32, 4, 3).unwrap();
        let mean_psnr: f64 = ds
            .iter()
            .map(|s| crate::image::psnr(&upscale(&s.lr, 4).unwrap(), &s.hr).unwrap())
            .sum::<f64>()
            / ds.len() as f64;
        assert!(mean_psnr < 35.0, "bicubic psnr {mean_psnr}");
    }

    #[test]
    fn prefix_stability() {
        let a = make_synthetic_dataset(DatasetKind::TextureSr, 2, 16, 4, 4).unwrap();
        let b = make_synthetic_dataset(DatasetKind::TextureSr, 5, 16, 4, 4).unwrap();
        assert_eq!(a[..], b[..2]);
    }

    #[test]
    fn invalid_sizes_rejected() {
        assert!(make_synthetic_dataset(DatasetKind::TextureSr, 1, 30, 4, 0).is_err());
        assert!(make_synthetic_dataset(DatasetKind::TextureSr, 1, 32, 3, 0).is_err());
        assert!(make_synthetic_dataset(DatasetKind::GaussianToy { sigma: -1.0 }, 1, 8, 2, 0).is_err());
    }

    #[test]
    fn written_dataset_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_synthetic_dataset(DatasetKind::TextureSr, 2, 16, 2, 4).unwrap();
        let manifest = write_dataset(dir.path(), &ds).unwrap();
        let entries = crate::image::load_manifest(&manifest).unwrap();
        assert_eq!(entries.len(), 2);
        let hr = read_pnm(&entries[1].hr).unwrap();
        assert!(hr.max_abs_diff(&ds[1].hr) <= 0.5 / 255.0 + 1e-12);
        assert_eq!(entries[1].scale, 2);
    }
}
