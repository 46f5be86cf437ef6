use crate::tensor::Tensor;

use super::ImageError;

/// Value reported by [`psnr`] for identical images.
pub const PSNR_CAP: f64 = 99.0;

const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<(), ImageError> {
    if a.shape() != b.shape() {
        return Err(ImageError::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio for unit dynamic range, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64, ImageError> {
    same_shape(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

/// Channel mean of a `[C, H, W]` image, as `[H, W]`.
pub fn grayscale(img: &Tensor) -> Result<Tensor, ImageError> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(ImageError::Shape(format!("expected [C, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    let d = img.data();
    Ok(Tensor::from_fn(&[h, w], |i| {
        (0..c).map(|ch| d[ch * plane + i]).sum::<f64>() / c as f64
    }))
}

fn gaussian_window() -> [f64; WINDOW] {
    let mut g = [0.0; WINDOW];
    let mid = (WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let total: f64 = g.iter().sum();
    g.map(|v| v / total)
}

/// Valid-mode separable filtering of an `[H, W]` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, g: &[f64; WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - WINDOW + 1, w - WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..WINDOW).map(|k| g[k] * src[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WINDOW).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM on the channel-mean grayscale, averaged over valid
/// 11×11 Gaussian windows.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64, ImageError> {
    same_shape(a, b)?;
    let ga = grayscale(a)?;
    let gb = grayscale(b)?;
    let (h, w) = (ga.shape()[0], ga.shape()[1]);
    if h < WINDOW || w < WINDOW {
        return Err(ImageError::Shape(format!(
            "ssim needs at least {WINDOW}x{WINDOW}, got {h}x{w}"
        )));
    }
    let g = gaussian_window();
    let (x, y) = (ga.data(), gb.data());
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
    let mx = filter_valid(x, h, w, &g);
    let my = filter_valid(y, h, w, &g);
    let sxx = filter_valid(&xx, h, w, &g);
    let syy = filter_valid(&yy, h, w, &g);
    let sxy = filter_valid(&xy, h, w, &g);
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ma, mb) = (mx[i], my[i]);
        let va = sxx[i] - ma * ma;
        let vb = syy[i] - mb * mb;
        let cov = sxy[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        total += num / den;
    }
    Ok(total / mx.len() as f64)
}
