//! Separable bicubic resampling.
//!
//! Catmull–Rom cubic convolution (`a = -0.5`), half-pixel centres
//! (align-corners off) and clamped edge sampling. When shrinking, the kernel
//! is widened by the scale factor so the result is antialiased, which is the
//! usual degradation model for super-resolution data.

use crate::tensor::Tensor;

use super::ImageError;

const A: f64 = -0.5;

fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output-pixel source taps and weights along one axis.
struct AxisTaps {
    start: Vec<isize>,
    weights: Vec<Vec<f64>>,
}

fn axis_taps(in_len: usize, out_len: usize) -> AxisTaps {
    let scale = in_len as f64 / out_len as f64;
    let support = if scale > 1.0 { scale } else { 1.0 };
    let mut start = Vec::with_capacity(out_len);
    let mut weights = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let center = (i as f64 + 0.5) * scale - 0.5;
        let lo = (center - 2.0 * support).floor() as isize + 1;
        let hi = (center + 2.0 * support).ceil() as isize - 1;
        let mut w: Vec<f64> = (lo..=hi).map(|j| cubic((j as f64 - center) / support)).collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        start.push(lo);
        weights.push(w);
    }
    AxisTaps { start, weights }
}

/// Resizes a `[C, H, W]` image to `[C, out_h, out_w]`.
pub fn bicubic_resize(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor, ImageError> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(ImageError::Shape(format!("expected [C, H, W], got {s:?}")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(ImageError::Shape(format!("target size {out_h}x{out_w}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let tx = axis_taps(w, out_w);
    let ty = axis_taps(h, out_h);
    let src = img.data();

    // rows first: [C, H, out_w]
    let mut tmp = vec![0.0; c * h * out_w];
    for ch in 0..c {
        for y in 0..h {
            let row = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
            let dst = &mut tmp[(ch * h + y) * out_w..(ch * h + y + 1) * out_w];
            for (x, d) in dst.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (k, wt) in tx.weights[x].iter().enumerate() {
                    let j = (tx.start[x] + k as isize).clamp(0, w as isize - 1) as usize;
                    acc += wt * row[j];
                }
                *d = acc;
            }
        }
    }
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        for y in 0..out_h {
            let dst = &mut out[(ch * out_h + y) * out_w..(ch * out_h + y + 1) * out_w];
            for (k, wt) in ty.weights[y].iter().enumerate() {
                let j = (ty.start[y] + k as isize).clamp(0, h as isize - 1) as usize;
                let srow = &tmp[(ch * h + j) * out_w..(ch * h + j + 1) * out_w];
                for (d, v) in dst.iter_mut().zip(srow) {
                    *d += wt * v;
                }
            }
        }
    }
    Ok(Tensor::new(&[c, out_h, out_w], out)?)
}

/// Integer-factor upscale, the conditional-mean operator for SR.
pub fn upscale(img: &Tensor, factor: usize) -> Result<Tensor, ImageError> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(ImageError::Shape(format!("expected [C, H, W], got {s:?}")));
    }
    bicubic_resize(img, s[1] * factor, s[2] * factor)
}

pub fn downscale(img: &Tensor, factor: usize) -> Result<Tensor, ImageError> {
    let s = img.shape();
    if s.len() != 3 || factor == 0 || !s[1].is_multiple_of(factor) || !s[2].is_multiple_of(factor) {
        return Err(ImageError::Shape(format!("{s:?} not divisible by {factor}")));
    }
    bicubic_resize(img, s[1] / factor, s[2] / factor)
}
