//! Raw slice kernels behind the tape primitives.

/// `c = a(m×k) · b(k×n)` with optional transposes, row-major storage.
///
/// `trans_a` reads `a` as stored `k×m`; `trans_b` reads `b` as stored `n×k`.
/// When `accumulate` is set the product is added into `c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slice lengths match the dimensions and strides above, so every
    // index dgemm touches is in bounds; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kernel
    }

    pub fn out_w(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kernel
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.pad == 0
    }
}

/// Unfolds `[C, H, W]` into `[C·k·k, Ho·Wo]` patch columns.
pub(crate) fn im2col(input: &[f64], g: ConvGeom) -> Vec<f64> {
    if g.is_pointwise() {
        return input.to_vec();
    }
    let (ho, wo, k, p) = (g.out_h(), g.out_w(), g.kernel, g.pad as isize);
    let mut cols = vec![0.0; g.col_rows() * ho * wo];
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize + ki as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    let shift = kj as isize - p;
                    let lo = (-shift).max(0) as usize;
                    let hi = ((g.width as isize - shift).min(wo as isize)).max(0) as usize;
                    if lo < hi {
                        let s0 = (lo as isize + shift) as usize;
                        dst_row[lo..hi].copy_from_slice(&src_row[s0..s0 + (hi - lo)]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds patch columns back into `[C, H, W]`, summing overlaps.
pub(crate) fn col2im(cols: &[f64], g: ConvGeom) -> Vec<f64> {
    if g.is_pointwise() {
        return cols.to_vec();
    }
    let (ho, wo, k, p) = (g.out_h(), g.out_w(), g.kernel, g.pad as isize);
    let mut out = vec![0.0; g.channels * g.height * g.width];
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize + ki as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let src_row = &src[oy * wo..(oy + 1) * wo];
                    let shift = kj as isize - p;
                    let lo = (-shift).max(0) as usize;
                    let hi = ((g.width as isize - shift).min(wo as isize)).max(0) as usize;
                    for ox in lo..hi {
                        dst_row[(ox as isize + shift) as usize] += src_row[ox];
                    }
                }
            }
        }
    }
    out
}

/// Result shape of broadcasting `a` against `b` with trailing-dimension alignment.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `out_shape`, the flat index it reads from a tensor of
/// shape `src` under broadcasting.
pub(crate) fn broadcast_index(src: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let oi = i + rank - src.len();
        strides[oi] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let n: usize = out_shape.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        idx.push(flat);
        for d in (0..rank).rev() {
            counter[d] += 1;
            flat += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            flat -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

/// Sums `grad` (laid out as `out_shape`) down to `src` shape.
pub(crate) fn reduce_to(grad: &[f64], src: &[usize], out_shape: &[usize]) -> Vec<f64> {
    if src == out_shape {
        return grad.to_vec();
    }
    let n: usize = src.iter().product();
    let mut out = vec![0.0; n];
    for (g, i) in grad.iter().zip(broadcast_index(src, out_shape)) {
        out[i] += g;
    }
    out
}
