use std::cell::Cell;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom};
use super::{shape_err, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static LIVE_NODES: Cell<usize> = const { Cell::new(0) };
    static PEAK_NODES: Cell<usize> = const { Cell::new(0) };
}

/// Highest number of simultaneously live tape nodes on this thread since the
/// last [`reset_peak_live_nodes`].
pub fn peak_live_nodes() -> usize {
    PEAK_NODES.with(|p| p.get())
}

pub fn reset_peak_live_nodes() {
    let live = LIVE_NODES.with(|l| l.get());
    PEAK_NODES.with(|p| p.set(live));
}

fn track_push() {
    let live = LIVE_NODES.with(|l| {
        let v = l.get() + 1;
        l.set(v);
        v
    });
    PEAK_NODES.with(|p| {
        if live > p.get() {
            p.set(live)
        }
    });
}

fn track_release(n: usize) {
    LIVE_NODES.with(|l| l.set(l.get().saturating_sub(n)));
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    id: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Conv2d { input: usize, weight: usize, pad: usize },
    Relu(usize),
    Silu(usize),
    Square(usize),
    Sqrt(usize),
    Sum(usize),
    Mean(usize),
    Concat(usize, usize),
    Upsample(usize, usize),
    AvgPool(usize, usize),
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of primitive operations.
///
/// Nodes are appended in evaluation order, so walking them backwards is a
/// reverse topological order. Dropping or clearing the tape frees every
/// recorded intermediate.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for Tape {
    fn drop(&mut self) {
        track_release(self.nodes.len());
    }
}

/// Gradients produced by [`Tape::backward`], keyed by leaf var.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Removes and returns the gradient of `v`, or a zero tensor of `shape`
    /// when `v` did not influence the loss.
    pub fn take_or_zeros(&mut self, v: Var, shape: &[usize]) -> Tensor {
        if v.tape == self.tape {
            if let Some(g) = self.grads.get_mut(v.id).and_then(|g| g.take()) {
                return g;
            }
        }
        Tensor::zeros(shape)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        track_release(self.nodes.len());
        self.nodes.clear();
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        track_push();
        let op = if requires_grad {
            op
        } else if matches!(op, Op::Leaf) {
            Op::Leaf
        } else {
            Op::Const
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            id: self.nodes.len() - 1,
        }
    }

    fn node(&self, v: Var) -> Result<&Node, TensorError> {
        if v.tape != self.id {
            return Err(TensorError::ForeignVar);
        }
        Ok(&self.nodes[v.id])
    }

    /// Registers an input. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "var belongs to a different tape");
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let (sa, sb) = (na.value.shape(), nb.value.shape());
        let rg = na.requires_grad || nb.requires_grad;
        let value = if sa == sb {
            let data = na
                .value
                .data()
                .iter()
                .zip(nb.value.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(sa, data)?
        } else {
            let out = kernels::broadcast_shape(sa, sb)
                .ok_or_else(|| shape_err(name, format!("cannot broadcast {sa:?} with {sb:?}")))?;
            let ia = kernels::broadcast_index(sa, &out);
            let ib = kernels::broadcast_index(sb, &out);
            let (da, db) = (na.value.data(), nb.value.data());
            let data = ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect();
            Tensor::new(&out, data)?
        };
        Ok(self.push(value, op, rg))
    }

    /// Elementwise sum with trailing-dimension broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.id, b.id))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.id, b.id))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.id, b.id))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var, TensorError> {
        let n = self.node(a)?;
        let (value, rg) = (n.value.scale(k), n.requires_grad);
        Ok(self.push(value, Op::Scale(a.id, k), rg))
    }

    /// `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let (sa, sb) = (na.value.shape(), nb.value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, na.value.data(), false, nb.value.data(), false, &mut out, false);
        let rg = na.requires_grad || nb.requires_grad;
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul(a.id, b.id), rg))
    }

    /// Stride-1 convolution of `[Cin, H, W]` with `[Cout, Cin, k, k]` and
    /// symmetric zero padding `pad`.
    pub fn conv2d(&mut self, input: Var, weight: Var, pad: usize) -> Result<Var, TensorError> {
        let (ni, nw) = (self.node(input)?, self.node(weight)?);
        let (si, sw) = (ni.value.shape(), nw.value.shape());
        if si.len() != 3 || sw.len() != 4 || sw[1] != si[0] || sw[2] != sw[3] {
            return Err(shape_err("conv2d", format!("input {si:?}, weight {sw:?}")));
        }
        if si[1] + 2 * pad < sw[2] || si[2] + 2 * pad < sw[3] {
            return Err(shape_err(
                "conv2d",
                format!("kernel {} larger than padded input {si:?}", sw[2]),
            ));
        }
        let g = ConvGeom {
            channels: si[0],
            height: si[1],
            width: si[2],
            kernel: sw[2],
            pad,
        };
        let cout = sw[0];
        let cols = kernels::im2col(ni.value.data(), g);
        let hw = g.out_h() * g.out_w();
        let mut out = vec![0.0; cout * hw];
        kernels::gemm(
            cout,
            g.col_rows(),
            hw,
            nw.value.data(),
            false,
            &cols,
            false,
            &mut out,
            false,
        );
        let rg = ni.requires_grad || nw.requires_grad;
        let value = Tensor::new(&[cout, g.out_h(), g.out_w()], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input: input.id,
                weight: weight.id,
                pad,
            },
            rg,
        ))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, TensorError> {
        let n = self.node(a)?;
        let (value, rg) = (n.value.map(f), n.requires_grad);
        Ok(self.push(value, op, rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.id))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, |x| x / (1.0 + (-x).exp()), Op::Silu(a.id))
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, |x| x * x, Op::Square(a.id))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, f64::sqrt, Op::Sqrt(a.id))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.node(a)?;
        let (value, rg) = (Tensor::scalar(n.value.sum()), n.requires_grad);
        Ok(self.push(value, Op::Sum(a.id), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.node(a)?;
        let (value, rg) = (Tensor::scalar(n.value.mean()), n.requires_grad);
        Ok(self.push(value, Op::Mean(a.id), rg))
    }

    /// Concatenates two `[C, H, W]` tensors along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let (sa, sb) = (na.value.shape(), nb.value.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
            return Err(shape_err("concat_channels", format!("{sa:?} with {sb:?}")));
        }
        let mut data = Vec::with_capacity(na.value.len() + nb.value.len());
        data.extend_from_slice(na.value.data());
        data.extend_from_slice(nb.value.data());
        let rg = na.requires_grad || nb.requires_grad;
        let value = Tensor::new(&[sa[0] + sb[0], sa[1], sa[2]], data)?;
        Ok(self.push(value, Op::Concat(a.id, b.id), rg))
    }

    /// Nearest-neighbour upsampling of `[C, H, W]` by an integer factor.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var, TensorError> {
        let n = self.node(a)?;
        let s = n.value.shape();
        if s.len() != 3 || factor == 0 {
            return Err(shape_err("upsample_nearest", format!("{s:?} by {factor}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h * factor, w * factor);
        let src = n.value.data();
        let mut data = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                let srow = &src[(ch * h + y / factor) * w..(ch * h + y / factor + 1) * w];
                let drow = &mut data[(ch * oh + y) * ow..(ch * oh + y + 1) * ow];
                for (x, d) in drow.iter_mut().enumerate() {
                    *d = srow[x / factor];
                }
            }
        }
        let rg = n.requires_grad;
        let value = Tensor::new(&[c, oh, ow], data)?;
        Ok(self.push(value, Op::Upsample(a.id, factor), rg))
    }

    /// Average pooling of `[C, H, W]` over non-overlapping `factor × factor` blocks.
    pub fn avg_pool(&mut self, a: Var, factor: usize) -> Result<Var, TensorError> {
        let n = self.node(a)?;
        let s = n.value.shape();
        if s.len() != 3 || factor == 0 || s[1] % factor != 0 || s[2] % factor != 0 {
            return Err(shape_err("avg_pool", format!("{s:?} by {factor}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / factor, w / factor);
        let src = n.value.data();
        let mut data = vec![0.0; c * oh * ow];
        let inv = 1.0 / (factor * factor) as f64;
        for ch in 0..c {
            for y in 0..h {
                let srow = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
                let drow = &mut data[(ch * oh + y / factor) * ow..(ch * oh + y / factor + 1) * ow];
                for (x, v) in srow.iter().enumerate() {
                    drow[x / factor] += v * inv;
                }
            }
        }
        let rg = n.requires_grad;
        let value = Tensor::new(&[c, oh, ow], data)?;
        Ok(self.push(value, Op::AvgPool(a.id, factor), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let n = self.node(a)?;
        let value = n.value.clone().reshape(shape)?;
        let rg = n.requires_grad;
        Ok(self.push(value, Op::Reshape(a.id), rg))
    }

    /// Reverse pass from a scalar loss. Returns gradients for every leaf that
    /// requires them and consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients, TensorError> {
        let shape = self.node(loss)?.value.shape().to_vec();
        if self.node(loss)?.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let seed = Tensor::full(&shape, 1.0);
        let grads = self.reverse(loss, seed)?;
        Ok(Gradients {
            tape: self.id,
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, node)| match (g, &node.op) {
                    (Some(g), Op::Leaf) if node.requires_grad => {
                        Some(Tensor::new(node.value.shape(), g).expect("grad shape"))
                    }
                    _ => None,
                })
                .collect(),
        })
    }

    /// Vector–Jacobian product `cotangentᵀ · ∂output/∂wrt` for each leaf in `wrt`.
    ///
    /// The tape is left intact, so several products may be taken from one
    /// recording. Vars that do not influence `output` get zero gradients.
    pub fn vjp(&self, output: Var, cotangent: &Tensor, wrt: &[Var]) -> Result<Vec<Tensor>, TensorError> {
        let out_shape = self.node(output)?.value.shape();
        if out_shape != cotangent.shape() {
            return Err(shape_err(
                "vjp",
                format!("cotangent {:?} vs output {out_shape:?}", cotangent.shape()),
            ));
        }
        let mut grads = self.reverse(output, cotangent.clone())?;
        wrt.iter()
            .map(|&w| {
                let node = self.node(w)?;
                let g = grads[w.id].take();
                // the same var may appear twice in `wrt`
                if let Some(g) = &g {
                    grads[w.id] = Some(g.clone());
                }
                Tensor::new(node.value.shape(), g.unwrap_or_else(|| vec![0.0; node.value.len()]))
            })
            .collect()
    }

    fn reverse(&self, root: Var, seed: Tensor) -> Result<Vec<Option<Vec<f64>>>, TensorError> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(seed.into_data());
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Const => {}
                &Op::Add(a, b) => {
                    let out = node.value.shape();
                    self.accumulate(&mut grads, a, kernels::reduce_to(&g, self.nodes[a].value.shape(), out));
                    self.accumulate(&mut grads, b, kernels::reduce_to(&g, self.nodes[b].value.shape(), out));
                }
                &Op::Sub(a, b) => {
                    let out = node.value.shape();
                    self.accumulate(&mut grads, a, kernels::reduce_to(&g, self.nodes[a].value.shape(), out));
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accumulate(
                        &mut grads,
                        b,
                        kernels::reduce_to(&neg, self.nodes[b].value.shape(), out),
                    );
                }
                &Op::Mul(a, b) => {
                    let out = node.value.shape();
                    let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                    if self.nodes[a].requires_grad {
                        let ga = scaled_by_other(&g, vb, out);
                        self.accumulate(&mut grads, a, kernels::reduce_to(&ga, va.shape(), out));
                    }
                    if self.nodes[b].requires_grad {
                        let gb = scaled_by_other(&g, va, out);
                        self.accumulate(&mut grads, b, kernels::reduce_to(&gb, vb.shape(), out));
                    }
                }
                &Op::Scale(a, k) => {
                    self.accumulate(&mut grads, a, g.iter().map(|v| v * k).collect());
                }
                &Op::MatMul(a, b) => {
                    let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                    let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                    if self.nodes[a].requires_grad {
                        let mut ga = vec![0.0; m * k];
                        kernels::gemm(m, n, k, &g, false, vb.data(), true, &mut ga, false);
                        self.accumulate(&mut grads, a, ga);
                    }
                    if self.nodes[b].requires_grad {
                        let mut gb = vec![0.0; k * n];
                        kernels::gemm(k, m, n, va.data(), true, &g, false, &mut gb, false);
                        self.accumulate(&mut grads, b, gb);
                    }
                }
                &Op::Conv2d { input, weight, pad } => {
                    let (vi, vw) = (&self.nodes[input].value, &self.nodes[weight].value);
                    let (si, sw) = (vi.shape(), vw.shape());
                    let geom = ConvGeom {
                        channels: si[0],
                        height: si[1],
                        width: si[2],
                        kernel: sw[2],
                        pad,
                    };
                    let (cout, rows, hw) = (sw[0], geom.col_rows(), geom.out_h() * geom.out_w());
                    if self.nodes[weight].requires_grad {
                        let cols = kernels::im2col(vi.data(), geom);
                        let mut gw = vec![0.0; cout * rows];
                        kernels::gemm(cout, hw, rows, &g, false, &cols, true, &mut gw, false);
                        self.accumulate(&mut grads, weight, gw);
                    }
                    if self.nodes[input].requires_grad {
                        let mut gcols = vec![0.0; rows * hw];
                        kernels::gemm(rows, cout, hw, vw.data(), true, &g, false, &mut gcols, false);
                        self.accumulate(&mut grads, input, kernels::col2im(&gcols, geom));
                    }
                }
                &Op::Relu(a) => {
                    let x = self.nodes[a].value.data();
                    let ga = g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                    self.accumulate(&mut grads, a, ga);
                }
                &Op::Silu(a) => {
                    let x = self.nodes[a].value.data();
                    let ga = g
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| {
                            let s = 1.0 / (1.0 + (-x).exp());
                            g * s * (1.0 + x * (1.0 - s))
                        })
                        .collect();
                    self.accumulate(&mut grads, a, ga);
                }
                &Op::Square(a) => {
                    let x = self.nodes[a].value.data();
                    let ga = g.iter().zip(x).map(|(g, &x)| 2.0 * x * g).collect();
                    self.accumulate(&mut grads, a, ga);
                }
                &Op::Sqrt(a) => {
                    let y = node.value.data();
                    let ga = g.iter().zip(y).map(|(g, &y)| g / (2.0 * y)).collect();
                    self.accumulate(&mut grads, a, ga);
                }
                &Op::Sum(a) => {
                    let n = self.nodes[a].value.len();
                    self.accumulate(&mut grads, a, vec![g[0]; n]);
                }
                &Op::Mean(a) => {
                    let n = self.nodes[a].value.len();
                    self.accumulate(&mut grads, a, vec![g[0] / n as f64; n]);
                }
                &Op::Concat(a, b) => {
                    let na = self.nodes[a].value.len();
                    self.accumulate(&mut grads, a, g[..na].to_vec());
                    self.accumulate(&mut grads, b, g[na..].to_vec());
                }
                &Op::Upsample(a, f) => {
                    let s = self.nodes[a].value.shape();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let (oh, ow) = (h * f, w * f);
                    let mut ga = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for y in 0..oh {
                            let grow = &g[(ch * oh + y) * ow..(ch * oh + y + 1) * ow];
                            let drow = &mut ga[(ch * h + y / f) * w..(ch * h + y / f + 1) * w];
                            for (x, v) in grow.iter().enumerate() {
                                drow[x / f] += v;
                            }
                        }
                    }
                    self.accumulate(&mut grads, a, ga);
                }
                &Op::AvgPool(a, f) => {
                    let s = self.nodes[a].value.shape();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let (oh, ow) = (h / f, w / f);
                    let inv = 1.0 / (f * f) as f64;
                    let mut ga = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for y in 0..h {
                            let grow = &g[(ch * oh + y / f) * ow..(ch * oh + y / f + 1) * ow];
                            let drow = &mut ga[(ch * h + y) * w..(ch * h + y + 1) * w];
                            for (x, d) in drow.iter_mut().enumerate() {
                                *d = grow[x / f] * inv;
                            }
                        }
                    }
                    self.accumulate(&mut grads, a, ga);
                }
                &Op::Reshape(a) => self.accumulate(&mut grads, a, g),
            }
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g),
        }
    }
}

/// `g * broadcast(other)` laid out in the output shape.
fn scaled_by_other(g: &[f64], other: &Tensor, out: &[usize]) -> Vec<f64> {
    if other.shape() == out {
        g.iter().zip(other.data()).map(|(a, b)| a * b).collect()
    } else {
        let idx = kernels::broadcast_index(other.shape(), out);
        let d = other.data();
        g.iter().zip(idx).map(|(a, i)| a * d[i]).collect()
    }
}
