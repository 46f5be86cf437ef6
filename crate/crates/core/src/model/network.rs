//! Two-stage conditional U-Net with an ε head and an x₀ head.
//!
//! Input is the normalized state `z = (x - μ(y)) / σ`. Features from a
//! low-resolution encoder are projected and added at every stage. Residual
//! blocks are modulated by a scale and shift computed from the time
//! embedding. The x₀ head predicts a residual around the conditional mean:
//! `x0 = μ(y) + σ · head`.

use rand_distr::{Distribution, Normal};

use crate::rng::rng;
use crate::tensor::{Tape, Tensor, Var};

use super::{ModelConfig, ModelError};

const MAX_TIME_FREQ: f64 = 30.0;

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    conv1: Conv,
    conv2: Conv,
    scale: Dense,
    shift: Dense,
}

#[derive(Debug, Clone, Copy)]
struct LrBlock {
    conv1: Conv,
    conv2: Conv,
}

#[derive(Debug, Clone)]
struct Layout {
    temb1: Dense,
    temb2: Dense,
    conv_in: Conv,
    enc1: Vec<ResBlock>,
    down: Conv,
    enc2: Vec<ResBlock>,
    merge: Conv,
    dec1: Vec<ResBlock>,
    lr_in: Conv,
    lr_blocks: Vec<LrBlock>,
    lr_proj: [Conv; 3],
    eps_head: Conv,
    x0_head: Conv,
}

/// Parameter shapes and initial values, built in a fixed order. Without an
/// rng only shapes are recorded.
struct Builder {
    shapes: Vec<Vec<usize>>,
    init: Vec<Tensor>,
    rng: Option<crate::rng::Rng>,
}

impl Builder {
    fn tensor(&mut self, shape: &[usize], std: f64) -> usize {
        if let Some(rng) = &mut self.rng {
            let t = if std == 0.0 {
                Tensor::zeros(shape)
            } else {
                let d = Normal::new(0.0, std).expect("finite std");
                Tensor::from_fn(shape, |_| d.sample(rng))
            };
            self.init.push(t);
        }
        self.shapes.push(shape.to_vec());
        self.shapes.len() - 1
    }

    /// He-style init scaled by `gain`.
    fn conv(&mut self, cin: usize, cout: usize, k: usize, gain: f64) -> Conv {
        let std = gain * (2.0 / (cin * k * k) as f64).sqrt();
        Conv {
            w: self.tensor(&[cout, cin, k, k], std),
            b: self.tensor(&[cout, 1, 1], 0.0),
            pad: k / 2,
        }
    }

    fn dense(&mut self, fin: usize, fout: usize, gain: f64) -> Dense {
        let std = gain * (1.0 / fin as f64).sqrt();
        Dense {
            w: self.tensor(&[fin, fout], std),
            b: self.tensor(&[1, fout], 0.0),
        }
    }

    fn res_block(&mut self, c: usize, thid: usize) -> ResBlock {
        ResBlock {
            conv1: self.conv(c, c, 3, 1.0),
            conv2: self.conv(c, c, 3, 0.2),
            scale: self.dense(thid, c, 0.1),
            shift: self.dense(thid, c, 0.1),
        }
    }
}

fn build_layout(config: &ModelConfig, b: &mut Builder) -> Layout {
    let [c1, c2] = config.stage_channels;
    let (c, f, th) = (config.channels, config.lr_channels, config.time_hidden);
    Layout {
        temb1: b.dense(config.time_embed, th, 1.0),
        temb2: b.dense(th, th, 1.0),
        conv_in: b.conv(c, c1, 3, 1.0),
        enc1: (0..config.blocks).map(|_| b.res_block(c1, th)).collect(),
        down: b.conv(c1, c2, 1, 1.0),
        enc2: (0..config.blocks).map(|_| b.res_block(c2, th)).collect(),
        merge: b.conv(c1 + c2, c1, 1, 1.0),
        dec1: (0..config.blocks).map(|_| b.res_block(c1, th)).collect(),
        lr_in: b.conv(c, f, 3, 1.0),
        lr_blocks: (0..config.lr_blocks)
            .map(|_| LrBlock {
                conv1: b.conv(f, f, 3, 1.0),
                conv2: b.conv(f, f, 3, 0.2),
            })
            .collect(),
        lr_proj: [b.conv(f, c1, 1, 0.5), b.conv(f, c2, 1, 0.5), b.conv(f, c1, 1, 0.5)],
        eps_head: b.conv(c1, c, 3, 0.1),
        x0_head: b.conv(c1, c, 3, 0.1),
    }
}

impl ModelConfig {
    /// Parameter count of the network this config describes, computed
    /// without allocating it. The config must be valid.
    pub fn param_count(&self) -> usize {
        let mut b = Builder {
            shapes: Vec::new(),
            init: Vec::new(),
            rng: None,
        };
        build_layout(self, &mut b);
        b.shapes.iter().map(|s| s.iter().product::<usize>()).sum()
    }
}

/// Heads of the denoiser as tape variables, both HR-shaped.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub eps: Var,
    pub x0: Var,
}

/// Head values for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    pub eps: Tensor,
    pub x0: Tensor,
}

/// Inputs to one forward pass, already on the tape.
#[derive(Debug, Clone, Copy)]
pub struct NetInput {
    pub x: Var,
    pub lr: Var,
    pub mu: Var,
    /// Time divided by the horizon.
    pub t: f64,
    /// `sqrt(σ²)` of the process.
    pub sigma: f64,
}

#[derive(Debug, Clone)]
pub struct ScoreNetwork {
    config: ModelConfig,
    layout: Layout,
    params: Vec<Tensor>,
}

impl ScoreNetwork {
    /// Fresh network with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut b = Builder {
            shapes: Vec::new(),
            init: Vec::new(),
            rng: Some(rng(seed)),
        };
        let layout = build_layout(&config, &mut b);
        Ok(Self {
            config,
            layout,
            params: b.init,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Applies an in-place update to the parameter tensors. Panics if the
    /// update changes a shape.
    pub fn update_params(&mut self, f: impl FnOnce(&mut [Tensor])) {
        let shapes: Vec<Vec<usize>> = self.params.iter().map(|p| p.shape().to_vec()).collect();
        f(&mut self.params);
        assert!(
            self.params.iter().zip(&shapes).all(|(p, s)| p.shape() == s.as_slice()),
            "parameter update changed a shape"
        );
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        if flat.len() != self.param_count() {
            return Err(ModelError::ParamCount {
                expected: self.param_count(),
                found: flat.len(),
            });
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Network with the given architecture and flat parameters.
    pub fn from_flat(config: ModelConfig, flat: &[f64]) -> Result<Self, ModelError> {
        let mut net = Self::new(config, 0)?;
        net.set_flat_params(flat)?;
        Ok(net)
    }

    /// Registers every parameter tensor on `tape`, in layout order.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.clone(), requires_grad))
            .collect()
    }

    /// Checks that `[C, H, W]` inputs fit the architecture.
    pub fn check_shapes(&self, hr: &[usize], lr: &[usize]) -> Result<(), ModelError> {
        let s = self.config.scale;
        let ok = hr.len() == 3
            && lr.len() == 3
            && hr[0] == self.config.channels
            && lr[0] == hr[0]
            && hr[1] == lr[1] * s
            && hr[2] == lr[2] * s
            && hr[1].is_multiple_of(2)
            && hr[2].is_multiple_of(2);
        if ok {
            Ok(())
        } else {
            Err(ModelError::InputShape(format!(
                "hr {hr:?}, lr {lr:?} for {}",
                self.config
            )))
        }
    }

    /// Sinusoids of `t` at angular frequencies spaced geometrically in
    /// `[1, MAX_TIME_FREQ]`. The cap keeps the network smooth in `t`, which
    /// the ODE solvers rely on.
    fn embed_time(&self, t: f64) -> Tensor {
        let half = self.config.time_embed / 2;
        let mut out = vec![0.0; 2 * half];
        for k in 0..half {
            let frac = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
            let arg = t * MAX_TIME_FREQ.powf(frac);
            out[k] = arg.sin();
            out[half + k] = arg.cos();
        }
        Tensor::new(&[1, 2 * half], out).expect("embedding shape")
    }

    /// Records one forward pass and returns both heads.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], input: &NetInput) -> Result<HeadVars, ModelError> {
        if p.len() != self.params.len() {
            return Err(ModelError::ParamCount {
                expected: self.params.len(),
                found: p.len(),
            });
        }
        self.check_shapes(tape.shape(input.x), tape.shape(input.lr))?;
        let l = &self.layout;
        let conv = |tape: &mut Tape, c: Conv, x: Var| -> Result<Var, ModelError> {
            let y = tape.conv2d(x, p[c.w], c.pad)?;
            Ok(tape.add(y, p[c.b])?)
        };
        let dense = |tape: &mut Tape, d: Dense, x: Var| -> Result<Var, ModelError> {
            let y = tape.matmul(x, p[d.w])?;
            Ok(tape.add(y, p[d.b])?)
        };

        // time embedding
        let e = tape.constant(self.embed_time(input.t));
        let h = dense(tape, l.temb1, e)?;
        let h = tape.silu(h)?;
        let temb = dense(tape, l.temb2, h)?;
        let temb = tape.silu(temb)?;

        let block = |tape: &mut Tape, b: &ResBlock, x: Var| -> Result<Var, ModelError> {
            let c = tape.shape(x)[0];
            let h = tape.silu(x)?;
            let h = conv(tape, b.conv1, h)?;
            let s = dense(tape, b.scale, temb)?;
            let s = tape.reshape(s, &[c, 1, 1])?;
            let sh = dense(tape, b.shift, temb)?;
            let sh = tape.reshape(sh, &[c, 1, 1])?;
            let hs = tape.mul(h, s)?;
            let h = tape.add(h, hs)?;
            let h = tape.add(h, sh)?;
            let h = tape.silu(h)?;
            let h = conv(tape, b.conv2, h)?;
            Ok(tape.add(x, h)?)
        };

        // LR features at LR resolution
        let mut f = conv(tape, l.lr_in, input.lr)?;
        for b in &l.lr_blocks {
            let h = tape.silu(f)?;
            let h = conv(tape, b.conv1, h)?;
            let h = tape.silu(h)?;
            let h = conv(tape, b.conv2, h)?;
            f = tape.add(f, h)?;
        }
        let s = self.config.scale;
        let lr_feat = |tape: &mut Tape, proj: Conv, up: usize| -> Result<Var, ModelError> {
            let g = conv(tape, proj, f)?;
            Ok(if up == 1 { g } else { tape.upsample_nearest(g, up)? })
        };

        // z = (x - μ) / σ
        let z = tape.sub(input.x, input.mu)?;
        let z = tape.scale(z, 1.0 / input.sigma)?;

        let mut h = conv(tape, l.conv_in, z)?;
        let g = lr_feat(tape, l.lr_proj[0], s)?;
        h = tape.add(h, g)?;
        for b in &l.enc1 {
            h = block(tape, b, h)?;
        }
        let skip = h;
        let d = tape.avg_pool(h, 2)?;
        let mut h2 = conv(tape, l.down, d)?;
        let g = lr_feat(tape, l.lr_proj[1], s / 2)?;
        h2 = tape.add(h2, g)?;
        for b in &l.enc2 {
            h2 = block(tape, b, h2)?;
        }
        let u = tape.upsample_nearest(h2, 2)?;
        let cat = tape.concat_channels(skip, u)?;
        let mut h = conv(tape, l.merge, cat)?;
        let g = lr_feat(tape, l.lr_proj[2], s)?;
        h = tape.add(h, g)?;
        for b in &l.dec1 {
            h = block(tape, b, h)?;
        }
        let h = tape.silu(h)?;
        let eps = conv(tape, l.eps_head, h)?;
        let r = conv(tape, l.x0_head, h)?;
        let r = tape.scale(r, input.sigma)?;
        let x0 = tape.add(input.mu, r)?;
        Ok(HeadVars { eps, x0 })
    }

    /// Evaluates both heads without recording gradients.
    pub fn heads(&self, x: &Tensor, lr: &Tensor, mu: &Tensor, t: f64, sigma: f64) -> Result<Heads, ModelError> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let input = NetInput {
            x: tape.leaf(x.clone(), false),
            lr: tape.leaf(lr.clone(), false),
            mu: tape.leaf(mu.clone(), false),
            t,
            sigma,
        };
        let h = self.forward(&mut tape, &p, &input)?;
        Ok(Heads {
            eps: tape.value(h.eps).clone(),
            x0: tape.value(h.x0).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_tensor;

    fn inputs(cfg: &ModelConfig, hr: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
        let mut r = rng(seed);
        let lr_n = hr / cfg.scale;
        let lr = normal_tensor(&mut r, &[cfg.channels, lr_n, lr_n]).map(|v| 0.5 + 0.2 * v);
        let mu = crate::image::upscale(&lr, cfg.scale).unwrap();
        let x = normal_tensor(&mut r, mu.shape()).add(&mu).unwrap();
        (x, lr, mu)
    }

    #[test]
    fn parameter_counts() {
        let tiny = ScoreNetwork::new(ModelConfig::tiny(1, 2), 0).unwrap();
        assert!(tiny.param_count() <= 2000, "{}", tiny.param_count());
        let tex = ScoreNetwork::new(ModelConfig::texture(4), 0).unwrap();
        assert!(tex.param_count() > 50_000);
    }

    #[test]
    fn heads_are_hr_shaped_and_finite_over_seeds() {
        let cfg = ModelConfig::tiny(3, 4);
        for seed in 0..100 {
            let net = ScoreNetwork::new(cfg, seed).unwrap();
            let (x, lr, mu) = inputs(&cfg, 8, seed);
            let h = net.heads(&x, &lr, &mu, (seed as f64 / 100.0).max(1e-3), 0.3).unwrap();
            assert_eq!(h.eps.shape(), x.shape());
            assert_eq!(h.x0.shape(), x.shape());
            assert!(h.eps.all_finite() && h.x0.all_finite());
        }
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let cfg = ModelConfig::tiny(1, 2);
        let net = ScoreNetwork::new(cfg, 0).unwrap();
        let (x, lr, mu) = inputs(&cfg, 8, 0);
        let bad_lr = Tensor::zeros(&[1, 3, 3]);
        assert!(net.heads(&x, &bad_lr, &mu, 0.5, 1.0).is_err());
        let rgb = Tensor::zeros(&[3, 8, 8]);
        assert!(net.heads(&rgb, &lr, &rgb, 0.5, 1.0).is_err());
    }

    #[test]
    fn flat_params_round_trip() {
        let cfg = ModelConfig::tiny(1, 2);
        let a = ScoreNetwork::new(cfg, 1).unwrap();
        let b = ScoreNetwork::from_flat(cfg, &a.flat_params()).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
        let mut c = a.clone();
        assert!(c.set_flat_params(&[0.0; 3]).is_err());
    }

    #[test]
    fn seeds_give_distinct_deterministic_inits() {
        let cfg = ModelConfig::tiny(1, 2);
        let a = ScoreNetwork::new(cfg, 5).unwrap().flat_params();
        assert_eq!(a, ScoreNetwork::new(cfg, 5).unwrap().flat_params());
        assert_ne!(a, ScoreNetwork::new(cfg, 6).unwrap().flat_params());
    }

    #[test]
    fn output_depends_on_condition() {
        let cfg = ModelConfig::tiny(1, 2);
        let net = ScoreNetwork::new(cfg, 2).unwrap();
        let (x, lr, mu) = inputs(&cfg, 8, 3);
        let a = net.heads(&x, &lr, &mu, 0.5, 0.5).unwrap();
        let lr2 = lr.map(|v| 1.0 - v);
        let b = net.heads(&x, &lr2, &mu, 0.5, 0.5).unwrap();
        assert!(a.eps.max_abs_diff(&b.eps) > 0.0);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let cfg = ModelConfig::tiny(1, 2);
        let net = ScoreNetwork::new(cfg, 9).unwrap();
        let (x, lr, mu) = inputs(&cfg, 8, 4);
        let loss = |flat: &[f64]| -> (f64, Vec<f64>) {
            let n = ScoreNetwork::from_flat(cfg, flat).unwrap();
            let mut tape = Tape::new();
            let p = n.bind(&mut tape, true);
            let input = NetInput {
                x: tape.leaf(x.clone(), false),
                lr: tape.leaf(lr.clone(), false),
                mu: tape.leaf(mu.clone(), false),
                t: 0.3,
                sigma: 0.5,
            };
            let h = n.forward(&mut tape, &p, &input).unwrap();
            let a = tape.square(h.eps).unwrap();
            let b = tape.square(h.x0).unwrap();
            let a = tape.sum(a).unwrap();
            let b = tape.sum(b).unwrap();
            let l = tape.add(a, b).unwrap();
            let val = tape.value(l).item();
            let mut g = tape.backward(l).unwrap();
            let grad = p
                .iter()
                .zip(n.params())
                .flat_map(|(&v, t)| g.take_or_zeros(v, t.shape()).into_data())
                .collect();
            (val, grad)
        };
        let theta = net.flat_params();
        let (_, grad) = loss(&theta);
        let h = 1e-5;
        for i in (0..theta.len()).step_by(7) {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[i] += h;
            tm[i] -= h;
            let fd = (loss(&tp).0 - loss(&tm).0) / (2.0 * h);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(err < 1e-4, "param {i}: fd {fd} vs {}", grad[i]);
        }
    }
}
