//! Fixed image-to-feature maps for the quality loss.

use rand_distr::{Distribution, Normal};

use crate::rng::rng;
use crate::tensor::{Tape, Tensor, TensorError, Var};

use super::TrainError;

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Identity,
    /// Three 3×3 convolutions with ReLU between them; `(weight, bias)` each.
    RandomConv(Vec<(Tensor, Tensor)>),
}

/// A deterministic, untrained feature map `F`.
///
/// Descriptors are `identity` or `randconv c=<channels> width=<w> seed=<s>`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    kind: Kind,
    descriptor: String,
}

impl FeatureExtractor {
    pub fn identity() -> Self {
        Self {
            kind: Kind::Identity,
            descriptor: "identity".into(),
        }
    }

    /// He-initialised weights drawn from `seed`; biases are zero.
    pub fn random_conv(channels: usize, width: usize, seed: u64) -> Result<Self, TrainError> {
        if channels == 0 || width == 0 || width > 256 {
            return Err(TrainError::Features(format!("bad sizes c={channels} width={width}")));
        }
        let mut r = rng(seed);
        let mut layers = Vec::with_capacity(3);
        let mut cin = channels;
        for _ in 0..3 {
            let std = (2.0 / (9 * cin) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let w = Tensor::from_fn(&[width, cin, 3, 3], |_| normal.sample(&mut r));
            layers.push((w, Tensor::zeros(&[width, 1, 1])));
            cin = width;
        }
        Ok(Self {
            kind: Kind::RandomConv(layers),
            descriptor: format!("randconv c={channels} width={width} seed={seed}"),
        })
    }

    pub fn from_descriptor(s: &str) -> Result<Self, TrainError> {
        let mut words = s.split_whitespace();
        match words.next() {
            Some("identity") if words.next().is_none() => Ok(Self::identity()),
            Some("randconv") => {
                let (mut c, mut width, mut seed) = (None, None, None);
                for w in words {
                    let (k, v) = w
                        .split_once('=')
                        .ok_or_else(|| TrainError::Features(format!("expected key=value, got {w:?}")))?;
                    let slot = match k {
                        "c" => &mut c,
                        "width" => &mut width,
                        "seed" => &mut seed,
                        _ => return Err(TrainError::Features(format!("unknown key {k:?}"))),
                    };
                    if slot.is_some() {
                        return Err(TrainError::Features(format!("duplicate key {k:?}")));
                    }
                    let n: u64 = v
                        .parse()
                        .map_err(|_| TrainError::Features(format!("{k}: not an integer: {v:?}")))?;
                    *slot = Some(n);
                }
                match (c, width, seed) {
                    (Some(c), Some(w), Some(s)) => Self::random_conv(c as usize, w as usize, s),
                    _ => Err(TrainError::Features("randconv needs c, width and seed".into())),
                }
            }
            _ => Err(TrainError::Features(format!("unknown feature extractor {s:?}"))),
        }
    }

    pub fn descriptor(&self) -> &str {
        &self.descriptor
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor, TrainError> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let f = self.apply_var(&mut tape, v)?;
        Ok(tape.value(f).clone())
    }

    /// Records `F(x)`; the weights enter as constants.
    pub fn apply_var(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let Kind::RandomConv(layers) = &self.kind else {
            return Ok(x);
        };
        let mut h = x;
        for (i, (w, b)) in layers.iter().enumerate() {
            if i > 0 {
                h = tape.relu(h)?;
            }
            let wv = tape.constant(w.clone());
            let bv = tape.constant(b.clone());
            h = tape.conv2d(h, wv, 1)?;
            h = tape.add(h, bv)?;
        }
        Ok(h)
    }
}
