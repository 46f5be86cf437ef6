use std::fmt;

use super::ModelError;

/// Architecture of a [`ScoreNetwork`](super::ScoreNetwork).
///
/// The text form is the descriptor stored in checkpoints, e.g.
/// `unet2 c=3 ch=16,32 blocks=2 lr_ch=32 lr_blocks=4 temb=32 thid=64 scale=4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Image channels.
    pub channels: usize,
    /// Feature channels at full and half resolution.
    pub stage_channels: [usize; 2],
    /// Residual blocks per stage, in both encoder and decoder.
    pub blocks: usize,
    pub lr_channels: usize,
    pub lr_blocks: usize,
    /// Sinusoidal embedding width; must be even.
    pub time_embed: usize,
    pub time_hidden: usize,
    /// Super-resolution factor.
    pub scale: usize,
}

const ARCH: &str = "unet2";

impl ModelConfig {
    /// Default texture-task network.
    pub fn texture(scale: usize) -> Self {
        Self {
            channels: 3,
            stage_channels: [16, 32],
            blocks: 2,
            lr_channels: 32,
            lr_blocks: 4,
            time_embed: 32,
            time_hidden: 64,
            scale,
        }
    }

    /// Default single-channel toy network.
    pub fn toy(scale: usize) -> Self {
        Self {
            channels: 1,
            stage_channels: [16, 32],
            blocks: 2,
            lr_channels: 16,
            lr_blocks: 2,
            time_embed: 32,
            time_hidden: 32,
            scale,
        }
    }

    /// A network of about 1350 parameters for gradient oracles.
    pub fn tiny(channels: usize, scale: usize) -> Self {
        Self {
            channels,
            stage_channels: [4, 4],
            blocks: 1,
            lr_channels: 2,
            lr_blocks: 1,
            time_embed: 4,
            time_hidden: 4,
            scale,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Descriptor(m));
        if self.channels == 0 || self.stage_channels.contains(&0) || self.lr_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.blocks == 0 {
            return bad("blocks must be positive".into());
        }
        if self.time_embed == 0 || !self.time_embed.is_multiple_of(2) || self.time_hidden == 0 {
            return bad(format!("temb {} must be positive and even", self.time_embed));
        }
        if ![2, 4, 8].contains(&self.scale) {
            return bad(format!("scale {} not in {{2, 4, 8}}", self.scale));
        }
        // keeps the parameter count well inside memory for hostile inputs
        let widest = [
            self.channels,
            self.stage_channels[0],
            self.stage_channels[1],
            self.lr_channels,
        ]
        .into_iter()
        .chain([self.time_embed, self.time_hidden])
        .max()
        .unwrap_or(0);
        if widest > 1024 || self.blocks > 64 || self.lr_blocks > 64 {
            return bad("network too large".into());
        }
        Ok(())
    }

    pub fn descriptor(&self) -> String {
        self.to_string()
    }

    pub fn from_descriptor(s: &str) -> Result<Self, ModelError> {
        let mut tokens = s.split_whitespace();
        match tokens.next() {
            Some(ARCH) => {}
            other => {
                return Err(ModelError::Descriptor(format!(
                    "unknown architecture {:?}",
                    other.unwrap_or("")
                )))
            }
        }
        let mut cfg = [None::<usize>; 7];
        let mut ch = None;
        const KEYS: [&str; 7] = ["c", "blocks", "lr_ch", "lr_blocks", "temb", "thid", "scale"];
        for tok in tokens {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| ModelError::Descriptor(format!("token {tok:?} is not key=value")))?;
            let num = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| ModelError::Descriptor(format!("{k}: {v:?} is not an integer")))
            };
            if k == "ch" {
                let (a, b) = v
                    .split_once(',')
                    .ok_or_else(|| ModelError::Descriptor(format!("ch: expected two values, got {v:?}")))?;
                if ch.replace([num(a)?, num(b)?]).is_some() {
                    return Err(ModelError::Descriptor("duplicate key ch".into()));
                }
                continue;
            }
            let i = KEYS
                .iter()
                .position(|&key| key == k)
                .ok_or_else(|| ModelError::Descriptor(format!("unknown key {k:?}")))?;
            if cfg[i].replace(num(v)?).is_some() {
                return Err(ModelError::Descriptor(format!("duplicate key {k}")));
            }
        }
        let get = |i: usize| cfg[i].ok_or_else(|| ModelError::Descriptor(format!("missing key {}", KEYS[i])));
        let out = Self {
            channels: get(0)?,
            stage_channels: ch.ok_or_else(|| ModelError::Descriptor("missing key ch".into()))?,
            blocks: get(1)?,
            lr_channels: get(2)?,
            lr_blocks: get(3)?,
            time_embed: get(4)?,
            time_hidden: get(5)?,
            scale: get(6)?,
        };
        out.validate()?;
        Ok(out)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{ARCH} c={} ch={},{} blocks={} lr_ch={} lr_blocks={} temb={} thid={} scale={}",
            self.channels,
            self.stage_channels[0],
            self.stage_channels[1],
            self.blocks,
            self.lr_channels,
            self.lr_blocks,
            self.time_embed,
            self.time_hidden,
            self.scale
        )
    }
}
