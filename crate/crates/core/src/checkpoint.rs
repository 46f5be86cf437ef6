//! Binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "ECDPCKPT"
//! version    u32
//! desc_len   u32
//! descriptor desc_len bytes of UTF-8
//! beta0, beta_t, horizon, sigma2, c   5 × f64
//! step       u64
//! count      u64
//! params     count × f64
//! ```
//!
//! The descriptor is the network descriptor followed by ` param=<name>`.

use std::path::{Path, PathBuf};

use crate::model::{HybridConfig, ModelConfig, ModelError, Parametrization, ScoreNetwork};
use crate::process::{BetaSchedule, ConditionalForwardProcess, ProcessError};

pub const MAGIC: &[u8; 8] = b"ECDPCKPT";
pub const VERSION: u32 = 1;
/// Longest accepted descriptor, in bytes.
const MAX_DESCRIPTOR: usize = 4096;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: magic bytes {found:02x?}")]
    Magic { found: Vec<u8> },
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("truncated checkpoint: needed {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("parameter count {found} does not match architecture ({expected})")]
    CountMismatch { expected: usize, found: usize },
    #[error("{0} trailing bytes after parameters")]
    Trailing(usize),
    #[error("bad descriptor: {0}")]
    Descriptor(String),
    #[error("bad constants: {0}")]
    Constants(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub parametrization: Parametrization,
    pub beta0: f64,
    pub beta_t: f64,
    pub horizon: f64,
    pub sigma2: f64,
    /// Optimizer steps completed.
    pub step: u64,
    pub params: Vec<f64>,
}

fn hybrid_c(p: Parametrization) -> f64 {
    match p {
        Parametrization::Hybrid(h) => h.c(),
        _ => HybridConfig::DEFAULT.c(),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(CheckpointError::Truncated {
                expected: self.pos.saturating_add(n),
                found: self.buf.len(),
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn new(
        net: &ScoreNetwork,
        process: &ConditionalForwardProcess,
        parametrization: Parametrization,
        step: u64,
    ) -> Self {
        Self {
            config: *net.config(),
            parametrization,
            beta0: process.schedule.beta0(),
            beta_t: process.schedule.beta_t(),
            horizon: process.schedule.horizon(),
            sigma2: process.sigma2(),
            step,
            params: net.flat_params(),
        }
    }

    pub fn descriptor(&self) -> String {
        format!("{} param={}", self.config.descriptor(), self.parametrization.name())
    }

    pub fn network(&self) -> Result<ScoreNetwork, ModelError> {
        ScoreNetwork::from_flat(self.config, &self.params)
    }

    pub fn process(&self) -> Result<ConditionalForwardProcess, ProcessError> {
        let schedule = BetaSchedule::new(self.beta0, self.beta_t, self.horizon)?;
        ConditionalForwardProcess::new(schedule, self.sigma2, self.config.scale)
    }

    pub fn encode(&self) -> Vec<u8> {
        let desc = self.descriptor();
        let mut out = Vec::with_capacity(8 + 4 + 4 + desc.len() + 5 * 8 + 16 + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
        out.extend_from_slice(desc.as_bytes());
        for v in [
            self.beta0,
            self.beta_t,
            self.horizon,
            self.sigma2,
            hybrid_c(self.parametrization),
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    /// Parses and validates a whole checkpoint; nothing is returned on error.
    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r
            .take(8)
            .map_err(|_| CheckpointError::Magic { found: bytes.to_vec() })?;
        if magic != MAGIC {
            return Err(CheckpointError::Magic { found: magic.to_vec() });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let len = r.u32()? as usize;
        if len > MAX_DESCRIPTOR {
            return Err(CheckpointError::Descriptor(format!(
                "length {len} exceeds {MAX_DESCRIPTOR}"
            )));
        }
        let desc = std::str::from_utf8(r.take(len)?).map_err(|e| CheckpointError::Descriptor(e.to_string()))?;
        let (arch, param) = desc
            .rsplit_once(" param=")
            .ok_or_else(|| CheckpointError::Descriptor(format!("missing param= in {desc:?}")))?;
        let config = ModelConfig::from_descriptor(arch).map_err(|e| CheckpointError::Descriptor(e.to_string()))?;
        let [beta0, beta_t, horizon, sigma2, c] = [r.f64()?, r.f64()?, r.f64()?, r.f64()?, r.f64()?];
        let parametrization = match param {
            "eps" => Parametrization::Eps,
            "x0" => Parametrization::X0,
            "hybrid" => {
                Parametrization::Hybrid(HybridConfig::new(c).map_err(|e| CheckpointError::Constants(e.to_string()))?)
            }
            other => {
                return Err(CheckpointError::Descriptor(format!(
                    "unknown parametrization {other:?}"
                )))
            }
        };
        let step = r.u64()?;
        let count = r.u64()?;
        let expected = config.param_count();
        if count != expected as u64 {
            return Err(CheckpointError::CountMismatch {
                expected,
                found: usize::try_from(count).unwrap_or(usize::MAX),
            });
        }
        let raw = r.take(expected * 8)?;
        let params = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        if r.pos != bytes.len() {
            return Err(CheckpointError::Trailing(bytes.len() - r.pos));
        }
        let ckpt = Self {
            config,
            parametrization,
            beta0,
            beta_t,
            horizon,
            sigma2,
            step,
            params,
        };
        ckpt.process().map_err(|e| CheckpointError::Constants(e.to_string()))?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.encode()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let net = ScoreNetwork::new(ModelConfig::tiny(3, 4), 9).unwrap();
        let process = ConditionalForwardProcess::new(BetaSchedule::default(), 0.0123, 4).unwrap();
        let param = Parametrization::Hybrid(HybridConfig::new(1.5).unwrap());
        Checkpoint::new(&net, &process, param, 77)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.encode();
        assert_eq!(&bytes[..8], MAGIC);
        let d = Checkpoint::decode(&bytes).unwrap();
        assert!(c.params.iter().zip(&d.params).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(c, d);
        assert_eq!(d.encode(), bytes);
        assert_eq!(d.network().unwrap().flat_params(), c.params);
        assert_eq!(d.process().unwrap().sigma2(), 0.0123);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
    }

    #[test]
    fn every_parametrization_round_trips() {
        for p in [Parametrization::Eps, Parametrization::X0] {
            let c = Checkpoint {
                parametrization: p,
                ..sample()
            };
            assert_eq!(Checkpoint::decode(&c.encode()).unwrap().parametrization, p);
        }
    }

    #[test]
    fn truncation_is_reported_at_every_length() {
        let bytes = sample().encode();
        for n in [0, 5, 8, 11, 15, 40, bytes.len() - 1] {
            match Checkpoint::decode(&bytes[..n]) {
                Err(CheckpointError::Truncated { found, .. }) => assert_eq!(found, n),
                Err(CheckpointError::Magic { .. }) if n < 8 => {}
                other => panic!("length {n}: {other:?}"),
            }
        }
    }

    #[test]
    fn distinct_errors() {
        let bytes = sample().encode();
        let mut bad = bytes.clone();
        bad[..8].copy_from_slice(b"NOTACKPT");
        let err = Checkpoint::decode(&bad).unwrap_err();
        assert!(matches!(err, CheckpointError::Magic { .. }));
        assert!(err.to_string().contains("4e, 4f, 54"), "{err}");

        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(matches!(
            Checkpoint::decode(&bad),
            Err(CheckpointError::Version { found: 2 })
        ));

        let c = sample();
        let desc_len = c.descriptor().len();
        let count_at = 16 + desc_len + 5 * 8 + 8;
        let mut bad = bytes.clone();
        bad[count_at..count_at + 8].copy_from_slice(&5u64.to_le_bytes());
        assert!(matches!(
            Checkpoint::decode(&bad),
            Err(CheckpointError::CountMismatch { found: 5, .. })
        ));

        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(Checkpoint::decode(&bad), Err(CheckpointError::Trailing(1))));

        let mut bad = bytes;
        let sigma_at = 16 + desc_len + 3 * 8;
        bad[sigma_at..sigma_at + 8].copy_from_slice(&(-1.0f64).to_le_bytes());
        assert!(matches!(Checkpoint::decode(&bad), Err(CheckpointError::Constants(_))));
    }

    #[test]
    fn load_missing_file_names_path() {
        let err = Checkpoint::load(Path::new("/nonexistent/x.ckpt")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.ckpt"));
    }

    proptest! {
        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = Checkpoint::decode(&bytes);
        }

        #[test]
        fn decode_of_corrupted_checkpoint_never_panics(idx in 0usize..200, byte in any::<u8>()) {
            let mut bytes = sample().encode();
            let i = idx % bytes.len();
            bytes[i] = byte;
            let _ = Checkpoint::decode(&bytes);
        }
    }
}
