//! Image plumbing: resampling, metrics, file formats and synthetic data.
//!
//! Images are `[C, H, W]` tensors with nominal range `[0, 1]`.

mod dataset;
mod manifest;
mod metrics;
mod pnm;
mod resize;

pub use dataset::{make_synthetic_dataset, write_dataset, DatasetKind, SrSample};
pub use manifest::{load_manifest, parse_manifest, write_manifest, ManifestEntry};
pub use metrics::{grayscale, psnr, ssim, PSNR_CAP};
pub use pnm::{decode_pnm, encode_pnm, read_pnm, write_pnm};
pub use resize::{bicubic_resize, downscale, upscale};

use std::path::PathBuf;

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("image shape: {0}")]
    Shape(String),
    #[error("malformed PNM header: {0}")]
    Header(String),
    #[error("unsupported PNM maxval {0} (only 255 is supported)")]
    Maxval(u32),
    #[error("PNM pixel data truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl ImageError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ImageError::Io {
            path: path.into(),
            source,
        }
    }
}
