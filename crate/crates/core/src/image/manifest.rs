//! Dataset manifests: one `hr_path, lr_path, scale[, sr_path]` per line.
//!
//! Blank lines and lines starting with `#` are ignored. The optional fourth
//! column names a precomputed prediction to score instead of running the
//! model.

use std::path::{Path, PathBuf};

use super::ImageError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub hr: PathBuf,
    pub lr: PathBuf,
    pub scale: usize,
    pub sr: Option<PathBuf>,
}

fn err(line: usize, msg: impl Into<String>) -> ImageError {
    ImageError::Manifest { line, msg: msg.into() }
}

/// Parses manifest text. Paths are returned as written. Line numbers in
/// errors are 1-based.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>, ImageError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if !(3..=4).contains(&cols.len()) {
            return Err(err(line, format!("expected 3 or 4 columns, found {}", cols.len())));
        }
        if let Some(i) = cols.iter().position(|c| c.is_empty()) {
            return Err(err(line, format!("column {} is empty", i + 1)));
        }
        let scale: usize = cols[2]
            .parse()
            .map_err(|_| err(line, format!("scale {:?} is not an integer", cols[2])))?;
        if ![2, 4, 8].contains(&scale) {
            return Err(err(line, format!("scale {scale} not in {{2, 4, 8}}")));
        }
        out.push(ManifestEntry {
            hr: cols[0].into(),
            lr: cols[1].into(),
            scale,
            sr: cols.get(3).map(PathBuf::from),
        });
    }
    if out.is_empty() {
        return Err(err(0, "manifest has no entries"));
    }
    Ok(out)
}

/// Reads a manifest file, resolving relative paths against its directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>, ImageError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ImageError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut entries = parse_manifest(&text)?;
    for e in &mut entries {
        e.hr = base.join(&e.hr);
        e.lr = base.join(&e.lr);
        if let Some(sr) = &mut e.sr {
            *sr = base.join(&*sr);
        }
    }
    Ok(entries)
}

pub fn write_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        s.push_str(&format!("{}, {}, {}", e.hr.display(), e.lr.display(), e.scale));
        if let Some(sr) = &e.sr {
            s.push_str(&format!(", {}", sr.display()));
        }
        s.push('\n');
    }
    s
}
