//! Binary PGM (`P5`) and PPM (`P6`) with maxval 255.

use std::path::Path;

use crate::tensor::Tensor;

use super::ImageError;

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, ImageError> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        other => {
            return Err(ImageError::Header(format!(
                "unknown magic {:?}",
                other.map(String::from_utf8_lossy).unwrap_or_default()
            )))
        }
    };
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments before each field; at least one separator
        let before = pos;
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        if pos == before {
            return Err(ImageError::Header(format!("missing separator before field {i}")));
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let digits = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        *field = digits
            .parse()
            .map_err(|_| ImageError::Header(format!("field {i} is not a number")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(ImageError::Header("no whitespace after maxval".into())),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(ImageError::Header(format!("zero size {width}x{height}")));
    }
    if maxval != 255 {
        return Err(ImageError::Maxval(maxval));
    }
    Ok(Header {
        channels,
        width: width as usize,
        height: height as usize,
        data_start: pos,
    })
}

/// Decodes a PGM/PPM byte buffer into a `[C, H, W]` tensor with values `/255`.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor, ImageError> {
    let h = parse_header(bytes)?;
    let plane = h
        .width
        .checked_mul(h.height)
        .filter(|p| p.checked_mul(h.channels).is_some())
        .ok_or_else(|| ImageError::Header("dimensions overflow".into()))?;
    let expected = plane * h.channels;
    let body = &bytes[h.data_start..];
    if body.len() < expected {
        return Err(ImageError::Truncated {
            expected,
            found: body.len(),
        });
    }
    // interleaved RGB to planar
    let mut data = vec![0.0; expected];
    for (i, &b) in body[..expected].iter().enumerate() {
        let (pix, ch) = (i / h.channels, i % h.channels);
        data[ch * plane + pix] = f64::from(b) / 255.0;
    }
    Ok(Tensor::new(&[h.channels, h.height, h.width], data)?)
}

/// Encodes a 1- or 3-channel image; values are clamped to `[0, 1]` and rounded.
pub fn encode_pnm(img: &Tensor) -> Result<Vec<u8>, ImageError> {
    let s = img.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(ImageError::Shape(format!("PNM needs [1|3, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let data = img.data();
    out.reserve(c * plane);
    for pix in 0..plane {
        for ch in 0..c {
            let v = data[ch * plane + pix];
            // NaN maps to 0
            let q = (v.clamp(0.0, 1.0) * 255.0).round();
            out.push(if q.is_nan() { 0 } else { q as u8 });
        }
    }
    Ok(out)
}

fn check_extension(path: &Path, channels: Option<usize>) -> Result<(), ImageError> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    let ok = matches!(
        (ext.as_deref(), channels),
        (Some("pgm"), Some(1)) | (Some("ppm"), Some(3)) | (Some("pgm" | "ppm"), None)
    );
    if ok {
        Ok(())
    } else {
        Err(ImageError::Shape(format!(
            "{}: expected a .pgm (1 channel) or .ppm (3 channel) path",
            path.display()
        )))
    }
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<Tensor, ImageError> {
    let path = path.as_ref();
    check_extension(path, None)?;
    let bytes = std::fs::read(path).map_err(|e| ImageError::io(path, e))?;
    decode_pnm(&bytes)
}

pub fn write_pnm(path: impl AsRef<Path>, img: &Tensor) -> Result<(), ImageError> {
    let path = path.as_ref();
    check_extension(path, img.shape().first().copied())?;
    let bytes = encode_pnm(img)?;
    std::fs::write(path, bytes).map_err(|e| ImageError::io(path, e))
}
