//! Binary PPM (P6) images and PGM (P5) label maps, maxval 255 only.

use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{Field3, LabelMap, Shape};

fn header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n255\n").into_bytes()
}

pub fn encode_ppm(image: &Field3) -> Result<Vec<u8>> {
    if image.channels() != 3 {
        return Err(Error::InvalidShape(format!(
            "PPM needs 3 channels, got {}",
            image.channels()
        )));
    }
    let (h, w) = (image.height(), image.width());
    let mut out = header("P6", w, h);
    out.reserve(3 * h * w);
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                out.push((image.get(c, i, j).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn encode_pgm(label: &LabelMap) -> Vec<u8> {
    let mut out = header("P5", label.width(), label.height());
    out.extend_from_slice(label.as_slice());
    out
}

/// Parses `magic width height maxval` plus the single whitespace byte that
/// ends the header; returns `(width, height, payload offset)`.
fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<(usize, usize, usize)> {
    let malformed = |reason: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(malformed(format!(
            "expected magic {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for (n, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
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
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(malformed(format!("missing header field {}", n + 1)));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| malformed(format!("header field {} out of range", n + 1)))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(malformed("no whitespace after maxval".into())),
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 || w > 1 << 16 || h > 1 << 16 {
        return Err(malformed(format!("unsupported dimensions {w}x{h}")));
    }
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval {
            path: path.to_path_buf(),
            maxval: maxval.min(u32::MAX as u64) as u32,
        });
    }
    Ok((w as usize, h as usize, pos))
}

fn payload<'a>(bytes: &'a [u8], off: usize, expected: usize, path: &Path) -> Result<&'a [u8]> {
    let found = bytes.len() - off;
    if found < expected {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(&bytes[off..off + expected])
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Field3> {
    let (w, h, off) = parse_header(bytes, b"P6", path)?;
    let data = payload(bytes, off, 3 * w * h, path)?;
    let shape = Shape::new(3, h, w)?;
    Ok(Field3::from_fn(shape, |c, i, j| {
        data[3 * (i * w + j) + c] as f64 / 255.0
    }))
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<LabelMap> {
    let (w, h, off) = parse_header(bytes, b"P5", path)?;
    let data = payload(bytes, off, w * h, path)?;
    LabelMap::new(h, w, data.to_vec())
}

pub fn write_image(path: &Path, image: &Field3) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Field3> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

pub fn write_label(path: &Path, label: &LabelMap) -> Result<()> {
    std::fs::write(path, encode_pgm(label)).map_err(|e| Error::io(path, e))
}

pub fn read_label(path: &Path) -> Result<LabelMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}
