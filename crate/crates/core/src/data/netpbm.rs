//! Binary PPM (`P6`) images and PGM (`P5`) label maps with maxval 255.

use std::fs;
use std::path::Path;

use super::DataError;
use crate::boundary::LabelMap;
use crate::numerics::Tensor;

fn format_err(msg: impl Into<String>) -> DataError {
    DataError::Format(msg.into())
}

struct Header {
    width: usize,
    height: usize,
    payload: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header, DataError> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format_err(format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(format_err("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(format!("expected a number at byte {start}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text.parse().map_err(|_| format_err(format!("header number {text} out of range")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(format_err("missing whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format_err(format!("maxval {maxval} unsupported, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(format_err(format!("empty image {width}×{height}")));
    }
    Ok(Header { width, height, payload: pos })
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `3×H×W` image in `[0, 1]`, rounding each channel to 8 bits.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>, DataError> {
    let (h, w) = match *image.shape() {
        [3, h, w] => (h, w),
        ref s => return Err(DataError::Shape(format!("PPM needs a 3×H×W image, got {s:?}"))),
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    let plane = h * w;
    out.reserve(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            out.push(quantize(d[c * plane + p]));
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor, DataError> {
    let hd = parse_header(bytes, b"P6")?;
    let plane = hd.width * hd.height;
    let payload = &bytes[hd.payload..];
    if payload.len() < 3 * plane {
        return Err(format_err(format!("truncated payload: {} of {} bytes", payload.len(), 3 * plane)));
    }
    Ok(Tensor::from_fn(&[3, hd.height, hd.width], |i| {
        let (c, p) = (i / plane, i % plane);
        payload[3 * p + c] as f64 / 255.0
    }))
}

pub fn encode_pgm(labels: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    out.extend_from_slice(labels.labels());
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap, DataError> {
    let hd = parse_header(bytes, b"P5")?;
    let n = hd.width * hd.height;
    let payload = &bytes[hd.payload..];
    if payload.len() < n {
        return Err(format_err(format!("truncated payload: {} of {n} bytes", payload.len())));
    }
    Ok(LabelMap::new(hd.height, hd.width, payload[..n].to_vec())?)
}

pub fn save_ppm(path: &Path, image: &Tensor) -> Result<(), DataError> {
    Ok(fs::write(path, encode_ppm(image)?)?)
}

pub fn load_ppm(path: &Path) -> Result<Tensor, DataError> {
    decode_ppm(&fs::read(path)?)
}

pub fn save_pgm(path: &Path, labels: &LabelMap) -> Result<(), DataError> {
    Ok(fs::write(path, encode_pgm(labels))?)
}

pub fn load_pgm(path: &Path) -> Result<LabelMap, DataError> {
    decode_pgm(&fs::read(path)?)
}
