//! Tape-free sampling helpers on plain tensors.

use super::{NumericsError, Tensor};

/// Samples a C×H×W map at P `(row, col)` locations, clamping to the border → P×C.
pub fn bilinear_sample(map: &Tensor, coords: &Tensor) -> Result<Tensor, NumericsError> {
    let mut tape = super::Tape::new();
    let m = tape.constant(map.clone())?;
    let c = tape.constant(coords.clone())?;
    let out = tape.bilinear_sample(m, c)?;
    Ok(tape.value(out).clone())
}

/// Rounds each `(row, col)` to the nearest lattice point (ties toward +∞),
/// clamps to the border and gathers from an H×W label map.
pub fn nearest_sample<T: Copy>(
    map: &[T],
    height: usize,
    width: usize,
    coords: &[(f64, f64)],
) -> Result<Vec<T>, NumericsError> {
    if map.len() != height * width || map.is_empty() {
        return Err(NumericsError::ShapeMismatch {
            op: "nearest_sample",
            detail: format!("{} labels for a {height}×{width} map", map.len()),
        });
    }
    let snap = |v: f64, extent: usize| -> usize {
        let r = (v + 0.5).floor();
        if r.is_nan() || r <= 0.0 {
            0
        } else {
            (r as usize).min(extent - 1)
        }
    };
    Ok(coords.iter().map(|&(y, x)| map[snap(y, height) * width + snap(x, width)]).collect())
}

/// Half-pixel-centre bilinear upsampling of a C×H×W map by an integer factor.
pub fn upsample_bilinear(x: &Tensor, factor: usize) -> Result<Tensor, NumericsError> {
    let (c, h, w) = match x.shape() {
        &[c, h, w] => (c, h, w),
        s => {
            return Err(NumericsError::ShapeMismatch { op: "upsample", detail: format!("expected C×H×W, got {s:?}") })
        }
    };
    if factor == 0 {
        return Err(NumericsError::InvalidArgument { op: "upsample", detail: "factor 0".into() });
    }
    Tensor::new(vec![c, h * factor, w * factor], super::tape::upsample_forward(x.data(), c, h, w, factor))
}

