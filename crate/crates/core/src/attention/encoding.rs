use crate::numerics::{GridLevel, NumericsError, Tensor};

/// Learned per-scale embedding table (`L×d_model`); the positional part is fixed.
#[derive(Clone, Debug)]
pub struct Encodings {
    pub scale_embedding: Tensor,
}

impl Encodings {
    pub fn zeros(levels: usize, d_model: usize) -> Self {
        Self { scale_embedding: Tensor::zeros(&[levels, d_model]) }
    }

    pub fn positional(&self, height: usize, width: usize) -> Result<Tensor, NumericsError> {
        sine_positional_encoding(height, width, self.scale_embedding.shape()[1])
    }
}

/// Fixed 2-D sinusoidal encoding, `(H·W)×d_model`.
///
/// The first `d_model/2` channels encode the row index and the rest the column
/// index; within each half, channel `2i` is `sin(p·ω_i)` and `2i+1` is
/// `cos(p·ω_i)` with `ω_i = 10000^(−2i/(d_model/2))`.
pub fn sine_positional_encoding(height: usize, width: usize, d_model: usize) -> Result<Tensor, NumericsError> {
    if d_model == 0 || !d_model.is_multiple_of(4) {
        return Err(NumericsError::InvalidArgument {
            op: "sine_positional_encoding",
            detail: format!("d_model {d_model} is not a positive multiple of 4"),
        });
    }
    let half = d_model / 2;
    let freqs: Vec<f64> = (0..half / 2).map(|i| 10000f64.powf(-((2 * i) as f64) / half as f64)).collect();
    let mut out = Vec::with_capacity(height * width * d_model);
    for r in 0..height {
        for c in 0..width {
            for p in [r as f64, c as f64] {
                for &f in &freqs {
                    out.push((p * f).sin());
                    out.push((p * f).cos());
                }
            }
        }
    }
    Tensor::new(vec![height * width, d_model], out)
}

/// Positional encodings of every scale stacked in sequence order.
pub fn pyramid_position_encoding(shapes: &[(usize, usize)], d_model: usize) -> Result<Tensor, NumericsError> {
    let mut data = Vec::new();
    let mut rows = 0;
    for &(h, w) in shapes {
        data.extend(sine_positional_encoding(h, w, d_model)?.into_data());
        rows += h * w;
    }
    Tensor::new(vec![rows, d_model], data)
}

/// Row ranges of consecutive scales inside a flattened sequence.
pub fn level_rows(shapes: &[(usize, usize)]) -> Vec<GridLevel> {
    let mut start = 0;
    shapes
        .iter()
        .map(|&(height, width)| {
            let lv = GridLevel { start, height, width };
            start += height * width;
            lv
        })
        .collect()
}
