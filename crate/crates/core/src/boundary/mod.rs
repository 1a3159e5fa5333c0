//! Boundary supervision and refinement: exact distance transforms of label
//! maps, boundary/direction targets, direction bins decoded to pixel offsets,
//! and label or logit maps shifted along those offsets.

pub mod bench;

use std::f64::consts::TAU;

use crate::numerics::{nearest_sample, NumericsError, Tape, Tensor, Var};

/// Label value excluded from every loss and metric.
pub const IGNORE: u8 = 255;
/// Direction bins; bin `k` is centred on the angle `k·45°` measured from +x
/// with the row axis pointing down.
pub const DIRECTION_BINS: usize = 8;
pub const DEFAULT_GAMMA: f64 = 2.0;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum BoundaryError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Row-major `H×W` class ids, with [`IGNORE`] marking unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self, BoundaryError> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(BoundaryError::Shape(format!("{} labels for a {height}×{width} map", labels.len())));
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        assert!(height > 0 && width > 0, "empty label map");
        Self { height, width, labels: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.labels[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        self.labels[r * self.width + c] = v;
    }

    /// Fails if any non-ignore label is `≥ classes`.
    pub fn check_classes(&self, classes: usize) -> Result<(), BoundaryError> {
        match self.labels.iter().find(|&&l| l != IGNORE && l as usize >= classes) {
            Some(l) => Err(BoundaryError::InvalidArgument(format!("label {l} with {classes} classes"))),
            None => Ok(()),
        }
    }

    /// Per-pixel targets for a cross-entropy term.
    pub fn targets(&self) -> Vec<Option<usize>> {
        self.labels.iter().map(|&l| (l != IGNORE).then_some(l as usize)).collect()
    }
}

/// Per-pixel distance to the nearest pixel holding a different non-ignore
/// label. Pixels with no such pixel, and ignore pixels, hold `+∞`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// Fewer than two distinct labels: every distance is `+∞`.
    pub single_label: bool,
}

/// One-dimensional squared distance transform of the sampled function `f`
/// (lower envelope of parabolas); `+∞` entries contribute no parabola.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        let qf = q as f64;
        let mut s = f64::NEG_INFINITY;
        while let Some(&p) = v.last() {
            let pf = p as f64;
            s = ((fq + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf));
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
                s = f64::NEG_INFINITY;
            } else {
                break;
            }
        }
        v.push(q);
        z.push(s);
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while k + 1 < v.len() && z[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance to the nearest `true` pixel of `features`.
fn squared_edt(features: &[bool], height: usize, width: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = features.iter().map(|&f| if f { 0.0 } else { f64::INFINITY }).collect();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let mut col = vec![0.0; height];
    let mut col_out = vec![0.0; height];
    for c in 0..width {
        for r in 0..height {
            col[r] = grid[r * width + c];
        }
        edt_1d(&col, &mut col_out, &mut v, &mut z);
        for r in 0..height {
            grid[r * width + c] = col_out[r];
        }
    }
    let mut row_out = vec![0.0; width];
    for r in 0..height {
        edt_1d(&grid[r * width..(r + 1) * width], &mut row_out, &mut v, &mut z);
        grid[r * width..(r + 1) * width].copy_from_slice(&row_out);
    }
    grid
}

pub fn distance_transform(labels: &LabelMap) -> DistanceMap {
    let (h, w) = (labels.height, labels.width);
    let mut present = [false; 256];
    for &l in &labels.labels {
        present[l as usize] = true;
    }
    present[IGNORE as usize] = false;
    let classes: Vec<u8> = (0..=254u8).filter(|&l| present[l as usize]).collect();
    let mut values = vec![f64::INFINITY; h * w];
    if classes.len() >= 2 {
        for &a in &classes {
            let features: Vec<bool> = labels.labels.iter().map(|&l| l != a && l != IGNORE).collect();
            let sq = squared_edt(&features, h, w);
            for (i, &l) in labels.labels.iter().enumerate() {
                if l == a {
                    values[i] = sq[i].sqrt();
                }
            }
        }
    }
    DistanceMap { height: h, width: w, values, single_label: classes.len() < 2 }
}

/// Bin whose sector contains `angle` (radians, counter-clockwise from +x).
pub fn quantize_angle(angle: f64) -> usize {
    let sector = TAU / DIRECTION_BINS as f64;
    ((angle / sector).round() as i64).rem_euclid(DIRECTION_BINS as i64) as usize
}

/// Unit compass step `(dy, dx)` of a direction bin.
pub fn bin_to_offset(bin: usize) -> Result<(i32, i32), BoundaryError> {
    const TABLE: [(i32, i32); DIRECTION_BINS] = [(0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1)];
    TABLE.get(bin).copied().ok_or_else(|| BoundaryError::InvalidArgument(format!("direction bin {bin} ≥ {DIRECTION_BINS}")))
}

/// Angle of a `(dy, dx)` step with the row axis pointing down.
pub fn offset_angle(dy: f64, dx: f64) -> f64 {
    (-dy).atan2(dx)
}

/// Sobel derivatives `(d/drow, d/dcol)` at `(r, c)` with replicated borders;
/// infinite neighbours are replaced by the centre value.
fn sobel(values: &[f64], h: usize, w: usize, r: usize, c: usize) -> (f64, f64) {
    let centre = values[r * w + c];
    let at = |dr: i64, dc: i64| {
        let rr = (r as i64 + dr).clamp(0, h as i64 - 1) as usize;
        let cc = (c as i64 + dc).clamp(0, w as i64 - 1) as usize;
        let v = values[rr * w + cc];
        if v.is_finite() {
            v
        } else {
            centre
        }
    };
    let d_col = (at(-1, 1) + 2.0 * at(0, 1) + at(1, 1)) - (at(-1, -1) + 2.0 * at(0, -1) + at(1, -1));
    let d_row = (at(1, -1) + 2.0 * at(1, 0) + at(1, 1)) - (at(-1, -1) + 2.0 * at(-1, 0) + at(-1, 1));
    (d_row, d_col)
}

/// Boundary mask, direction bins and decoded offsets for one label map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoundaryTargets {
    pub height: usize,
    pub width: usize,
    pub boundary: Vec<bool>,
    /// Bin pointing toward the interior of the pixel's own region; set exactly
    /// where `boundary` is.
    pub direction: Vec<Option<u8>>,
    pub offsets: Vec<(i8, i8)>,
}

impl BoundaryTargets {
    pub fn boundary_targets(&self) -> Vec<Option<f64>> {
        self.boundary.iter().map(|&b| Some(if b { 1.0 } else { 0.0 })).collect()
    }

    pub fn direction_targets(&self) -> Vec<Option<usize>> {
        self.direction.iter().map(|d| d.map(usize::from)).collect()
    }

    /// Boundary probabilities (`H×W`) and one-hot direction logits (`m×H×W`)
    /// that reproduce these targets exactly.
    pub fn oracle_inputs(&self) -> (Tensor, Tensor) {
        let n = self.height * self.width;
        let prob = Tensor::from_fn(&[self.height, self.width], |i| if self.boundary[i] { 1.0 } else { 0.0 });
        let dir = Tensor::from_fn(&[DIRECTION_BINS, self.height, self.width], |i| match self.direction[i % n] {
            Some(b) if b as usize == i / n => 1.0,
            _ => 0.0,
        });
        (prob, dir)
    }
}

/// Marks pixels within `gamma` of another label and assigns each the bin of
/// the distance gradient, which points into the pixel's own region.
pub fn make_boundary_targets(labels: &LabelMap, gamma: f64) -> Result<BoundaryTargets, BoundaryError> {
    if !(gamma > 0.0) {
        return Err(BoundaryError::InvalidArgument(format!("gamma {gamma} must be positive")));
    }
    let dt = distance_transform(labels);
    let (h, w) = (dt.height, dt.width);
    let mut boundary = vec![false; h * w];
    let mut direction = vec![None; h * w];
    let mut offsets = vec![(0i8, 0i8); h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if dt.values[i] > gamma {
                continue;
            }
            let (dr, dc) = sobel(&dt.values, h, w, r, c);
            let bin = if dr == 0.0 && dc == 0.0 { 0 } else { quantize_angle(offset_angle(dr, dc)) };
            let (oy, ox) = bin_to_offset(bin)?;
            boundary[i] = true;
            direction[i] = Some(bin as u8);
            offsets[i] = (oy as i8, ox as i8);
        }
    }
    Ok(BoundaryTargets { height: h, width: w, boundary, direction, offsets })
}

fn plane_dims(t: &Tensor, h: usize, w: usize, what: &str) -> Result<(), BoundaryError> {
    if t.numel() != h * w || t.shape().iter().product::<usize>() != h * w || !matches!(t.shape(), [_, _] | [1, _, _]) {
        return Err(BoundaryError::Shape(format!("{what} {:?} for a {h}×{w} map", t.shape())));
    }
    Ok(())
}

/// Argmax bin per pixel of `m×H×W` direction logits (first maximum wins).
pub fn direction_bins(direction_logits: &Tensor) -> Result<Vec<usize>, BoundaryError> {
    let (m, hw) = match direction_logits.shape() {
        &[m, h, w] if m == DIRECTION_BINS => (m, h * w),
        s => return Err(BoundaryError::Shape(format!("direction logits {s:?}, expected {DIRECTION_BINS}×H×W"))),
    };
    let d = direction_logits.data();
    Ok((0..hw)
        .map(|p| {
            let mut best = 0;
            for k in 1..m {
                if d[k * hw + p] > d[best * hw + p] {
                    best = k;
                }
            }
            best
        })
        .collect())
}

/// Shifted sampling location of every pixel, `(H·W)×2`.
fn shifted_coords(h: usize, w: usize, bins: &[usize]) -> Result<Vec<(f64, f64)>, BoundaryError> {
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (dy, dx) = bin_to_offset(bins[r * w + c])?;
            out.push(((r as i64 + dy as i64) as f64, (c as i64 + dx as i64) as f64));
        }
    }
    Ok(out)
}

/// Replaces the label of every pixel whose boundary probability exceeds
/// `threshold` with the label one step along its predicted direction.
/// Steps leaving the map are clamped to the border.
pub fn refine_labels(
    coarse: &LabelMap,
    boundary_prob: &Tensor,
    direction_logits: &Tensor,
    threshold: f64,
) -> Result<LabelMap, BoundaryError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(BoundaryError::InvalidArgument(format!("threshold {threshold} outside (0, 1)")));
    }
    let (h, w) = (coarse.height, coarse.width);
    plane_dims(boundary_prob, h, w, "boundary probabilities")?;
    if direction_logits.shape().get(1..) != Some(&[h, w][..]) {
        return Err(BoundaryError::Shape(format!("direction logits {:?} for a {h}×{w} map", direction_logits.shape())));
    }
    let bins = direction_bins(direction_logits)?;
    let coords = shifted_coords(h, w, &bins)?;
    let shifted = nearest_sample(&coarse.labels, h, w, &coords)?;
    let labels = coarse
        .labels
        .iter()
        .zip(&shifted)
        .zip(boundary_prob.data())
        .map(|((&c, &s), &p)| if p > threshold { s } else { c })
        .collect();
    LabelMap::new(h, w, labels)
}

/// Differentiable refinement of `K×H×W` logits:
/// `(1 − b)·logits[p] + b·logits[p + offset(p)]` with `b` the `H×W` (or
/// `1×H×W`) boundary probability. Offsets come from the argmax of the
/// direction logits and carry no gradient.
pub fn refine_logits_tape(
    tape: &mut Tape<'_>,
    seg_logits: Var,
    boundary_prob: Var,
    direction_logits: &Tensor,
) -> Result<Var, BoundaryError> {
    let (k, h, w) = match *tape.shape(seg_logits) {
        [k, h, w] => (k, h, w),
        ref s => return Err(BoundaryError::Shape(format!("seg logits {s:?}, expected K×H×W"))),
    };
    plane_dims(tape.value(boundary_prob), h, w, "boundary probabilities")?;
    if direction_logits.shape().get(1..) != Some(&[h, w][..]) {
        return Err(BoundaryError::Shape(format!("direction logits {:?} for a {h}×{w} map", direction_logits.shape())));
    }
    let bins = direction_bins(direction_logits)?;
    let coords: Vec<f64> = shifted_coords(h, w, &bins)?.into_iter().flat_map(|(y, x)| [y, x]).collect();
    let coords = tape.constant(Tensor::new(vec![h * w, 2], coords)?)?;
    let sampled = tape.bilinear_sample(seg_logits, coords)?;
    let sampled = tape.transpose(sampled)?;
    let sampled = tape.reshape(sampled, &[k, h, w])?;
    let prob = tape.reshape(boundary_prob, &[h, w])?;
    let delta = tape.sub(sampled, seg_logits)?;
    let blend = tape.mul_plane(delta, prob)?;
    Ok(tape.add(seg_logits, blend)?)
}

pub fn refine_logits(seg_logits: &Tensor, boundary_prob: &Tensor, direction_logits: &Tensor) -> Result<Tensor, BoundaryError> {
    let mut tape = Tape::new();
    let s = tape.input_ref(seg_logits)?;
    let b = tape.input_ref(boundary_prob)?;
    let out = refine_logits_tape(&mut tape, s, b, direction_logits)?;
    Ok(tape.value(out).clone())
}
