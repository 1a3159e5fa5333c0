//! Dense multi-head attention (the quadratic reference), sparse sampling
//! attention and its multi-scale pyramid form, plus the encodings they use.
//!
//! Token sequences are row-major `n×d_model` matrices. A spatial map of
//! `H×W` tokens is stored row by row, so token `(r, c)` is row `r·W + c`.
//! Attention logits in the dense form are divided by `√d_model`.

pub mod bench;
mod encoding;
mod fast;

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::numerics::{GridLevel, NumericsError, Tape, Tensor, Var};

pub use encoding::{level_rows, pyramid_position_encoding, sine_positional_encoding, Encodings};
pub use fast::{
    dense_bytes_estimate, dense_mha_fast, pyramid_attention_fast, sparse_bytes_estimate, SampleStats,
};

fn invalid(op: &'static str, detail: String) -> NumericsError {
    NumericsError::InvalidArgument { op, detail }
}

/// Glorot-uniform fill for a `fan_in×fan_out` projection.
pub fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Per-head query/key/value projections stored side by side: column block
/// `m·d_k..(m+1)·d_k` of `wq`, `wk`, `wv` belongs to head `m`.
#[derive(Clone, Debug)]
pub struct DenseAttentionParams {
    pub heads: usize,
    pub head_dim: usize,
    /// `d_model×(M·d_k)`
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// `(M·d_k)×d_model`
    pub wo: Tensor,
}

impl DenseAttentionParams {
    pub fn random(d_model: usize, heads: usize, head_dim: usize, rng: &mut impl Rng) -> Self {
        let inner = heads * head_dim;
        Self {
            heads,
            head_dim,
            wq: glorot(rng, d_model, head_dim, &[d_model, inner]),
            wk: glorot(rng, d_model, head_dim, &[d_model, inner]),
            wv: glorot(rng, d_model, head_dim, &[d_model, inner]),
            wo: glorot(rng, inner, d_model, &[inner, d_model]),
        }
    }

    pub fn d_model(&self) -> usize {
        self.wq.shape()[0]
    }

    fn validate(&self) -> Result<(), NumericsError> {
        let inner = self.heads * self.head_dim;
        let d = self.d_model();
        for (name, t, want) in [
            ("wq", &self.wq, [d, inner]),
            ("wk", &self.wk, [d, inner]),
            ("wv", &self.wv, [d, inner]),
            ("wo", &self.wo, [inner, d]),
        ] {
            if t.shape() != want {
                return Err(invalid("dense_mha", format!("{name} has shape {:?}, expected {want:?}", t.shape())));
            }
        }
        Ok(())
    }

    pub fn on_tape<'p>(&'p self, tape: &mut Tape<'p>) -> Result<DenseAttentionVars, NumericsError> {
        self.validate()?;
        Ok(DenseAttentionVars {
            heads: self.heads,
            head_dim: self.head_dim,
            wq: tape.input_ref(&self.wq)?,
            wk: tape.input_ref(&self.wk)?,
            wv: tape.input_ref(&self.wv)?,
            wo: tape.input_ref(&self.wo)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DenseAttentionVars {
    pub heads: usize,
    pub head_dim: usize,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Full softmax attention of every token over every token.
pub fn dense_mha_tape(tape: &mut Tape<'_>, x: Var, p: &DenseAttentionVars) -> Result<Var, NumericsError> {
    let d_model = tape.shape(x)[1];
    let q = tape.matmul(x, p.wq)?;
    let k = tape.matmul(x, p.wk)?;
    let v = tape.matmul(x, p.wv)?;
    let scale = 1.0 / (d_model as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    for m in 0..p.heads {
        let qm = tape.slice_cols(q, m * p.head_dim, p.head_dim)?;
        let km = tape.slice_cols(k, m * p.head_dim, p.head_dim)?;
        let vm = tape.slice_cols(v, m * p.head_dim, p.head_dim)?;
        let logits = tape.matmul_nt(qm, km)?;
        let logits = tape.scale(logits, scale)?;
        let attn = tape.softmax(logits)?;
        heads.push(tape.matmul(attn, vm)?);
    }
    let cat = tape.concat_cols(&heads)?;
    tape.matmul(cat, p.wo)
}

pub fn dense_mha(x: &Tensor, p: &DenseAttentionParams) -> Result<Tensor, NumericsError> {
    if x.rank() != 2 || x.shape()[0] == 0 || x.shape()[1] != p.d_model() {
        return Err(invalid("dense_mha", format!("tokens of shape {:?} for d_model {}", x.shape(), p.d_model())));
    }
    let mut tape = Tape::new();
    let vars = p.on_tape(&mut tape)?;
    let xv = tape.constant(x.clone())?;
    let out = dense_mha_tape(&mut tape, xv, &vars)?;
    Ok(tape.value(out).clone())
}

/// Sizes of one sparse attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SparseGeometry {
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Sampling points per head per scale (N).
    pub points: usize,
    /// Scales attended to (L).
    pub levels: usize,
}

impl SparseGeometry {
    /// Samples per query per head.
    pub fn samples(&self) -> usize {
        self.points * self.levels
    }

    pub fn validate(&self) -> Result<(), NumericsError> {
        if self.heads == 0 || self.head_dim == 0 || self.points == 0 || self.levels == 0 {
            return Err(invalid("sparse_attention", format!("degenerate geometry {self:?}")));
        }
        if self.heads * self.head_dim != self.d_model {
            return Err(invalid(
                "sparse_attention",
                format!("{} heads × {} ≠ d_model {}", self.heads, self.head_dim, self.d_model),
            ));
        }
        Ok(())
    }

    /// Initial offsets for every (head, scale, point): point `n` sits on ring
    /// `n / 8 + 1` (pixels) at angle `2π·(n mod 8)/min(N, 8)`, each head rotated
    /// by `2π·m/(8M)`. Laid out `[head][scale][point][(dy, dx)]`.
    pub fn ring_offsets(&self) -> Vec<f64> {
        let per_ring = self.points.min(8);
        let mut out = Vec::with_capacity(self.heads * self.samples() * 2);
        for m in 0..self.heads {
            let rot = TAU * m as f64 / (8 * self.heads) as f64;
            for _ in 0..self.levels {
                for n in 0..self.points {
                    let radius = (n / 8 + 1) as f64;
                    let theta = TAU * (n % 8) as f64 / per_ring as f64 + rot;
                    out.push(radius * theta.sin());
                    out.push(radius * theta.cos());
                }
            }
        }
        out
    }
}

/// Learnable tensors of one sparse attention layer.
///
/// `u_wts[m]` maps head `m`'s projected query (`d_k`) to its `N·L` logits and
/// `u_pos[m]` to its `N·L` offsets `(dy, dx)` in pixels of the sampled scale.
#[derive(Clone, Debug)]
pub struct SparseAttentionParams {
    pub geometry: SparseGeometry,
    /// `d_model×(M·d_k)`
    pub wq: Tensor,
    pub wv: Tensor,
    /// `M×d_k×(N·L)` and bias `M·N·L`
    pub u_wts: Tensor,
    pub b_wts: Tensor,
    /// `M×d_k×(2·N·L)` and bias `M·2·N·L`
    pub u_pos: Tensor,
    pub b_pos: Tensor,
    /// `(M·d_k)×d_model`
    pub wo: Tensor,
}

impl SparseAttentionParams {
    /// Glorot projections, zero weight/offset matrices, uniform logits and
    /// ring-shaped initial offsets.
    pub fn init(geometry: SparseGeometry, rng: &mut impl Rng) -> Result<Self, NumericsError> {
        geometry.validate()?;
        let SparseGeometry { d_model, heads, head_dim, .. } = geometry;
        let s = geometry.samples();
        let inner = heads * head_dim;
        Ok(Self {
            geometry,
            wq: glorot(rng, d_model, inner, &[d_model, inner]),
            wv: glorot(rng, d_model, inner, &[d_model, inner]),
            u_wts: Tensor::zeros(&[heads, head_dim, s]),
            b_wts: Tensor::zeros(&[heads * s]),
            u_pos: Tensor::zeros(&[heads, head_dim, 2 * s]),
            b_pos: Tensor::new(vec![heads * 2 * s], geometry.ring_offsets())?,
            wo: glorot(rng, inner, d_model, &[inner, d_model]),
        })
    }

    /// Every tensor drawn at random, for exercising non-trivial weights and offsets.
    pub fn random(geometry: SparseGeometry, rng: &mut impl Rng) -> Result<Self, NumericsError> {
        let mut p = Self::init(geometry, rng)?;
        let u = Uniform::new_inclusive(-1.0, 1.0);
        for t in [&mut p.u_wts, &mut p.b_wts, &mut p.u_pos, &mut p.b_pos] {
            t.data_mut().iter_mut().for_each(|v| *v = u.sample(rng));
        }
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), NumericsError> {
        let g = self.geometry;
        g.validate()?;
        let (inner, s) = (g.heads * g.head_dim, g.samples());
        for (name, t, want) in [
            ("wq", &self.wq, vec![g.d_model, inner]),
            ("wv", &self.wv, vec![g.d_model, inner]),
            ("u_wts", &self.u_wts, vec![g.heads, g.head_dim, s]),
            ("b_wts", &self.b_wts, vec![g.heads * s]),
            ("u_pos", &self.u_pos, vec![g.heads, g.head_dim, 2 * s]),
            ("b_pos", &self.b_pos, vec![g.heads * 2 * s]),
            ("wo", &self.wo, vec![inner, g.d_model]),
        ] {
            if t.shape() != want.as_slice() {
                return Err(invalid("sparse_attention", format!("{name} has shape {:?}, expected {want:?}", t.shape())));
            }
        }
        Ok(())
    }

    pub fn on_tape<'p>(&'p self, tape: &mut Tape<'p>) -> Result<SparseAttentionVars, NumericsError> {
        self.validate()?;
        Ok(SparseAttentionVars {
            geometry: self.geometry,
            wq: tape.input_ref(&self.wq)?,
            wv: tape.input_ref(&self.wv)?,
            u_wts: tape.input_ref(&self.u_wts)?,
            b_wts: tape.input_ref(&self.b_wts)?,
            u_pos: tape.input_ref(&self.u_pos)?,
            b_pos: tape.input_ref(&self.b_pos)?,
            wo: tape.input_ref(&self.wo)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SparseAttentionVars {
    pub geometry: SparseGeometry,
    pub wq: Var,
    pub wv: Var,
    pub u_wts: Var,
    pub b_wts: Var,
    pub u_pos: Var,
    pub b_pos: Var,
    pub wo: Var,
}

pub struct SparseOutput {
    /// `n_q×d_model`
    pub out: Var,
    /// Sampling locations, `n_q×(M·L·N·2)` in pixels of each scale,
    /// laid out `[head][scale][point][(row, col)]`.
    pub locations: Var,
    /// Normalized attention weights, `n_q×(M·L·N)`.
    pub weights: Var,
}

/// Reference points expressed in each scale's pixel grid, repeated per head
/// and point: a normalized `(y, x)` maps to `(y·H_l − 0.5, x·W_l − 0.5)`.
pub fn normalized_reference_grid(
    refs: &Tensor,
    grid: &[GridLevel],
    geometry: &SparseGeometry,
) -> Result<Tensor, NumericsError> {
    let nq = reference_rows(refs)?;
    if grid.len() != geometry.levels {
        return Err(invalid("pyramid_attention", format!("{} scales for L = {}", grid.len(), geometry.levels)));
    }
    let mut out = vec![0.0; nq * geometry.heads * geometry.samples() * 2];
    fill_normalized_reference_grid(refs.data(), grid, geometry, &mut out);
    Tensor::new(vec![nq, geometry.heads * geometry.samples() * 2], out)
}

pub(crate) fn fill_normalized_reference_grid(refs: &[f64], grid: &[GridLevel], g: &SparseGeometry, out: &mut [f64]) {
    let mut k = 0;
    for r in refs.chunks(2) {
        for _ in 0..g.heads {
            for lv in grid {
                let py = r[0] * lv.height as f64 - 0.5;
                let px = r[1] * lv.width as f64 - 0.5;
                for _ in 0..g.points {
                    out[k] = py;
                    out[k + 1] = px;
                    k += 2;
                }
            }
        }
    }
}

/// Pixel-space reference points for a single scale, repeated per head and point.
pub fn pixel_reference_grid(refs: &Tensor, geometry: &SparseGeometry) -> Result<Tensor, NumericsError> {
    let nq = reference_rows(refs)?;
    if geometry.levels != 1 {
        return Err(invalid("sparse_attention", format!("single-scale attention needs L = 1, got {}", geometry.levels)));
    }
    let r = refs.data();
    let per_query = geometry.heads * geometry.points * 2;
    let mut out = Vec::with_capacity(nq * per_query);
    for q in 0..nq {
        for _ in 0..geometry.heads * geometry.points {
            out.push(r[2 * q]);
            out.push(r[2 * q + 1]);
        }
    }
    Tensor::new(vec![nq, per_query], out)
}

fn reference_rows(refs: &Tensor) -> Result<usize, NumericsError> {
    match refs.shape() {
        &[n, 2] => Ok(n),
        s => Err(NumericsError::ShapeMismatch { op: "sparse_attention", detail: format!("refs must be n×2, got {s:?}") }),
    }
}

/// Shared body of single-scale and pyramid sparse attention.
///
/// `base` holds each sample's reference location (see
/// [`normalized_reference_grid`]); learned offsets are added to it. For each
/// query and head the `N·L` logits are normalized jointly by one softmax.
pub fn sparse_attention_tape(
    tape: &mut Tape<'_>,
    p: &SparseAttentionVars,
    queries: Var,
    values: Var,
    grid: &[GridLevel],
    base: Tensor,
) -> Result<SparseOutput, NumericsError> {
    let g = p.geometry;
    let nq = tape.shape(queries)[0];
    let s = g.samples();
    if base.shape() != [nq, g.heads * s * 2] {
        return Err(NumericsError::ShapeMismatch {
            op: "sparse_attention",
            detail: format!("reference grid {:?} for {nq} queries", base.shape()),
        });
    }
    let qp = tape.matmul(queries, p.wq)?;
    let offsets = tape.head_matmul(qp, p.u_pos)?;
    let offsets = tape.add_row(offsets, p.b_pos)?;
    let base = tape.constant(base)?;
    let locations = tape.add(offsets, base)?;
    let logits = tape.head_matmul(qp, p.u_wts)?;
    let logits = tape.add_row(logits, p.b_wts)?;
    let logits = tape.reshape(logits, &[nq * g.heads, s])?;
    let weights = tape.softmax(logits)?;
    let weights = tape.reshape(weights, &[nq, g.heads * s])?;
    let v = tape.matmul(values, p.wv)?;
    let agg = tape.sample_aggregate(v, grid, locations, weights, g.heads)?;
    let out = tape.matmul(agg, p.wo)?;
    Ok(SparseOutput { out, locations, weights })
}

/// Single-scale sparse attention over an `H×W` value map given as `(H·W)×d`
/// tokens, with reference points in that map's pixel coordinates.
pub fn sparse_attention(
    queries: &Tensor,
    values: &Tensor,
    height: usize,
    width: usize,
    refs: &Tensor,
    p: &SparseAttentionParams,
) -> Result<Tensor, NumericsError> {
    let base = pixel_reference_grid(refs, &p.geometry)?;
    let grid = [GridLevel { start: 0, height, width }];
    run_standalone(queries, values, &grid, base, p)
}

/// Multi-scale sparse attention with normalized `[0,1]²` reference points.
pub fn pyramid_attention(
    queries: &Tensor,
    pyramid: &PyramidFeatures,
    refs: &Tensor,
    p: &SparseAttentionParams,
) -> Result<Tensor, NumericsError> {
    let grid = pyramid.levels();
    let base = normalized_reference_grid(refs, &grid, &p.geometry)?;
    run_standalone(queries, &pyramid.concat()?, &grid, base, p)
}

fn run_standalone(
    queries: &Tensor,
    values: &Tensor,
    grid: &[GridLevel],
    base: Tensor,
    p: &SparseAttentionParams,
) -> Result<Tensor, NumericsError> {
    let mut tape = Tape::new();
    let vars = p.on_tape(&mut tape)?;
    let q = tape.constant(queries.clone())?;
    let v = tape.constant(values.clone())?;
    let out = sparse_attention_tape(&mut tape, &vars, q, v, grid, base)?;
    Ok(tape.value(out.out).clone())
}

/// Per-scale token maps ordered fine to coarse.
#[derive(Clone, Debug)]
pub struct PyramidFeatures {
    /// Scale `l` is `(H_l·W_l)×d_model`.
    pub maps: Vec<Tensor>,
    pub shapes: Vec<(usize, usize)>,
    /// Downsampling factor of each scale relative to the input image.
    pub strides: Vec<usize>,
}

impl PyramidFeatures {
    pub fn new(maps: Vec<Tensor>, shapes: Vec<(usize, usize)>, strides: Vec<usize>) -> Result<Self, NumericsError> {
        if maps.is_empty() || maps.len() != shapes.len() || maps.len() != strides.len() {
            return Err(invalid("pyramid", "maps, shapes and strides must be non-empty and equally long".into()));
        }
        let d = maps[0].shape().get(1).copied().unwrap_or(0);
        for (m, &(h, w)) in maps.iter().zip(&shapes) {
            if m.shape() != [h * w, d] {
                return Err(NumericsError::ShapeMismatch {
                    op: "pyramid",
                    detail: format!("map {:?} for a {h}×{w} scale of width {d}", m.shape()),
                });
            }
        }
        Ok(Self { maps, shapes, strides })
    }

    pub fn num_levels(&self) -> usize {
        self.maps.len()
    }

    pub fn d_model(&self) -> usize {
        self.maps[0].shape()[1]
    }

    /// Total token count `L_ms`.
    pub fn len(&self) -> usize {
        self.shapes.iter().map(|(h, w)| h * w).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn levels(&self) -> Vec<GridLevel> {
        level_rows(&self.shapes)
    }

    /// The `L_ms×d_model` sequence of all scales.
    pub fn concat(&self) -> Result<Tensor, NumericsError> {
        let data = self.maps.iter().flat_map(|m| m.data().iter().copied()).collect();
        Tensor::new(vec![self.len(), self.d_model()], data)
    }
}

/// Adds each token's positional encoding and its scale's embedding row.
pub fn add_scale_encoding(pyramid: &PyramidFeatures, enc: &Encodings) -> Result<PyramidFeatures, NumericsError> {
    let d = pyramid.d_model();
    if enc.scale_embedding.shape() != [pyramid.num_levels(), d] {
        return Err(invalid(
            "add_scale_encoding",
            format!("embedding {:?} for {} scales of width {d}", enc.scale_embedding.shape(), pyramid.num_levels()),
        ));
    }
    let mut maps = Vec::with_capacity(pyramid.num_levels());
    for (l, (m, &(h, w))) in pyramid.maps.iter().zip(&pyramid.shapes).enumerate() {
        let pos = sine_positional_encoding(h, w, d)?;
        let row = &enc.scale_embedding.data()[l * d..(l + 1) * d];
        let data = m.data().iter().zip(pos.data()).enumerate().map(|(i, (v, p))| v + p + row[i % d]).collect();
        maps.push(Tensor::new(m.shape().to_vec(), data)?);
    }
    PyramidFeatures::new(maps, pyramid.shapes.clone(), pyramid.strides.clone())
}

/// Tape form of the query encoding: `x + positional + scale_embedding[level]`.
pub fn encode_queries_tape(
    tape: &mut Tape<'_>,
    x: Var,
    shapes: &[(usize, usize)],
    scale_embedding: Var,
) -> Result<Var, NumericsError> {
    let d = tape.shape(x)[1];
    let pos = tape.constant(pyramid_position_encoding(shapes, d)?)?;
    let rows: Vec<usize> =
        shapes.iter().enumerate().flat_map(|(l, &(h, w))| std::iter::repeat_n(l, h * w)).collect();
    let scale = tape.gather_rows(scale_embedding, &rows)?;
    let with_pos = tape.add(x, pos)?;
    tape.add(with_pos, scale)
}
