//! Reverse-mode differentiation over a linear record of executed ops.
//!
//! Each forward op appends one node holding its value and whatever it needs to
//! replay its adjoint. `backward` walks the nodes once, newest first.

use std::borrow::Cow;

use rand::Rng;

use super::kernels::{self, BilinearTaps, ConvGeom};
use super::{NumericsError, ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One flattened scale inside a token sequence: rows `start..start+h·w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridLevel {
    pub start: usize,
    pub height: usize,
    pub width: usize,
}

impl GridLevel {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

type CustomBackward = Box<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Vec<f64>>>;

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, a_t: bool, b_t: bool, m: usize, k: usize, n: usize },
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    AddChannel(Var, Var),
    MulPlane(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Conv2d { x: Var, kernel: Var, geom: ConvGeom, cols: Vec<f64> },
    AvgPool { x: Var, k: usize },
    Upsample { x: Var, factor: usize },
    BilinearChw { map: Var, coords: Var },
    BilinearHwc { map: Var, coords: Var, height: usize, width: usize },
    HeadMatMul { x: Var, w: Var, heads: usize },
    SampleAggregate { values: Var, coords: Var, weights: Var, levels: Vec<GridLevel>, heads: usize },
    GatherRows { table: Var, rows: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Dropout { x: Var, mask: Vec<f64> },
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, count: usize },
    BceWithLogits { logits: Var, targets: Vec<Option<f64>>, count: usize },
    Custom { inputs: Vec<Var>, backward: CustomBackward },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Source {
    Derived,
    Constant,
    Input,
    Param(ParamId),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    needs_grad: bool,
    source: Source,
}

/// Records a forward computation for one backward pass.
///
/// Parameter values are borrowed from a [`ParamStore`] for the tape's
/// lifetime; everything else is owned.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

fn shape_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch { op, detail }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push_leaf(&mut self, value: Cow<'p, Tensor>, source: Source) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: "leaf" });
        }
        let needs_grad = !matches!(source, Source::Constant);
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad, source });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var, NumericsError> {
        self.push_leaf(Cow::Owned(value), Source::Constant)
    }

    /// A leaf that receives a gradient (retrievable via [`Gradients::wrt`]).
    pub fn input(&mut self, value: Tensor) -> Result<Var, NumericsError> {
        self.push_leaf(Cow::Owned(value), Source::Input)
    }

    /// A borrowed leaf that receives a gradient.
    pub fn input_ref(&mut self, value: &'p Tensor) -> Result<Var, NumericsError> {
        self.push_leaf(Cow::Borrowed(value), Source::Input)
    }

    /// A parameter leaf; its gradient is reported under `id`.
    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Result<Var, NumericsError> {
        self.push_leaf(Cow::Borrowed(store.value(id)), Source::Param(id))
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: op_name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value: Cow::Owned(value), op, needs_grad, source: Source::Derived });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize), NumericsError> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(shape_err(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn dims3(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize), NumericsError> {
        match self.shape(v) {
            &[c, h, w] => Ok((c, h, w)),
            s => Err(shape_err(op, format!("expected C×H×W, got shape {s:?}"))),
        }
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, false, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, false, b, true)
    }

    fn matmul_impl(&mut self, a: Var, a_t: bool, b: Var, b_t: bool) -> Result<Var, NumericsError> {
        let (ar, ac) = self.dims2(a, "matmul")?;
        let (br, bc) = self.dims2(b, "matmul")?;
        let (m, k) = if a_t { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if b_t { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dimensions {k} and {k2} differ")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_into(self.value(a).data(), a_t, self.value(b).data(), b_t, m, k, n, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul { a, b, a_t, b_t, m, k, n }, &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.dims2(x, "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", Tensor::new(vec![c, r], out)?, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Block-diagonal product: `x` is n×(M·d), `w` is M×d×c; head `m` maps
    /// columns `m·d..(m+1)·d` of `x` through `w[m]` into columns `m·c..` of the
    /// n×(M·c) result.
    pub fn head_matmul(&mut self, x: Var, w: Var) -> Result<Var, NumericsError> {
        let (n, width) = self.dims2(x, "head_matmul")?;
        let (heads, d, c) = self.dims3(w, "head_matmul")?;
        if heads * d != width {
            return Err(shape_err("head_matmul", format!("{heads} heads of width {d} do not tile {width}")));
        }
        let mut out = vec![0.0; n * heads * c];
        let (xs, ws) = (self.value(x).data(), self.value(w).data());
        for m in 0..heads {
            kernels::gemm_strided(
                n,
                d,
                c,
                &xs[m * d..],
                width as isize,
                1,
                &ws[m * d * c..],
                c as isize,
                1,
                &mut out[m * c..],
                (heads * c) as isize,
                1,
                false,
            );
        }
        let value = Tensor::new(vec![n, heads * c], out)?;
        self.push("head_matmul", value, Op::HeadMatMul { x, w, heads }, &[x, w])
    }

    // ---- elementwise ------------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let xv = self.value(x);
        Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, NumericsError> {
        let v = self.map(x, |v| c * v);
        self.push("scale", v, Op::Scale(x, c), &[x])
    }

    /// Adds a length-d vector to every row of an n×d matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let (_, d) = self.dims2(x, "add_row")?;
        if self.shape(bias) != [d] {
            return Err(shape_err("add_row", format!("bias {:?} vs row width {d}", self.shape(bias))));
        }
        let b = self.value(bias).data();
        let xv = self.value(x);
        let data = xv.data().chunks(d).flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y)).collect();
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("add_row", v, Op::AddRow(x, bias), &[x, bias])
    }

    /// Adds `bias[c]` to every element of channel `c` (leading axis).
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let c = *self.shape(x).first().unwrap_or(&0);
        if self.shape(bias) != [c] || c == 0 {
            return Err(shape_err("add_channel", format!("bias {:?} vs {c} channels", self.shape(bias))));
        }
        let plane = self.value(x).numel() / c;
        let b = self.value(bias).data();
        let xv = self.value(x);
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + b[i / plane]).collect();
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("add_channel", v, Op::AddChannel(x, bias), &[x, bias])
    }

    /// Multiplies every channel plane of `x` (C×…) by the plane `p`.
    pub fn mul_plane(&mut self, x: Var, p: Var) -> Result<Var, NumericsError> {
        let plane = self.value(p).numel();
        let total = self.value(x).numel();
        if plane == 0 || !total.is_multiple_of(plane) || self.shape(x).get(1..) != Some(self.shape(p)) {
            return Err(shape_err("mul_plane", format!("{:?} vs plane {:?}", self.shape(x), self.shape(p))));
        }
        let pv = self.value(p).data();
        let xv = self.value(x);
        let data = xv.data().iter().enumerate().map(|(i, &v)| v * pv[i % plane]).collect();
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("mul_plane", v, Op::MulPlane(x, p), &[x, p])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let v = self.map(x, |v| v.max(0.0));
        self.push("relu", v, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumericsError> {
        let v = self.map(x, kernels::sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(x), &[x])
    }

    /// Inverted dropout with drop probability `rate`; identity when `rate` is 0.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Result<Var, NumericsError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NumericsError::InvalidArgument { op: "dropout", detail: format!("rate {rate}") });
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> =
            (0..self.value(x).numel()).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("dropout", v, Op::Dropout { x, mask }, &[x])
    }

    // ---- normalisation ----------------------------------------------------

    /// Softmax along the last axis, stabilised by subtracting the row maximum.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap_or(&0);
        if n == 0 {
            return Err(NumericsError::EmptyAxis { op: "softmax" });
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("softmax", v, Op::Softmax(x), &[x])
    }

    /// Layer normalisation over the last axis followed by a per-feature affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap_or(&0);
        if d == 0 {
            return Err(NumericsError::EmptyAxis { op: "layer_norm" });
        }
        if eps <= 0.0 {
            return Err(NumericsError::InvalidArgument { op: "layer_norm", detail: format!("eps {eps}") });
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", format!("affine params must have length {d}")));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.numel() / d;
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("layer_norm", v, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias])
    }

    // ---- spatial ----------------------------------------------------------

    /// Cross-correlation of a C×H×W image with a C_out×C×k×k kernel.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var, NumericsError> {
        let (c, h, w) = self.dims3(x, "conv2d")?;
        let (co, ci, k) = match self.shape(kernel) {
            &[co, ci, k1, k2] if k1 == k2 => (co, ci, k1),
            s => return Err(shape_err("conv2d", format!("kernel must be C_out×C_in×k×k, got {s:?}"))),
        };
        if ci != c {
            return Err(shape_err("conv2d", format!("kernel expects {ci} channels, input has {c}")));
        }
        if k % 2 == 0 {
            return Err(NumericsError::InvalidArgument { op: "conv2d", detail: format!("kernel size {k} is even") });
        }
        let (oh, ow) = match (
            kernels::conv_out_extent(h, k, stride, padding),
            kernels::conv_out_extent(w, k, stride, padding),
        ) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => {
                return Err(NumericsError::InvalidArgument {
                    op: "conv2d",
                    detail: format!("non-positive output extent for {h}×{w}, k={k}, stride={stride}, pad={padding}"),
                })
            }
        };
        let geom = ConvGeom { channels: c, height: h, width: w, kernel: k, stride, padding, out_height: oh, out_width: ow };
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let mut out = vec![0.0; co * oh * ow];
        kernels::matmul_into(self.value(kernel).data(), false, &cols, false, co, geom.col_rows(), oh * ow, &mut out, false);
        let v = Tensor::new(vec![co, oh, ow], out)?;
        self.push("conv2d", v, Op::Conv2d { x, kernel, geom, cols }, &[x, kernel])
    }

    /// Non-overlapping k×k average pooling of a C×H×W map (H, W divisible by k).
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var, NumericsError> {
        let (c, h, w) = self.dims3(x, "avg_pool")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(shape_err("avg_pool", format!("{h}×{w} not divisible by {k}")));
        }
        let (oh, ow) = (h / k, w / k);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        let norm = 1.0 / (k * k) as f64;
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[(ch * oh + y / k) * ow + xx / k] += src[(ch * h + y) * w + xx] * norm;
                }
            }
        }
        let v = Tensor::new(vec![c, oh, ow], out)?;
        self.push("avg_pool", v, Op::AvgPool { x, k }, &[x])
    }

    /// Bilinear upsampling of a C×H×W map by an integer factor with
    /// half-pixel centres: output pixel `i` reads input coordinate `(i+0.5)/f − 0.5`.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var, NumericsError> {
        let (c, h, w) = self.dims3(x, "upsample")?;
        if factor == 0 {
            return Err(NumericsError::InvalidArgument { op: "upsample", detail: "factor 0".into() });
        }
        let out = upsample_forward(self.value(x).data(), c, h, w, factor);
        let v = Tensor::new(vec![c, h * factor, w * factor], out)?;
        self.push("upsample", v, Op::Upsample { x, factor }, &[x])
    }

    /// Samples a C×H×W map at P continuous `(row, col)` locations → P×C.
    pub fn bilinear_sample(&mut self, map: Var, coords: Var) -> Result<Var, NumericsError> {
        let (c, h, w) = self.dims3(map, "bilinear_sample")?;
        let p = self.coord_rows(coords, "bilinear_sample")?;
        if h == 0 || w == 0 {
            return Err(shape_err("bilinear_sample", "empty map".into()));
        }
        let (mv, cv) = (self.value(map).data(), self.value(coords).data());
        let mut out = vec![0.0; p * c];
        for i in 0..p {
            let taps = BilinearTaps::new(cv[2 * i], cv[2 * i + 1], h, w);
            for ch in 0..c {
                let plane = &mv[ch * h * w..(ch + 1) * h * w];
                out[i * c + ch] = taps.interpolate(|r, col| plane[r * w + col]);
            }
        }
        let v = Tensor::new(vec![p, c], out)?;
        self.push("bilinear_sample", v, Op::BilinearChw { map, coords }, &[map, coords])
    }

    /// Like [`Tape::bilinear_sample`] for a token-major map stored as (H·W)×C.
    pub fn bilinear_sample_tokens(
        &mut self,
        map: Var,
        height: usize,
        width: usize,
        coords: Var,
    ) -> Result<Var, NumericsError> {
        let (rows, c) = self.dims2(map, "bilinear_sample_tokens")?;
        if rows != height * width || rows == 0 {
            return Err(shape_err("bilinear_sample_tokens", format!("{rows} rows vs {height}×{width}")));
        }
        let p = self.coord_rows(coords, "bilinear_sample_tokens")?;
        let (mv, cv) = (self.value(map).data(), self.value(coords).data());
        let mut out = vec![0.0; p * c];
        for i in 0..p {
            let taps = BilinearTaps::new(cv[2 * i], cv[2 * i + 1], height, width);
            let dst = &mut out[i * c..(i + 1) * c];
            let mut first = true;
            taps.for_each(|r, col, wgt| {
                let src = &mv[(r * width + col) * c..(r * width + col + 1) * c];
                if first {
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d = wgt * s);
                    first = false;
                } else {
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += wgt * s);
                }
            });
        }
        let v = Tensor::new(vec![p, c], out)?;
        self.push(
            "bilinear_sample_tokens",
            v,
            Op::BilinearHwc { map, coords, height, width },
            &[map, coords],
        )
    }

    fn coord_rows(&self, coords: Var, op: &'static str) -> Result<usize, NumericsError> {
        match self.shape(coords) {
            &[p, 2] => Ok(p),
            s => Err(shape_err(op, format!("coords must be P×2, got {s:?}"))),
        }
    }

    /// Weighted multi-scale sampling shared by every sparse attention layer.
    ///
    /// `values` is an L_ms×d token sequence whose levels are given by `levels`;
    /// `coords` is n_q×(M·L·N·2) pixel coordinates laid out as
    /// `[head][level][point][(row, col)]`, `weights` is n_q×(M·L·N) in the same
    /// order. Head `m` reads value columns `m·d/M..(m+1)·d/M`; the result is n_q×d.
    pub fn sample_aggregate(
        &mut self,
        values: Var,
        levels: &[GridLevel],
        coords: Var,
        weights: Var,
        heads: usize,
    ) -> Result<Var, NumericsError> {
        let (rows, d) = self.dims2(values, "sample_aggregate")?;
        let (nq, wcols) = self.dims2(weights, "sample_aggregate")?;
        let (cq, ccols) = self.dims2(coords, "sample_aggregate")?;
        let spec = AggregateSpec::new(rows, d, nq, wcols, heads, levels)?;
        if cq != nq || ccols != 2 * wcols {
            return Err(shape_err("sample_aggregate", format!("coords {cq}×{ccols} vs weights {nq}×{wcols}")));
        }
        let out = spec.forward(self.value(values).data(), self.value(coords).data(), self.value(weights).data());
        let v = Tensor::new(vec![nq, d], out)?;
        let op = Op::SampleAggregate { values, coords, weights, levels: levels.to_vec(), heads };
        self.push("sample_aggregate", v, op, &[values, coords, weights])
    }

    // ---- indexing ---------------------------------------------------------

    /// Row lookup into an R×d table (an embedding gather).
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var, NumericsError> {
        let (r, d) = self.dims2(table, "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", format!("row {bad} out of {r}")));
        }
        let t = self.value(table).data();
        let data = rows.iter().flat_map(|&i| t[i * d..(i + 1) * d].iter().copied()).collect();
        let v = Tensor::new(vec![rows.len(), d], data)?;
        self.push("gather_rows", v, Op::GatherRows { table, rows: rows.to_vec() }, &[table])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start + len > c {
            return Err(shape_err("slice_cols", format!("{start}+{len} exceeds {c} columns")));
        }
        let src = self.value(x).data();
        let data = (0..r).flat_map(|i| src[i * c + start..i * c + start + len].iter().copied()).collect();
        self.push("slice_cols", Tensor::new(vec![r, len], data)?, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let rows = parts.first().map(|&p| self.dims2(p, "concat_cols")).transpose()?.map_or(0, |d| d.0);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(shape_err("concat_cols", format!("row counts {r} and {rows} differ")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        let v = Tensor::new(vec![rows, total], data)?;
        self.push("concat_cols", v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (r, c) = self.dims2(x, "slice_rows")?;
        if start + len > r {
            return Err(shape_err("slice_rows", format!("{start}+{len} exceeds {r} rows")));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        self.push("slice_rows", Tensor::new(vec![len, c], data)?, Op::SliceRows { x, start }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let cols = parts.first().map(|&p| self.dims2(p, "concat_rows")).transpose()?.map_or(0, |d| d.1);
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(shape_err("concat_rows", format!("column counts {c} and {cols} differ")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new(vec![rows, cols], data)?;
        self.push("concat_rows", v, Op::ConcatRows(parts.to_vec()), parts)
    }

    // ---- reductions and losses -------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean cross-entropy over the pixels with a target. `logits` is K×(…)
    /// with the class on the leading axis; `targets` has one entry per pixel.
    /// With no contributing pixel the result is 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var, NumericsError> {
        let lv = self.value(logits);
        let k = *lv.shape().first().unwrap_or(&0);
        if k == 0 || lv.numel() != k * targets.len() {
            return Err(shape_err("cross_entropy", format!("{:?} vs {} targets", lv.shape(), targets.len())));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= k) {
            return Err(NumericsError::InvalidArgument { op: "cross_entropy", detail: format!("class {bad} ≥ {k}") });
        }
        let s = targets.len();
        let data = lv.data();
        let mut total = 0.0;
        let mut count = 0;
        for (p, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let lse = log_sum_exp((0..k).map(|c| data[c * s + p]));
                total += lse - data[t * s + p];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), count };
        self.push("cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    /// Mean binary cross-entropy on logits over the pixels with a target in [0, 1].
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[Option<f64>]) -> Result<Var, NumericsError> {
        let lv = self.value(logits);
        if lv.numel() != targets.len() {
            return Err(shape_err("bce_with_logits", format!("{:?} vs {} targets", lv.shape(), targets.len())));
        }
        let mut total = 0.0;
        let mut count = 0;
        for (&z, t) in lv.data().iter().zip(targets) {
            if let Some(t) = *t {
                total += kernels::softplus(z) - z * t;
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let op = Op::BceWithLogits { logits, targets: targets.to_vec(), count };
        self.push("bce_with_logits", Tensor::scalar(loss), op, &[logits])
    }

    /// Records an op with a caller-supplied adjoint. `backward` receives the
    /// input values, the output value and the output gradient, and returns one
    /// gradient buffer per input.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        backward: impl Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Vec<f64>> + 'static,
    ) -> Result<Var, NumericsError> {
        self.push("custom", value, Op::Custom { inputs: inputs.to_vec(), backward: Box::new(backward) }, inputs)
    }

    // ---- backward ---------------------------------------------------------

    /// Propagates d(loss)/d(node) to every gradient-requiring leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = Vec::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match node.source {
                Source::Input | Source::Param(_) => {
                    leaves.push((Var(i), node.source, g));
                    continue;
                }
                Source::Constant => continue,
                Source::Derived => {}
            }
            self.adjoint(i, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.source, Source::Input | Source::Param(_)) && !leaves.iter().any(|(v, _, _)| v.0 == i) {
                leaves.push((Var(i), node.source, vec![0.0; node.value.numel()]));
            }
        }
        leaves.sort_by_key(|(v, _, _)| v.0);
        Ok(Gradients { leaves })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        if let Some(slot) = self.grad_slot(grads, v) {
            slot.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }

    fn adjoint(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, a_t, b_t, m, k, n } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if let Some(da) = self.grad_slot(grads, a) {
                    if a_t {
                        kernels::matmul_into(bv, b_t, g, true, k, n, m, da, true);
                    } else {
                        kernels::matmul_into(g, false, bv, !b_t, m, n, k, da, true);
                    }
                }
                if let Some(db) = self.grad_slot(grads, b) {
                    if b_t {
                        kernels::matmul_into(g, true, av, a_t, n, m, k, db, true);
                    } else {
                        kernels::matmul_into(av, !a_t, g, false, k, m, n, db, true);
                    }
                }
            }
            &Op::Transpose(x) => {
                let (r, c) = (out.shape()[1], out.shape()[0]);
                if let Some(dx) = self.grad_slot(grads, x) {
                    for a in 0..r {
                        for b in 0..c {
                            dx[a * c + b] += g[b * r + a];
                        }
                    }
                }
            }
            &Op::Reshape(x) => self.accumulate(grads, x, g),
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g);
                self.accumulate(grads, b, g);
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g);
                if let Some(db) = self.grad_slot(grads, b) {
                    db.iter_mut().zip(g).for_each(|(d, v)| *d -= v);
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if let Some(da) = self.grad_slot(grads, a) {
                    for j in 0..g.len() {
                        da[j] += g[j] * bv[j];
                    }
                }
                if let Some(db) = self.grad_slot(grads, b) {
                    for j in 0..g.len() {
                        db[j] += g[j] * av[j];
                    }
                }
            }
            &Op::Scale(x, c) => {
                if let Some(dx) = self.grad_slot(grads, x) {
                    dx.iter_mut().zip(g).for_each(|(d, v)| *d += c * v);
                }
            }
            &Op::AddRow(x, bias) => {
                self.accumulate(grads, x, g);
                if let Some(db) = self.grad_slot(grads, bias) {
                    let d = db.len();
                    for row in g.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                }
            }
            &Op::AddChannel(x, bias) => {
                self.accumulate(grads, x, g);
                if let Some(db) = self.grad_slot(grads, bias) {
                    let plane = g.len() / db.len();
                    for (c, chunk) in g.chunks(plane).enumerate() {
                        db[c] += chunk.iter().sum::<f64>();
                    }
                }
            }
            &Op::MulPlane(x, p) => {
                let (xv, pv) = (self.value(x).data(), self.value(p).data());
                let plane = pv.len();
                if let Some(dx) = self.grad_slot(grads, x) {
                    for j in 0..g.len() {
                        dx[j] += g[j] * pv[j % plane];
                    }
                }
                if let Some(dp) = self.grad_slot(grads, p) {
                    for j in 0..g.len() {
                        dp[j % plane] += g[j] * xv[j];
                    }
                }
            }
            &Op::Relu(x) => {
                let y = out.data();
                if let Some(dx) = self.grad_slot(grads, x) {
                    for j in 0..g.len() {
                        if y[j] > 0.0 {
                            dx[j] += g[j];
                        }
                    }
                }
            }
            &Op::Sigmoid(x) => {
                let y = out.data();
                if let Some(dx) = self.grad_slot(grads, x) {
                    for j in 0..g.len() {
                        dx[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                }
            }
            &Op::Dropout { x, ref mask } => {
                if let Some(dx) = self.grad_slot(grads, x) {
                    for j in 0..g.len() {
                        dx[j] += g[j] * mask[j];
                    }
                }
            }
            &Op::Softmax(x) => {
                let y = out.data();
                let n = *out.shape().last().unwrap();
                if let Some(dx) = self.grad_slot(grads, x) {
                    for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            &Op::LayerNorm { x, gain, bias, ref xhat, ref inv_std } => {
                let d = self.value(gain).numel();
                let gv = self.value(gain).data();
                if let Some(dg) = self.grad_slot(grads, gain) {
                    for (hr, gr) in xhat.chunks(d).zip(g.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(db) = self.grad_slot(grads, bias) {
                    for gr in g.chunks(d) {
                        db.iter_mut().zip(gr).for_each(|(a, v)| *a += v);
                    }
                }
                if let Some(dx) = self.grad_slot(grads, x) {
                    let mut dh = vec![0.0; d];
                    for r in 0..inv_std.len() {
                        let (hr, gr) = (&xhat[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        for j in 0..d {
                            dh[j] = gr[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] += inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            &Op::Conv2d { x, kernel, geom, ref cols } => {
                let co = self.shape(kernel)[0];
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                if let Some(dk) = self.grad_slot(grads, kernel) {
                    kernels::matmul_into(g, false, cols, true, co, ncols, rows, dk, true);
                }
                if self.nodes[x.0].needs_grad {
                    let mut dcols = vec![0.0; rows * ncols];
                    kernels::matmul_into(self.value(kernel).data(), true, g, false, rows, co, ncols, &mut dcols, false);
                    if let Some(dx) = self.grad_slot(grads, x) {
                        kernels::col2im_add(&dcols, &geom, dx);
                    }
                }
            }
            &Op::AvgPool { x, k } => {
                let (c, h, w) = {
                    let s = self.shape(x);
                    (s[0], s[1], s[2])
                };
                let (oh, ow) = (h / k, w / k);
                let norm = 1.0 / (k * k) as f64;
                if let Some(dx) = self.grad_slot(grads, x) {
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                dx[(ch * h + y) * w + xx] += g[(ch * oh + y / k) * ow + xx / k] * norm;
                            }
                        }
                    }
                }
            }
            &Op::Upsample { x, factor } => {
                let s = self.shape(x).to_vec();
                if let Some(dx) = self.grad_slot(grads, x) {
                    upsample_backward(g, s[0], s[1], s[2], factor, dx);
                }
            }
            &Op::BilinearChw { map, coords } => {
                let (c, h, w) = {
                    let s = self.shape(map);
                    (s[0], s[1], s[2])
                };
                let (mv, cv) = (self.value(map).data(), self.value(coords).data());
                let p = cv.len() / 2;
                if let Some(dm) = self.grad_slot(grads, map) {
                    for i in 0..p {
                        let taps = BilinearTaps::new(cv[2 * i], cv[2 * i + 1], h, w);
                        taps.for_each(|r, col, wgt| {
                            for ch in 0..c {
                                dm[(ch * h + r) * w + col] += wgt * g[i * c + ch];
                            }
                        });
                    }
                }
                if let Some(dc) = self.grad_slot(grads, coords) {
                    for i in 0..p {
                        let taps = BilinearTaps::new(cv[2 * i], cv[2 * i + 1], h, w);
                        let (dy, dx) = taps.coord_grad(|r, col| {
                            (0..c).map(|ch| g[i * c + ch] * mv[(ch * h + r) * w + col]).sum()
                        });
                        dc[2 * i] += dy;
                        dc[2 * i + 1] += dx;
                    }
                }
            }
            &Op::BilinearHwc { map, coords, height, width } => {
                let c = self.shape(map)[1];
                let (mv, cv) = (self.value(map).data(), self.value(coords).data());
                let p = cv.len() / 2;
                if let Some(dm) = self.grad_slot(grads, map) {
                    for i in 0..p {
                        let taps = BilinearTaps::new(cv[2 * i], cv[2 * i + 1], height, width);
                        let gi = &g[i * c..(i + 1) * c];
                        taps.for_each(|r, col, wgt| {
                            let dst = &mut dm[(r * width + col) * c..(r * width + col + 1) * c];
                            dst.iter_mut().zip(gi).for_each(|(d, v)| *d += wgt * v);
                        });
                    }
                }
                if let Some(dc) = self.grad_slot(grads, coords) {
                    for i in 0..p {
                        let taps = BilinearTaps::new(cv[2 * i], cv[2 * i + 1], height, width);
                        let gi = &g[i * c..(i + 1) * c];
                        let (dy, dx) = taps.coord_grad(|r, col| {
                            let row = &mv[(r * width + col) * c..(r * width + col + 1) * c];
                            row.iter().zip(gi).map(|(a, b)| a * b).sum()
                        });
                        dc[2 * i] += dy;
                        dc[2 * i + 1] += dx;
                    }
                }
            }
            &Op::HeadMatMul { x, w, heads } => {
                let n = self.shape(x)[0];
                let (d, c) = (self.shape(w)[1], self.shape(w)[2]);
                let (xv, wv) = (self.value(x).data(), self.value(w).data());
                if let Some(dx) = self.grad_slot(grads, x) {
                    for m in 0..heads {
                        kernels::gemm_strided(
                            n,
                            c,
                            d,
                            &g[m * c..],
                            (heads * c) as isize,
                            1,
                            &wv[m * d * c..],
                            1,
                            c as isize,
                            &mut dx[m * d..],
                            (heads * d) as isize,
                            1,
                            true,
                        );
                    }
                }
                if let Some(dw) = self.grad_slot(grads, w) {
                    for m in 0..heads {
                        kernels::gemm_strided(
                            d,
                            n,
                            c,
                            &xv[m * d..],
                            1,
                            (heads * d) as isize,
                            &g[m * c..],
                            (heads * c) as isize,
                            1,
                            &mut dw[m * d * c..],
                            c as isize,
                            1,
                            true,
                        );
                    }
                }
            }
            &Op::SampleAggregate { values, coords, weights, ref levels, heads } => {
                let (rows, d) = (self.shape(values)[0], self.shape(values)[1]);
                let (nq, wcols) = (self.shape(weights)[0], self.shape(weights)[1]);
                let spec = AggregateSpec::new(rows, d, nq, wcols, heads, levels).expect("validated in forward");
                let mut dv = self.nodes[values.0].needs_grad.then(|| vec![0.0; rows * d]);
                let mut dc = self.nodes[coords.0].needs_grad.then(|| vec![0.0; nq * 2 * wcols]);
                let mut dw = self.nodes[weights.0].needs_grad.then(|| vec![0.0; nq * wcols]);
                spec.backward(
                    self.value(values).data(),
                    self.value(coords).data(),
                    self.value(weights).data(),
                    g,
                    dv.as_deref_mut(),
                    dc.as_deref_mut(),
                    dw.as_deref_mut(),
                );
                if let Some(dv) = dv {
                    self.accumulate(grads, values, &dv);
                }
                if let Some(dc) = dc {
                    self.accumulate(grads, coords, &dc);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, weights, &dw);
                }
            }
            &Op::GatherRows { table, ref rows } => {
                let d = self.shape(table)[1];
                if let Some(dt) = self.grad_slot(grads, table) {
                    for (j, &r) in rows.iter().enumerate() {
                        for c in 0..d {
                            dt[r * d + c] += g[j * d + c];
                        }
                    }
                }
            }
            &Op::SliceCols { x, start } => {
                let total = self.shape(x)[1];
                let len = out.shape()[1];
                if let Some(dx) = self.grad_slot(grads, x) {
                    for (r, gr) in g.chunks(len).enumerate() {
                        for j in 0..len {
                            dx[r * total + start + j] += gr[j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if let Some(dp) = self.grad_slot(grads, p) {
                        for (r, dr) in dp.chunks_mut(c.max(1)).enumerate() {
                            for j in 0..c {
                                dr[j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            &Op::SliceRows { x, start } => {
                let c = out.shape()[1];
                if let Some(dx) = self.grad_slot(grads, x) {
                    dx[start * c..start * c + g.len()].iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.accumulate(grads, p, &g[offset..offset + n]);
                    offset += n;
                }
            }
            &Op::Sum(x) => {
                if let Some(dx) = self.grad_slot(grads, x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::CrossEntropy { logits, ref targets, count } => {
                if count == 0 {
                    return;
                }
                let k = self.shape(logits)[0];
                let s = targets.len();
                let lv = self.value(logits).data();
                let scale = g[0] / count as f64;
                if let Some(dl) = self.grad_slot(grads, logits) {
                    let mut probs = vec![0.0; k];
                    for (p, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for c in 0..k {
                            probs[c] = lv[c * s + p];
                        }
                        softmax_in_place(&mut probs);
                        for c in 0..k {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            dl[c * s + p] += scale * (probs[c] - onehot);
                        }
                    }
                }
            }
            &Op::BceWithLogits { logits, ref targets, count } => {
                if count == 0 {
                    return;
                }
                let lv = self.value(logits).data();
                let scale = g[0] / count as f64;
                if let Some(dl) = self.grad_slot(grads, logits) {
                    for (j, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            dl[j] += scale * (kernels::sigmoid(lv[j]) - t);
                        }
                    }
                }
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let input_grads = backward(&values, out, g);
                for (&v, dg) in inputs.iter().zip(&input_grads) {
                    self.accumulate(grads, v, dg);
                }
            }
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    leaves: Vec<(Var, Source, Vec<f64>)>,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Tape::input`] or
    /// [`Tape::param`] (all zeros when the loss does not reach it); `None`
    /// for any other node.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.leaves.iter().find(|(leaf, _, _)| *leaf == v).map(|(_, _, g)| g.as_slice())
    }

    /// Parameter gradients in tape order. A parameter placed on the tape more
    /// than once appears once per placement.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.leaves.iter().filter_map(|(_, s, g)| match s {
            Source::Param(id) => Some((*id, g.as_slice())),
            _ => None,
        })
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn upsample_forward(x: &[f64], c: usize, h: usize, w: usize, factor: usize) -> Vec<f64> {
    let (oh, ow) = (h * factor, w * factor);
    let ty = kernels::resize_taps(h, oh);
    let tx = kernels::resize_taps(w, ow);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let taps = BilinearTaps { y0, y1, x0, x1, fy, fx, live_y: false, live_x: false, y_max: h - 1, x_max: w - 1 };
                out[(ch * oh + i) * ow + j] = taps.interpolate(|r, col| plane[r * w + col]);
            }
        }
    }
    out
}

fn upsample_backward(g: &[f64], c: usize, h: usize, w: usize, factor: usize, dx: &mut [f64]) {
    let (oh, ow) = (h * factor, w * factor);
    let ty = kernels::resize_taps(h, oh);
    let tx = kernels::resize_taps(w, ow);
    for ch in 0..c {
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let gv = g[(ch * oh + i) * ow + j];
                let taps = BilinearTaps { y0, y1, x0, x1, fy, fx, live_y: false, live_x: false, y_max: h - 1, x_max: w - 1 };
                taps.for_each(|r, col, wgt| dx[(ch * h + r) * w + col] += wgt * gv);
            }
        }
    }
}

/// Validated geometry of one [`Tape::sample_aggregate`] call.
pub(crate) struct AggregateSpec<'a> {
    d: usize,
    head_dim: usize,
    heads: usize,
    nq: usize,
    points: usize,
    levels: &'a [GridLevel],
}

impl<'a> AggregateSpec<'a> {
    pub(crate) fn new(
        rows: usize,
        d: usize,
        nq: usize,
        wcols: usize,
        heads: usize,
        levels: &'a [GridLevel],
    ) -> Result<Self, NumericsError> {
        let err = |detail: String| shape_err("sample_aggregate", detail);
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(err(format!("{heads} heads do not divide width {d}")));
        }
        if levels.is_empty() || !wcols.is_multiple_of(heads * levels.len()) {
            return Err(err(format!("{wcols} weights do not tile {heads} heads × {} levels", levels.len())));
        }
        for lv in levels {
            if lv.is_empty() || lv.start + lv.len() > rows {
                return Err(err(format!("level {lv:?} outside {rows} value rows")));
            }
        }
        Ok(Self { d, head_dim: d / heads, heads, nq, points: wcols / (heads * levels.len()), levels })
    }

    pub(crate) fn forward(&self, values: &[f64], coords: &[f64], weights: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.nq * self.d];
        self.forward_into(values, coords, weights, &mut out);
        out
    }

    pub(crate) fn forward_into(&self, values: &[f64], coords: &[f64], weights: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let per_query = self.heads * self.levels.len() * self.points;
        for q in 0..self.nq {
            for m in 0..self.heads {
                let dst = &mut out[q * self.d + m * self.head_dim..q * self.d + (m + 1) * self.head_dim];
                for (l, lv) in self.levels.iter().enumerate() {
                    for n in 0..self.points {
                        let s = q * per_query + (m * self.levels.len() + l) * self.points + n;
                        let wgt = weights[s];
                        let taps = BilinearTaps::new(coords[2 * s], coords[2 * s + 1], lv.height, lv.width);
                        taps.for_each(|r, c, tw| {
                            let row = lv.start + r * lv.width + c;
                            let src = &values[row * self.d + m * self.head_dim..row * self.d + (m + 1) * self.head_dim];
                            let a = wgt * tw;
                            dst.iter_mut().zip(src).for_each(|(o, v)| *o += a * v);
                        });
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn backward(
        &self,
        values: &[f64],
        coords: &[f64],
        weights: &[f64],
        g: &[f64],
        mut dvalues: Option<&mut [f64]>,
        mut dcoords: Option<&mut [f64]>,
        mut dweights: Option<&mut [f64]>,
    ) {
        let per_query = self.heads * self.levels.len() * self.points;
        let hd = self.head_dim;
        for q in 0..self.nq {
            for m in 0..self.heads {
                let gq = &g[q * self.d + m * hd..q * self.d + (m + 1) * hd];
                for (l, lv) in self.levels.iter().enumerate() {
                    for n in 0..self.points {
                        let s = q * per_query + (m * self.levels.len() + l) * self.points + n;
                        let wgt = weights[s];
                        let taps = BilinearTaps::new(coords[2 * s], coords[2 * s + 1], lv.height, lv.width);
                        let head_row = |r: usize, c: usize| {
                            let row = lv.start + r * lv.width + c;
                            row * self.d + m * hd
                        };
                        let dot = |r: usize, c: usize| -> f64 {
                            let o = head_row(r, c);
                            values[o..o + hd].iter().zip(gq).map(|(a, b)| a * b).sum()
                        };
                        if let Some(dw) = dweights.as_deref_mut() {
                            dw[s] += taps.interpolate(dot);
                        }
                        if let Some(dc) = dcoords.as_deref_mut() {
                            let (dy, dx) = taps.coord_grad(dot);
                            dc[2 * s] += wgt * dy;
                            dc[2 * s + 1] += wgt * dx;
                        }
                        if let Some(dv) = dvalues.as_deref_mut() {
                            taps.for_each(|r, c, tw| {
                                let o = head_row(r, c);
                                let a = wgt * tw;
                                dv[o..o + hd].iter_mut().zip(gq).for_each(|(d, v)| *d += a * v);
                            });
                        }
                    }
                }
            }
        }
    }
}
