//! Raw slice kernels shared by the tape ops and the tape-free inference paths.

/// `c = a·b` (or `c += a·b` when `accumulate`) for row-major operands, where
/// `a_t`/`b_t` mean the stored buffer is the transpose of the logical operand.
/// Logical shapes: `a` is m×k, `b` is k×n, `c` is m×n.
#[allow(clippy::too_many_arguments)]
pub fn matmul_into(
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    m: usize,
    k: usize,
    n: usize,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    gemm_strided(m, k, n, a, rsa, csa, b, rsb, csb, c, n as isize, 1, accumulate);
}

/// General strided product over sub-views of the given slices. All views
/// start at the beginning of their slice; bounds are checked against the
/// furthest element each view can touch.
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let reach = |rows: usize, cols: usize, rs: isize, cs: isize| -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
        }
    };
    assert!(a.len() >= reach(m, k, rsa, csa), "gemm: a view out of bounds");
    assert!(b.len() >= reach(k, n, rsb, csb), "gemm: b view out of bounds");
    assert!(c.len() >= reach(m, n, rsc, csc), "gemm: c view out of bounds");
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                for j in 0..n {
                    c[i * rsc as usize + j * csc as usize] = 0.0;
                }
            }
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: every view was bounds-checked above and strides are positive.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// Output extent of a convolution along one axis, or `None` when non-positive.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height * self.out_width
    }
}

/// Unfolds `x` (C×H×W) into a (C·k·k)×(H'·W') column matrix.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.col_cols();
    let mut out = vec![0.0; g.col_rows() * cols];
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_width {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * g.out_width + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = c * g.height * g.width + iy as usize * g.width;
                    for ox in 0..g.out_width {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dx[base + ix as usize] += src[oy * g.out_width + ox];
                        }
                    }
                }
            }
        }
    }
}

fn clamp_axis(v: f64, extent: usize) -> (f64, bool) {
    let hi = (extent - 1) as f64;
    // A single-pixel axis has no interior to differentiate through; a
    // location within the kink tolerance of the border stays live.
    let live = extent > 1;
    if v < 0.0 {
        (0.0, live && v > -KINK_TOLERANCE)
    } else if v > hi {
        (hi, live && v < hi + KINK_TOLERANCE)
    } else {
        (v, live)
    }
}

/// The four interpolation taps of a continuous `(y, x)` location on an
/// `h`×`w` lattice, after clamping to the border.
#[derive(Clone, Copy, Debug)]
pub struct BilinearTaps {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
    pub fy: f64,
    pub fx: f64,
    /// Whether the location lies inside the lattice along each axis; clamped
    /// axes carry no coordinate gradient.
    pub live_y: bool,
    pub live_x: bool,
    /// Largest row and column index of the lattice.
    pub y_max: usize,
    pub x_max: usize,
}

impl BilinearTaps {
    pub fn new(y: f64, x: f64, h: usize, w: usize) -> Self {
        let (yc, live_y) = clamp_axis(y, h);
        let (xc, live_x) = clamp_axis(x, w);
        let y0 = yc.floor() as usize;
        let x0 = xc.floor() as usize;
        Self {
            y0,
            y1: (y0 + 1).min(h - 1),
            x0,
            x1: (x0 + 1).min(w - 1),
            fy: yc - y0 as f64,
            fx: xc - x0 as f64,
            live_y,
            live_x,
            y_max: h - 1,
            x_max: w - 1,
        }
    }

    /// Visits `(row, col, weight)` for every corner with nonzero weight.
    #[inline]
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, f64)) {
        let wy = [1.0 - self.fy, self.fy];
        let wx = [1.0 - self.fx, self.fx];
        let ys = [self.y0, self.y1];
        let xs = [self.x0, self.x1];
        for a in 0..2 {
            if wy[a] == 0.0 {
                continue;
            }
            for b in 0..2 {
                if wx[b] == 0.0 {
                    continue;
                }
                f(ys[a], xs[b], wy[a] * wx[b]);
            }
        }
    }

    /// Interpolates a scalar field given by `value(row, col)`. At lattice
    /// points this returns the gathered element unchanged.
    #[inline]
    pub fn interpolate(&self, value: impl Fn(usize, usize) -> f64) -> f64 {
        let mut acc: Option<f64> = None;
        self.for_each(|r, c, wgt| {
            let term = if wgt == 1.0 { value(r, c) } else { wgt * value(r, c) };
            acc = Some(match acc {
                None => term,
                Some(a) => a + term,
            });
        });
        acc.unwrap_or(0.0)
    }

    /// Partial derivatives `(d/dy, d/dx)` of the interpolant. Within
    /// [`KINK_TOLERANCE`] of a lattice line the interpolant has a kink; there
    /// the mean of the one-sided slopes is returned, with slopes beyond the
    /// border taken as 0.
    #[inline]
    pub fn coord_grad(&self, value: impl Fn(usize, usize) -> f64) -> (f64, f64) {
        let row = |r: usize| (1.0 - self.fx) * value(r, self.x0) + self.fx * value(r, self.x1);
        let col = |c: usize| (1.0 - self.fy) * value(self.y0, c) + self.fy * value(self.y1, c);
        let dy = if self.live_y { axis_slope(self.y0, self.y1, self.fy, self.y_max, row) } else { 0.0 };
        let dx = if self.live_x { axis_slope(self.x0, self.x1, self.fx, self.x_max, col) } else { 0.0 };
        (dy, dx)
    }
}

/// Distance (in pixels) from a lattice line below which a location is
/// treated as lying on it when differentiating.
pub const KINK_TOLERANCE: f64 = 1e-9;

fn axis_slope(lo: usize, hi: usize, frac: f64, max: usize, line: impl Fn(usize) -> f64) -> f64 {
    let on_line = if frac < KINK_TOLERANCE {
        Some(lo)
    } else if frac > 1.0 - KINK_TOLERANCE && hi > lo {
        Some(hi)
    } else {
        None
    };
    match on_line {
        None => line(hi) - line(lo),
        Some(k) => {
            let right = if k < max { line(k + 1) - line(k) } else { 0.0 };
            let left = if k > 0 { line(k) - line(k - 1) } else { 0.0 };
            0.5 * (left + right)
        }
    }
}

/// Source taps `(i0, i1, frac)` for each output index of a half-pixel-center
/// resize from `input` to `output` samples: output index `i` reads input
/// coordinate `(i + 0.5)·input/output − 0.5`, clamped to the border.
pub fn resize_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            (i0, (i0 + 1).min(input - 1), src - i0 as f64)
        })
        .collect()
}

/// Numerically stable `ln(1 + e^z) `.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
