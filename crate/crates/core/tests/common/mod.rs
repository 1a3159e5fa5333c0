//! Independent loop oracles shared by the integration tests.
#![allow(dead_code)]

use unept::attention::{DenseAttentionParams, SparseAttentionParams};
use unept::boundary::IGNORE;
use unept::numerics::Tensor;

/// Four-neighbour bilinear read with border clamping, written out longhand.
pub fn bilinear_oracle(plane: impl Fn(usize, usize) -> f64, h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.max(0.0).min((h - 1) as f64);
    let x = x.max(0.0).min((w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    (1.0 - fy) * (1.0 - fx) * plane(y0, x0)
        + (1.0 - fy) * fx * plane(y0, x1)
        + fy * (1.0 - fx) * plane(y1, x0)
        + fy * fx * plane(y1, x1)
}

pub fn dense_oracle(x: &Tensor, p: &DenseAttentionParams) -> Tensor {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let dk = p.head_dim;
    let proj = |w: &Tensor, t: usize, m: usize, i: usize| -> f64 {
        (0..d).map(|j| x.at(&[t, j]) * w.at(&[j, m * dk + i])).sum()
    };
    let mut out = Tensor::zeros(&[n, d]);
    for q in 0..n {
        let mut concat = vec![0.0; p.heads * dk];
        for m in 0..p.heads {
            let logits: Vec<f64> = (0..n)
                .map(|k| (0..dk).map(|i| proj(&p.wq, q, m, i) * proj(&p.wk, k, m, i)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for k in 0..n {
                let a = (logits[k] - max).exp() / z;
                for i in 0..dk {
                    concat[m * dk + i] += a * proj(&p.wv, k, m, i);
                }
            }
        }
        for c in 0..d {
            out.data_mut()[q * d + c] = (0..p.heads * dk).map(|r| concat[r] * p.wo.at(&[r, c])).sum();
        }
    }
    out
}

/// Sparse attention evaluated one query, head, scale and sample at a time.
/// `values` stacks the scales given by `shapes`; `base(q, l)` is the
/// reference location of query `q` in the pixel grid of scale `l`.
pub fn sparse_oracle(
    queries: &Tensor,
    values: &Tensor,
    shapes: &[(usize, usize)],
    base: impl Fn(usize, usize) -> (f64, f64),
    p: &SparseAttentionParams,
) -> Tensor {
    let g = p.geometry;
    let (nq, d) = (queries.shape()[0], g.d_model);
    let (dk, npts, nl) = (g.head_dim, g.points, g.levels);
    let mut starts = vec![0];
    for &(h, w) in shapes {
        starts.push(starts.last().unwrap() + h * w);
    }
    let mut out = Tensor::zeros(&[nq, d]);
    for q in 0..nq {
        let mut concat = vec![0.0; g.heads * dk];
        for m in 0..g.heads {
            let qproj: Vec<f64> =
                (0..dk).map(|i| (0..d).map(|j| queries.at(&[q, j]) * p.wq.at(&[j, m * dk + i])).sum()).collect();
            let mut logits = Vec::new();
            let mut offsets = Vec::new();
            for l in 0..nl {
                for n in 0..npts {
                    let s = l * npts + n;
                    let lg: f64 = (0..dk).map(|i| qproj[i] * p.u_wts.at(&[m, i, s])).sum::<f64>()
                        + p.b_wts.data()[m * npts * nl + s];
                    let dy: f64 = (0..dk).map(|i| qproj[i] * p.u_pos.at(&[m, i, 2 * s])).sum::<f64>()
                        + p.b_pos.data()[m * 2 * npts * nl + 2 * s];
                    let dx: f64 = (0..dk).map(|i| qproj[i] * p.u_pos.at(&[m, i, 2 * s + 1])).sum::<f64>()
                        + p.b_pos.data()[m * 2 * npts * nl + 2 * s + 1];
                    logits.push(lg);
                    offsets.push((l, dy, dx));
                }
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
            for (k, &(l, dy, dx)) in offsets.iter().enumerate() {
                let wgt = (logits[k] - max).exp() / z;
                let (h, w) = shapes[l];
                let (by, bx) = base(q, l);
                for i in 0..dk {
                    let plane = |r: usize, c: usize| -> f64 {
                        let tok = starts[l] + r * w + c;
                        (0..d).map(|j| values.at(&[tok, j]) * p.wv.at(&[j, m * dk + i])).sum()
                    };
                    concat[m * dk + i] += wgt * bilinear_oracle(plane, h, w, by + dy, bx + dx);
                }
            }
        }
        for c in 0..d {
            out.data_mut()[q * d + c] = (0..g.heads * dk).map(|r| concat[r] * p.wo.at(&[r, c])).sum();
        }
    }
    out
}

/// Distance from each labeled pixel to the nearest pixel with a different
/// non-ignore label, by exhaustive search; `+∞` where none exists.
pub fn brute_force_distance(labels: &[u8], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![f64::INFINITY; h * w];
    for i in 0..h * w {
        if labels[i] == IGNORE {
            continue;
        }
        for j in 0..h * w {
            if labels[j] != IGNORE && labels[j] != labels[i] {
                let dy = (i / w) as f64 - (j / w) as f64;
                let dx = (i % w) as f64 - (j % w) as f64;
                out[i] = out[i].min((dy * dy + dx * dx).sqrt());
            }
        }
    }
    out
}
