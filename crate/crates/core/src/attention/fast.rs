//! Tape-free inference kernels with the same arithmetic as the tape forms.

use super::{fill_normalized_reference_grid, DenseAttentionParams, SparseAttentionParams, SparseGeometry};
use crate::numerics::kernels::{gemm_strided, matmul_into};
use crate::numerics::{softmax_in_place, AggregateSpec, GridLevel, NumericsError, Tensor};

const ROW_BLOCK: usize = 16;
const QUERY_BLOCK: usize = 128;

/// Dense attention holding at most `ROW_BLOCK` rows of logits at a time.
pub fn dense_mha_fast(x: &Tensor, p: &DenseAttentionParams) -> Result<Tensor, NumericsError> {
    p.validate()?;
    let (n, d) = match x.shape() {
        &[n, d] if d == p.d_model() && n > 0 => (n, d),
        s => {
            return Err(NumericsError::InvalidArgument {
                op: "dense_mha",
                detail: format!("tokens of shape {s:?} for d_model {}", p.d_model()),
            })
        }
    };
    let (heads, dk) = (p.heads, p.head_dim);
    let inner = heads * dk;
    let project = |w: &Tensor| {
        let mut out = vec![0.0; n * inner];
        matmul_into(x.data(), false, w.data(), false, n, d, inner, &mut out, false);
        out
    };
    let (q, k, v) = (project(&p.wq), project(&p.wk), project(&p.wv));
    let scale = 1.0 / (d as f64).sqrt();
    let mut heads_out = vec![0.0; n * inner];
    let mut block = vec![0.0; ROW_BLOCK * n];
    for m in 0..heads {
        for i0 in (0..n).step_by(ROW_BLOCK) {
            let rows = ROW_BLOCK.min(n - i0);
            let logits = &mut block[..rows * n];
            gemm_strided(
                rows,
                dk,
                n,
                &q[i0 * inner + m * dk..],
                inner as isize,
                1,
                &k[m * dk..],
                1,
                inner as isize,
                logits,
                n as isize,
                1,
                false,
            );
            for row in logits.chunks_mut(n) {
                row.iter_mut().for_each(|v| *v *= scale);
                softmax_in_place(row);
            }
            gemm_strided(
                rows,
                n,
                dk,
                logits,
                n as isize,
                1,
                &v[m * dk..],
                inner as isize,
                1,
                &mut heads_out[i0 * inner + m * dk..],
                inner as isize,
                1,
                false,
            );
        }
    }
    let mut out = vec![0.0; n * d];
    matmul_into(&heads_out, false, p.wo.data(), false, n, inner, d, &mut out, false);
    Tensor::new(vec![n, d], out)
}

/// Buffer sizes observed by [`pyramid_attention_fast`], in `f64` elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleStats {
    pub queries: usize,
    /// Sampling locations plus attention weights for one tile of queries.
    pub sample_floats: usize,
    /// Projected queries, projected values and the aggregated output.
    pub feature_floats: usize,
}

impl SampleStats {
    pub fn total_bytes(&self) -> usize {
        8 * (self.sample_floats + self.feature_floats)
    }
}

/// Pyramid attention without a tape, processing queries in tiles; returns
/// the output and the sizes of the buffers it allocated.
pub fn pyramid_attention_fast(
    queries: &Tensor,
    values: &Tensor,
    grid: &[GridLevel],
    refs: &Tensor,
    p: &SparseAttentionParams,
) -> Result<(Tensor, SampleStats), NumericsError> {
    p.validate()?;
    let g = p.geometry;
    let (nq, d) = (queries.shape()[0], g.d_model);
    if queries.shape() != [nq, d] || values.rank() != 2 || values.shape()[1] != d {
        return Err(NumericsError::ShapeMismatch {
            op: "pyramid_attention",
            detail: format!("queries {:?}, values {:?}, d_model {d}", queries.shape(), values.shape()),
        });
    }
    let rows = values.shape()[0];
    let (heads, dk, s) = (g.heads, g.head_dim, g.samples());
    let inner = heads * dk;
    if refs.shape() != [nq, 2] || grid.len() != g.levels {
        return Err(NumericsError::ShapeMismatch {
            op: "pyramid_attention",
            detail: format!("refs {:?} and {} scales for {nq} queries, L = {}", refs.shape(), grid.len(), g.levels),
        });
    }

    let mut v = vec![0.0; rows * inner];
    matmul_into(values.data(), false, p.wv.data(), false, rows, d, inner, &mut v, false);

    let block = QUERY_BLOCK.min(nq.max(1));
    let mut qp = vec![0.0; block * inner];
    let mut locations = vec![0.0; block * heads * 2 * s];
    let mut weights = vec![0.0; block * heads * s];
    let mut agg = vec![0.0; block * inner];
    let mut out = vec![0.0; nq * d];
    let (b_pos, b_wts) = (p.b_pos.data(), p.b_wts.data());
    for q0 in (0..nq).step_by(block) {
        let bq = block.min(nq - q0);
        let qp = &mut qp[..bq * inner];
        matmul_into(&queries.data()[q0 * d..], false, p.wq.data(), false, bq, d, inner, qp, false);
        let locations = &mut locations[..bq * heads * 2 * s];
        let weights = &mut weights[..bq * heads * s];
        fill_normalized_reference_grid(&refs.data()[2 * q0..2 * (q0 + bq)], grid, &g, locations);
        for m in 0..heads {
            gemm_strided(
                bq,
                dk,
                2 * s,
                &qp[m * dk..],
                inner as isize,
                1,
                &p.u_pos.data()[m * dk * 2 * s..],
                (2 * s) as isize,
                1,
                &mut locations[m * 2 * s..],
                (heads * 2 * s) as isize,
                1,
                true,
            );
            gemm_strided(
                bq,
                dk,
                s,
                &qp[m * dk..],
                inner as isize,
                1,
                &p.u_wts.data()[m * dk * s..],
                s as isize,
                1,
                &mut weights[m * s..],
                (heads * s) as isize,
                1,
                false,
            );
        }
        for row in locations.chunks_mut(b_pos.len()) {
            row.iter_mut().zip(b_pos).for_each(|(v, b)| *v += b);
        }
        for row in weights.chunks_mut(b_wts.len()) {
            row.iter_mut().zip(b_wts).for_each(|(v, b)| *v += b);
            row.chunks_mut(s).for_each(softmax_in_place);
        }
        let spec = AggregateSpec::new(rows, inner, bq, heads * s, heads, grid)?;
        let agg = &mut agg[..bq * inner];
        spec.forward_into(&v, locations, weights, agg);
        matmul_into(agg, false, p.wo.data(), false, bq, inner, d, &mut out[q0 * d..(q0 + bq) * d], false);
    }

    let stats = SampleStats {
        queries: nq,
        sample_floats: locations.len() + weights.len(),
        feature_floats: qp.len() + v.len() + agg.len() + out.len(),
    };
    let out = Tensor::new(vec![nq, d], out)?;
    if !out.is_finite() {
        return Err(NumericsError::NonFinite { op: "pyramid_attention" });
    }
    Ok((out, stats))
}

/// Bytes of the buffers a direct evaluation of dense attention holds at once:
/// the three projections, one `n×n` attention map per head and the output.
pub fn dense_bytes_estimate(n: usize, d_model: usize, heads: usize, head_dim: usize) -> usize {
    8 * (heads * n * n + 3 * n * heads * head_dim + n * d_model)
}

/// Bytes held by pyramid attention for `n_q` queries over `l_ms` value tokens:
/// projected queries and values, per-sample locations and weights, outputs.
pub fn sparse_bytes_estimate(n_q: usize, l_ms: usize, g: &SparseGeometry) -> usize {
    let inner = g.heads * g.head_dim;
    8 * (n_q * inner + l_ms * inner + 3 * n_q * g.heads * g.samples() + n_q * inner + n_q * g.d_model)
}
