//! Wall-clock comparison of dense and pyramid attention at growing sequence lengths.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    dense_bytes_estimate, dense_mha_fast, level_rows, pyramid_attention_fast, sparse_bytes_estimate, DenseAttentionParams,
    SparseAttentionParams, SparseGeometry,
};
use crate::numerics::{NumericsError, Tensor};

pub const CSV_HEADER: &str = "n,dense_ms,sparse_ms,dense_bytes,sparse_bytes";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchSettings {
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub points: usize,
    pub levels: usize,
    /// Dense rounds; the sparse form runs five times as many.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self { d_model: 32, heads: 4, head_dim: 8, points: 16, levels: 3, repeats: 3, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub dense_ms: f64,
    pub sparse_ms: f64,
    pub dense_bytes: usize,
    pub sparse_bytes: usize,
    /// Bytes the sparse kernel actually allocated for its buffers.
    pub sparse_observed_bytes: usize,
}

impl BenchRow {
    pub fn csv_line(&self) -> String {
        format!("{},{:.3},{:.3},{},{}", self.n, self.dense_ms, self.sparse_ms, self.dense_bytes, self.sparse_bytes)
    }
}

/// Near-square `H×W` with `H·W = n`, both divisible by `2^(levels−1)`, followed
/// by the successively halved scales.
pub fn pyramid_shapes(n: usize, levels: usize) -> Result<Vec<(usize, usize)>, NumericsError> {
    let unit = 1usize << levels.saturating_sub(1);
    let mut h = 1usize;
    while (h * 2) * (h * 2) <= n {
        h *= 2;
    }
    let ok = levels >= 1 && n.is_multiple_of(h) && h.is_multiple_of(unit) && (n / h).is_multiple_of(unit);
    if !ok {
        return Err(NumericsError::InvalidArgument {
            op: "bench_attention",
            detail: format!("sequence length {n} does not tile into {levels} halving scales"),
        });
    }
    let w = n / h;
    Ok((0..levels).map(|l| (h >> l, w >> l)).collect())
}

/// Sparse rounds per requested repeat.
const SPARSE_ROUNDS: usize = 5;

fn median(runs: &mut [f64]) -> f64 {
    runs.sort_by(f64::total_cmp);
    let n = runs.len();
    if n % 2 == 1 {
        runs[n / 2]
    } else {
        0.5 * (runs[n / 2 - 1] + runs[n / 2])
    }
}

/// Median time of the first size; every other size is the median of its
/// per-round time relative to the first size, times that median. Relative
/// times within one round cancel slow changes in machine speed.
fn drift_corrected(runs: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = runs.first() else { return Vec::new() };
    let base = median(&mut first.clone());
    runs.iter()
        .map(|r| {
            let mut rel: Vec<f64> = r.iter().zip(first).map(|(t, t0)| t / t0).collect();
            base * median(&mut rel)
        })
        .collect()
}

/// Times both attention forms at each length in `sizes` (ascending). Queries
/// are the `n` finest-scale tokens; values are all scales.
pub fn run(settings: &BenchSettings, sizes: &[usize]) -> Result<Vec<BenchRow>, NumericsError> {
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(NumericsError::InvalidArgument { op: "bench_attention", detail: "sizes must ascend".into() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let geometry = SparseGeometry {
        d_model: settings.d_model,
        heads: settings.heads,
        head_dim: settings.head_dim,
        points: settings.points,
        levels: settings.levels,
    };
    let sparse = SparseAttentionParams::random(geometry, &mut rng)?;
    let dense = DenseAttentionParams::random(settings.d_model, settings.heads, settings.head_dim, &mut rng);
    struct Case {
        n: usize,
        l_ms: usize,
        grid: Vec<crate::numerics::GridLevel>,
        values: Tensor,
        queries: Tensor,
        refs: Tensor,
    }
    let mut cases = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let shapes = pyramid_shapes(n, settings.levels)?;
        let l_ms: usize = shapes.iter().map(|(h, w)| h * w).sum();
        let mut seq_rng = ChaCha8Rng::seed_from_u64(settings.seed ^ n as u64);
        let values = super::glorot(&mut seq_rng, 1, 1, &[l_ms, settings.d_model]);
        let queries = Tensor::new(vec![n, settings.d_model], values.data()[..n * settings.d_model].to_vec())?;
        let (h, w) = shapes[0];
        let refs = Tensor::from_fn(&[n, 2], |i| {
            let t = i / 2;
            if i % 2 == 0 {
                ((t / w) as f64 + 0.5) / h as f64
            } else {
                ((t % w) as f64 + 0.5) / w as f64
            }
        });
        cases.push(Case { n, l_ms, grid: level_rows(&shapes), values, queries, refs });
    }
    // Rounds sweep every size in turn so that background load affects all
    // sizes alike. The two forms are timed in separate phases; the cheap
    // sparse form gets more rounds.
    let rounds = settings.repeats.max(1);
    let mut dense_runs = vec![Vec::with_capacity(rounds); cases.len()];
    for _ in 0..rounds {
        for (k, c) in cases.iter().enumerate() {
            let t0 = Instant::now();
            dense_mha_fast(&c.queries, &dense)?;
            dense_runs[k].push(t0.elapsed().as_secs_f64() * 1e3);
        }
    }
    let mut observed = vec![0; cases.len()];
    for c in &cases {
        pyramid_attention_fast(&c.queries, &c.values, &c.grid, &c.refs, &sparse)?;
    }
    let mut sparse_runs = vec![Vec::with_capacity(SPARSE_ROUNDS * rounds); cases.len()];
    for _ in 0..SPARSE_ROUNDS * rounds {
        for (k, c) in cases.iter().enumerate() {
            let t0 = Instant::now();
            let (_, stats) = pyramid_attention_fast(&c.queries, &c.values, &c.grid, &c.refs, &sparse)?;
            sparse_runs[k].push(t0.elapsed().as_secs_f64() * 1e3);
            observed[k] = stats.total_bytes();
        }
    }
    let dense_ms = drift_corrected(&dense_runs);
    let sparse_ms = drift_corrected(&sparse_runs);
    Ok(cases
        .iter()
        .enumerate()
        .map(|(k, c)| BenchRow {
            n: c.n,
            dense_ms: dense_ms[k],
            sparse_ms: sparse_ms[k],
            dense_bytes: dense_bytes_estimate(c.n, settings.d_model, settings.heads, settings.head_dim),
            sparse_bytes: sparse_bytes_estimate(c.n, c.l_ms, &geometry),
            sparse_observed_bytes: observed[k],
        })
        .collect())
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}
