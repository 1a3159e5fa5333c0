//! Rim-corruption benchmark: square objects whose outermost pixel ring is
//! relabeled as background, refined with targets computed from the clean map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{distance_transform, make_boundary_targets, refine_labels, BoundaryError, LabelMap, DEFAULT_THRESHOLD};
use crate::training::{ConfusionMatrix, TrainingError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RimBenchSettings {
    pub scenes: usize,
    pub size: usize,
    pub classes: usize,
    pub gamma: f64,
    /// Pixels within this distance of a label change form the boundary band.
    pub band: f64,
    pub seed: u64,
}

impl Default for RimBenchSettings {
    fn default() -> Self {
        Self { scenes: 100, size: 64, classes: 4, gamma: 2.0, band: 2.0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RimBenchReport {
    pub band_miou_before: f64,
    pub band_miou_after: f64,
    pub miou_before: f64,
    pub miou_after: f64,
    /// Scenes whose own overall mIoU dropped after refinement.
    pub scenes_worse: usize,
}

/// Clean map with 1 to 4 disjoint squares on background 0, at least 3 pixels
/// apart and 2 pixels from the border.
pub fn square_scene(rng: &mut impl Rng, size: usize, classes: usize) -> LabelMap {
    let mut map = LabelMap::filled(size, size, 0);
    let mut placed: Vec<(usize, usize, usize)> = Vec::new();
    let want = rng.gen_range(1..=4);
    for _ in 0..200 {
        if placed.len() == want {
            break;
        }
        let side = rng.gen_range(6..=size / 3);
        let r = rng.gen_range(2..=size - 2 - side);
        let c = rng.gen_range(2..=size - 2 - side);
        let clear = placed.iter().all(|&(r2, c2, s2)| {
            r + side + 3 <= r2 || r2 + s2 + 3 <= r || c + side + 3 <= c2 || c2 + s2 + 3 <= c
        });
        if clear {
            let label = rng.gen_range(1..classes) as u8;
            for y in r..r + side {
                for x in c..c + side {
                    map.set(y, x, label);
                }
            }
            placed.push((r, c, side));
        }
    }
    map
}

/// Relabels every object pixel with a 4-neighbour of another label as background.
pub fn corrupt_rim(map: &LabelMap) -> LabelMap {
    let (h, w) = (map.height(), map.width());
    let mut out = map.clone();
    for r in 0..h {
        for c in 0..w {
            let l = map.get(r, c);
            if l == 0 {
                continue;
            }
            let edge = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)]
                .iter()
                .any(|&(y, x)| y < h && x < w && map.get(y, x) != l);
            if edge {
                out.set(r, c, 0);
            }
        }
    }
    out
}

fn miou(pred: &LabelMap, gt: &LabelMap, classes: usize, mask: Option<&[bool]>) -> Result<(ConfusionMatrix, f64), TrainingError> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add_masked(pred, gt, mask)?;
    let m = cm.metrics()?.miou;
    Ok((cm, m))
}

pub fn run_rim_benchmark(s: &RimBenchSettings) -> Result<RimBenchReport, TrainingError> {
    if s.size < 24 || s.classes < 2 || s.scenes == 0 {
        return Err(BoundaryError::InvalidArgument(format!("benchmark settings {s:?}")).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let k = s.classes;
    let mut totals = [ConfusionMatrix::new(k), ConfusionMatrix::new(k), ConfusionMatrix::new(k), ConfusionMatrix::new(k)];
    let mut scenes_worse = 0;
    for _ in 0..s.scenes {
        let gt = square_scene(&mut rng, s.size, k);
        let coarse = corrupt_rim(&gt);
        let targets = make_boundary_targets(&gt, s.gamma)?;
        let (prob, dir) = targets.oracle_inputs();
        let refined = refine_labels(&coarse, &prob, &dir, DEFAULT_THRESHOLD)?;
        let band: Vec<bool> = distance_transform(&gt).values.iter().map(|&d| d <= s.band).collect();
        let (cm0, before) = miou(&coarse, &gt, k, None)?;
        let (cm1, after) = miou(&refined, &gt, k, None)?;
        let (cm2, _) = miou(&coarse, &gt, k, Some(&band))?;
        let (cm3, _) = miou(&refined, &gt, k, Some(&band))?;
        if after < before {
            scenes_worse += 1;
        }
        for (t, c) in totals.iter_mut().zip([cm0, cm1, cm2, cm3]) {
            t.merge(&c)?;
        }
    }
    Ok(RimBenchReport {
        miou_before: totals[0].metrics()?.miou,
        miou_after: totals[1].metrics()?.miou,
        band_miou_before: totals[2].metrics()?.miou,
        band_miou_after: totals[3].metrics()?.miou,
        scenes_worse,
    })
}
