use super::TrainingError;
use crate::boundary::{BoundaryTargets, LabelMap};
use crate::numerics::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub coarse: f64,
    pub refined: f64,
    pub boundary: f64,
    pub direction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { coarse: 1.0, refined: 1.5, boundary: 3.0, direction: 0.7 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let all = [self.coarse, self.refined, self.boundary, self.direction];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(TrainingError::InvalidArgument(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Unweighted terms and the weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub coarse: Var,
    pub refined: Var,
    pub boundary: Var,
    pub direction: Var,
}

/// Weighted sum of coarse and refined cross-entropy, boundary BCE and the
/// direction cross-entropy restricted to ground-truth boundary pixels.
#[allow(clippy::too_many_arguments)]
pub fn segmentation_loss(
    tape: &mut Tape<'_>,
    seg_logits: Var,
    refined_logits: Var,
    boundary_logits: Var,
    direction_logits: Var,
    labels: &LabelMap,
    targets: &BoundaryTargets,
    w: &LossWeights,
) -> Result<LossTerms, TrainingError> {
    w.validate()?;
    let n = labels.labels().len();
    if targets.boundary.len() != n {
        return Err(TrainingError::Shape(format!("{} boundary targets for {n} pixels", targets.boundary.len())));
    }
    let classes = labels.targets();
    let coarse = tape.cross_entropy(seg_logits, &classes)?;
    let refined = tape.cross_entropy(refined_logits, &classes)?;
    let bce_targets: Vec<Option<f64>> =
        classes.iter().zip(&targets.boundary).map(|(c, &b)| c.map(|_| if b { 1.0 } else { 0.0 })).collect();
    let boundary = tape.bce_with_logits(boundary_logits, &bce_targets)?;
    let dir_targets: Vec<Option<usize>> =
        classes.iter().zip(&targets.direction).map(|(c, d)| c.and(d.map(usize::from))).collect();
    let direction = tape.cross_entropy(direction_logits, &dir_targets)?;
    let mut total = tape.scale(coarse, w.coarse)?;
    for (term, weight) in [(refined, w.refined), (boundary, w.boundary), (direction, w.direction)] {
        let scaled = tape.scale(term, weight)?;
        total = tape.add(total, scaled)?;
    }
    Ok(LossTerms { total, coarse, refined, boundary, direction })
}
