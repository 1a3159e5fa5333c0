use super::TrainingError;
use crate::boundary::{LabelMap, IGNORE};

/// `counts[i·K + j]` pixels with ground truth `i` predicted as `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub miou: f64,
    pub pix_acc: f64,
    /// `None` for classes absent from the ground truth.
    pub class_iou: Vec<Option<f64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts the pixels selected by `mask` (all when `None`); ignore pixels
    /// in `gt` are skipped.
    pub fn add_masked(&mut self, pred: &LabelMap, gt: &LabelMap, mask: Option<&[bool]>) -> Result<(), TrainingError> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(TrainingError::Shape(format!(
                "prediction {}×{} vs ground truth {}×{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        if mask.is_some_and(|m| m.len() != gt.labels().len()) {
            return Err(TrainingError::Shape("mask length differs from the map".into()));
        }
        let k = self.classes;
        for (i, (&p, &g)) in pred.labels().iter().zip(gt.labels()).enumerate() {
            if g == IGNORE || mask.is_some_and(|m| !m[i]) {
                continue;
            }
            if g as usize >= k || p as usize >= k {
                return Err(TrainingError::InvalidArgument(format!("label pair ({g}, {p}) with {k} classes")));
            }
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<(), TrainingError> {
        self.add_masked(pred, gt, None)
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), TrainingError> {
        if other.classes != self.classes {
            return Err(TrainingError::Shape(format!("{} vs {} classes", self.classes, other.classes)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Mean IoU over the classes present in the ground truth, and pixel accuracy.
    pub fn metrics(&self) -> Result<Metrics, TrainingError> {
        let total = self.total();
        if total == 0 {
            return Err(TrainingError::EmptyConfusion);
        }
        let k = self.classes;
        let mut class_iou = Vec::with_capacity(k);
        let mut trace = 0;
        for c in 0..k {
            let row: u64 = (0..k).map(|j| self.get(c, j)).sum();
            let col: u64 = (0..k).map(|i| self.get(i, c)).sum();
            let hit = self.get(c, c);
            trace += hit;
            class_iou.push((row > 0).then(|| hit as f64 / (row + col - hit) as f64));
        }
        let present: Vec<f64> = class_iou.iter().flatten().copied().collect();
        Ok(Metrics {
            miou: present.iter().sum::<f64>() / present.len() as f64,
            pix_acc: trace as f64 / total as f64,
            class_iou,
        })
    }
}

pub fn confusion_matrix(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Result<ConfusionMatrix, TrainingError> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred, gt)?;
    Ok(cm)
}
