use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{adamw_step, lr_schedule, segmentation_loss, AdamW, ConfusionMatrix, LossWeights, Metrics, OptimizerState, TrainingError};
use crate::boundary::{make_boundary_targets, refine_labels, refine_logits_tape, LabelMap, DEFAULT_GAMMA, DEFAULT_THRESHOLD};
use crate::data::{augment, Sample};
use crate::model::{Mode, Prediction, Unept};
use crate::numerics::{ParamStore, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub steps: u64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub optimizer: AdamW,
    /// Boundary width of the training targets.
    pub gamma: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 4,
            weights: LossWeights::default(),
            optimizer: AdamW::default(),
            gamma: DEFAULT_GAMMA,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<(), TrainingError> {
        self.weights.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(TrainingError::InvalidArgument("batch_size must be positive".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(TrainingError::InvalidArgument(format!("gamma {} must be positive", self.gamma)));
        }
        Ok(())
    }
}

/// Batch-mean loss terms and learning rate of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub total: f64,
    pub coarse: f64,
    pub refined: f64,
    pub boundary: f64,
    pub direction: f64,
    pub lr: f64,
}

/// Random stream of step `step`; batch choice, augmentation and dropout
/// masks are all drawn from it, so a run can be resumed at any step.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

pub struct Trainer {
    model: Unept,
    store: ParamStore,
    state: OptimizerState,
    settings: TrainSettings,
}

impl Trainer {
    pub fn new(model: Unept, store: ParamStore, settings: TrainSettings) -> Result<Self, TrainingError> {
        let state = OptimizerState::new(&store);
        Self::resume(model, store, state, settings)
    }

    pub fn resume(model: Unept, store: ParamStore, state: OptimizerState, settings: TrainSettings) -> Result<Self, TrainingError> {
        settings.validate()?;
        if !state.matches(&store) {
            return Err(TrainingError::Shape("optimizer state does not match the parameters".into()));
        }
        Ok(Self { model, store, state, settings })
    }

    pub fn model(&self) -> &Unept {
        &self.model
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn settings(&self) -> &TrainSettings {
        &self.settings
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.state.step
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.settings.steps
    }

    pub fn into_parts(self) -> (Unept, ParamStore, OptimizerState) {
        (self.model, self.store, self.state)
    }

    /// Draws a batch from `train`, accumulates the batch-mean gradient and
    /// applies one scheduled AdamW update.
    pub fn train_step(&mut self, train: &[Sample]) -> Result<StepRecord, TrainingError> {
        if train.is_empty() {
            return Err(TrainingError::InvalidArgument("empty training set".into()));
        }
        let step = self.state.step;
        let s = &self.settings;
        let mut rng = step_rng(s.seed, step);
        let batch: Vec<usize> = (0..s.batch_size).map(|_| rng.gen_range(0..train.len())).collect();
        let scale = 1.0 / s.batch_size as f64;
        let mut sums = [0.0; 5];
        self.store.zero_grad();
        for &i in &batch {
            let sample = if s.augment { augment(&train[i], &mut rng) } else { train[i].clone() };
            let targets = match (&sample.targets, s.augment) {
                (Some(t), false) => t.clone(),
                _ => make_boundary_targets(&sample.labels, s.gamma)?,
            };
            let mut tape = Tape::new();
            let image = tape.input(sample.image)?;
            let out = self.model.forward(&mut tape, &self.store, image, &mut Mode::Train(&mut rng))?;
            let prob = tape.sigmoid(out.boundary_logits)?;
            let directions = tape.value(out.direction_logits).clone();
            let refined = refine_logits_tape(&mut tape, out.seg_logits, prob, &directions)?;
            let terms = segmentation_loss(
                &mut tape,
                out.seg_logits,
                refined,
                out.boundary_logits,
                out.direction_logits,
                &sample.labels,
                &targets,
                &s.weights,
            )?;
            let values = [terms.total, terms.coarse, terms.refined, terms.boundary, terms.direction].map(|v| tape.value(v).item());
            for (name, v) in ["total", "coarse", "refined", "boundary", "direction"].iter().zip(values) {
                if !v.is_finite() {
                    return Err(TrainingError::NonFiniteLoss { term: name, step });
                }
            }
            for (acc, v) in sums.iter_mut().zip(values) {
                *acc += v * scale;
            }
            let grads = tape.backward(terms.total)?;
            self.store.accumulate(&grads, scale);
        }
        let lr_scale = lr_schedule(step, s.steps, 1.0);
        adamw_step(&mut self.store, &mut self.state, &s.optimizer, lr_scale)?;
        let [total, coarse, refined, boundary, direction] = sums;
        Ok(StepRecord { step, total, coarse, refined, boundary, direction, lr: lr_scale * s.optimizer.lr })
    }
}

/// Argmax class per pixel of `K×H×W` logits (first maximum wins).
pub fn argmax_labels(seg_logits: &Tensor) -> Result<LabelMap, TrainingError> {
    let (k, h, w) = match *seg_logits.shape() {
        [k, h, w] if (1..=255).contains(&k) => (k, h, w),
        ref s => return Err(TrainingError::Shape(format!("seg logits {s:?}, expected K×H×W"))),
    };
    let d = seg_logits.data();
    let hw = h * w;
    let labels = (0..hw)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * hw + p] > d[best * hw + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    Ok(LabelMap::new(h, w, labels)?)
}

/// Element-wise logistic function.
pub fn sigmoid(t: &Tensor) -> Tensor {
    Tensor::from_fn(t.shape(), |i| 1.0 / (1.0 + (-t.data()[i]).exp()))
}

/// Coarse argmax labels and, with `refine`, the direction-refined labels.
pub fn predicted_labels(pred: &Prediction, refine: bool) -> Result<LabelMap, TrainingError> {
    let coarse = argmax_labels(&pred.seg_logits)?;
    if !refine {
        return Ok(coarse);
    }
    Ok(refine_labels(&coarse, &sigmoid(&pred.boundary_logits), &pred.direction_logits, DEFAULT_THRESHOLD)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalScores {
    pub overall: Metrics,
    /// Pixels within `band` of a ground-truth boundary.
    pub band: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub raw: EvalScores,
    pub refined: Option<EvalScores>,
}

#[derive(Default)]
struct Confusions {
    overall: Option<ConfusionMatrix>,
    band: Option<ConfusionMatrix>,
}

impl Confusions {
    fn add(&mut self, classes: usize, pred: &LabelMap, gt: &LabelMap, band: &[bool]) -> Result<(), TrainingError> {
        self.overall.get_or_insert_with(|| ConfusionMatrix::new(classes)).add(pred, gt)?;
        self.band.get_or_insert_with(|| ConfusionMatrix::new(classes)).add_masked(pred, gt, Some(band))?;
        Ok(())
    }

    fn scores(&self) -> Result<EvalScores, TrainingError> {
        let get = |cm: &Option<ConfusionMatrix>| cm.as_ref().ok_or(TrainingError::EmptyConfusion)?.metrics();
        Ok(EvalScores { overall: get(&self.overall)?, band: get(&self.band)? })
    }
}

/// Evaluates `samples` in eval mode. The raw scores use the argmax of the
/// segmentation logits; with `refine` the refined labels are scored too.
pub fn evaluate(model: &Unept, store: &ParamStore, samples: &[Sample], refine: bool, band: f64) -> Result<EvalReport, TrainingError> {
    let classes = model.config().classes;
    let mut raw = Confusions::default();
    let mut refined = Confusions::default();
    for sample in samples {
        let pred = model.predict(store, &sample.image)?;
        let mask = make_boundary_targets(&sample.labels, band)?.boundary;
        raw.add(classes, &predicted_labels(&pred, false)?, &sample.labels, &mask)?;
        if refine {
            refined.add(classes, &predicted_labels(&pred, true)?, &sample.labels, &mask)?;
        }
    }
    Ok(EvalReport { raw: raw.scores()?, refined: if refine { Some(refined.scores()?) } else { None } })
}
