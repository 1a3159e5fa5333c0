use super::TrainingError;
use crate::numerics::{ParamGroup, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub backbone_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: 1e-4, backbone_lr: 1e-5, weight_decay: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamW {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let ok = self.lr >= 0.0
            && self.backbone_lr >= 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(TrainingError::InvalidArgument(format!("optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Moment estimates mirroring the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }

    pub fn matches(&self, store: &ParamStore) -> bool {
        self.m.len() == store.len()
            && self.v.len() == store.len()
            && store.iter().all(|(id, p)| self.m[id.index()].len() == p.value.numel() && self.v[id.index()].len() == p.value.numel())
    }
}

/// One AdamW update from the accumulated gradients. `lr_scale` multiplies
/// both learning rates (the schedule). Decay is applied to the weights before
/// the moment step.
pub fn adamw_step(store: &mut ParamStore, state: &mut OptimizerState, opt: &AdamW, lr_scale: f64) -> Result<(), TrainingError> {
    if !state.matches(store) {
        return Err(TrainingError::Shape("optimizer state does not match the parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    for (k, p) in store.iter_mut().enumerate() {
        let lr = lr_scale * if p.group == ParamGroup::Backbone { opt.backbone_lr } else { opt.lr };
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (((x, &g), mi), vi) in p.value.data_mut().iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *x -= lr * opt.weight_decay * *x;
            *mi = opt.beta1 * *mi + (1.0 - opt.beta1) * g;
            *vi = opt.beta2 * *vi + (1.0 - opt.beta2) * g * g;
            *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + opt.eps);
        }
    }
    Ok(())
}

/// `base` before step `⌈2·total/3⌉`, a tenth of it from there on.
pub fn lr_schedule(step: u64, total_steps: u64, base: f64) -> f64 {
    let drop_at = (2 * total_steps).div_ceil(3);
    if step < drop_at {
        base
    } else {
        0.1 * base
    }
}
