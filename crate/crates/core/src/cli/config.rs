use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use super::CliError;
use crate::data::{parse_key_values, SceneSpec};
use crate::model::EptConfig;
use crate::training::{AdamW, LossWeights, TrainSettings};

/// Everything a command needs: network, loss, optimizer, schedule, data and
/// output location. Serialized as flat `key = value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: EptConfig,
    pub weights: LossWeights,
    pub optimizer: AdamW,
    pub steps: u64,
    pub batch_size: usize,
    pub gamma: f64,
    pub augment: bool,
    /// Validation every this many steps; 0 evaluates only after the last step.
    pub eval_every: u64,
    /// Numbered checkpoints every this many steps; 0 disables them.
    pub checkpoint_every: u64,
    /// Dataset directory; the scene spec generates the data in memory when unset.
    pub dataset: Option<PathBuf>,
    pub scene: SceneSpec,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: EptConfig::toy(4),
            weights: LossWeights::default(),
            optimizer: AdamW { lr: 3e-3, backbone_lr: 3e-4, ..AdamW::default() },
            steps: 500,
            batch_size: 4,
            gamma: crate::boundary::DEFAULT_GAMMA,
            augment: true,
            eval_every: 100,
            checkpoint_every: 0,
            dataset: None,
            scene: SceneSpec::default(),
            seed: 0,
            out: PathBuf::from("run"),
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| CliError::Config(format!("bad value {value:?} for {key}")))
}

fn parse_triple(key: &str, value: &str) -> Result<[usize; 3], CliError> {
    let parts: Vec<usize> = value.split(',').map(|s| parse(key, s.trim())).collect::<Result<_, _>>()?;
    parts.try_into().map_err(|_| CliError::Config(format!("{key} needs three comma-separated values")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(CliError::Config(format!("bad value {value:?} for {key}"))),
    }
}

fn triple(v: [usize; 3]) -> String {
    format!("{},{},{}", v[0], v[1], v[2])
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (key, value) in parse_key_values(text).map_err(invalid)? {
            cfg.set(&key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if let Some(field) = key.strip_prefix("scene.") {
            return self.scene.set(field, value).map_err(invalid);
        }
        let m = &mut self.model;
        match key {
            "classes" => m.classes = parse(key, value)?,
            "d_model" => m.d_model = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "head_dim" => m.head_dim = parse(key, value)?,
            "points" => m.points = parse(key, value)?,
            "levels" => m.levels = parse(key, value)?,
            "encoder_layers" => m.encoder_layers = parse(key, value)?,
            "decoder_layers" => m.decoder_layers = parse(key, value)?,
            "ff_dim" => m.ff_dim = parse(key, value)?,
            "dropout" => m.dropout = parse(key, value)?,
            "direction_bins" => m.direction_bins = parse(key, value)?,
            "backbone_widths" => m.backbone_widths = parse_triple(key, value)?,
            "branch_widths" => m.branch_widths = parse_triple(key, value)?,
            "head_width" => m.head_width = parse(key, value)?,
            "loss_coarse" => self.weights.coarse = parse(key, value)?,
            "loss_refined" => self.weights.refined = parse(key, value)?,
            "loss_boundary" => self.weights.boundary = parse(key, value)?,
            "loss_direction" => self.weights.direction = parse(key, value)?,
            "lr" => self.optimizer.lr = parse(key, value)?,
            "backbone_lr" => self.optimizer.backbone_lr = parse(key, value)?,
            "weight_decay" => self.optimizer.weight_decay = parse(key, value)?,
            "beta1" => self.optimizer.beta1 = parse(key, value)?,
            "beta2" => self.optimizer.beta2 = parse(key, value)?,
            "eps" => self.optimizer.eps = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "dataset" => self.dataset = (!value.is_empty()).then(|| PathBuf::from(value)),
            "seed" => self.seed = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            _ => return Err(CliError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(invalid)?;
        self.train_settings().validate().map_err(invalid)?;
        self.scene.validate().map_err(invalid)?;
        if self.scene.classes != self.model.classes {
            return Err(CliError::Config(format!(
                "scene.classes {} differs from classes {}",
                self.scene.classes, self.model.classes
            )));
        }
        Ok(())
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            steps: self.steps,
            batch_size: self.batch_size,
            weights: self.weights,
            optimizer: self.optimizer,
            gamma: self.gamma,
            augment: self.augment,
            seed: self.seed,
        }
    }

    /// Every key in a fixed order; `parse` of the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let o = &self.optimizer;
        let w = &self.weights;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("classes", m.classes.to_string());
        kv("d_model", m.d_model.to_string());
        kv("heads", m.heads.to_string());
        kv("head_dim", m.head_dim.to_string());
        kv("points", m.points.to_string());
        kv("levels", m.levels.to_string());
        kv("encoder_layers", m.encoder_layers.to_string());
        kv("decoder_layers", m.decoder_layers.to_string());
        kv("ff_dim", m.ff_dim.to_string());
        kv("dropout", m.dropout.to_string());
        kv("direction_bins", m.direction_bins.to_string());
        kv("backbone_widths", triple(m.backbone_widths));
        kv("branch_widths", triple(m.branch_widths));
        kv("head_width", m.head_width.to_string());
        kv("loss_coarse", w.coarse.to_string());
        kv("loss_refined", w.refined.to_string());
        kv("loss_boundary", w.boundary.to_string());
        kv("loss_direction", w.direction.to_string());
        kv("lr", o.lr.to_string());
        kv("backbone_lr", o.backbone_lr.to_string());
        kv("weight_decay", o.weight_decay.to_string());
        kv("beta1", o.beta1.to_string());
        kv("beta2", o.beta2.to_string());
        kv("eps", o.eps.to_string());
        kv("steps", self.steps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("gamma", self.gamma.to_string());
        kv("augment", self.augment.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("dataset", self.dataset.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        kv("seed", self.seed.to_string());
        kv("out", self.out.display().to_string());
        for line in self.scene.to_manifest().lines() {
            s.push_str("scene.");
            s.push_str(&line.replacen('=', " = ", 1));
            s.push('\n');
        }
        s
    }
}
