//! Run configuration, checkpoints and the command implementations behind
//! the `unept` binary.

mod checkpoint;
mod commands;
mod config;
pub mod gradcheck;

use std::path::{Path, PathBuf};

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use commands::{
    cmd_bench_attention, cmd_eval, cmd_gen_data, cmd_gradcheck, cmd_infer, cmd_train, format_report, load_dataset,
    load_model, InferOutcome, TrainOutcome, EVAL_BAND, FINAL_CHECKPOINT, METRICS_HEADER, SAMPLE_POINTS_HEADER,
};
pub use config::RunConfig;

use crate::boundary::{BoundaryError, LabelMap, IGNORE};
use crate::data::DataError;
use crate::model::ModelError;
use crate::numerics::{NumericsError, Tensor};
use crate::training::TrainingError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Contract(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("gradient check failed for {0}")]
    GradcheckFailed(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Boundary(#[from] BoundaryError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    /// 2 for malformed invocations and configs, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

/// Overlay colours; class `k` is drawn with `PALETTE[k % 16]`.
pub const PALETTE: [[u8; 3]; 16] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
];

/// Half-and-half blend of the image and the class colours; ignore pixels
/// keep the image.
pub fn overlay(image: &Tensor, labels: &LabelMap, palette: &[[u8; 3]; 16]) -> Result<Tensor, CliError> {
    let (h, w) = (labels.height(), labels.width());
    if image.shape() != [3, h, w] {
        return Err(CliError::Contract(format!("image {:?} for {h}×{w} labels", image.shape())));
    }
    let plane = h * w;
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        let v = image.data()[i];
        match labels.labels()[p] {
            IGNORE => v,
            k => 0.5 * v + 0.5 * palette[k as usize % 16][c] as f64 / 255.0,
        }
    }))
}
