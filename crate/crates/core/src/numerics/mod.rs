//! Dense `f64` tensors, slice kernels and tape-based reverse-mode differentiation.

mod gradcheck;
pub mod kernels;
mod params;
mod sample;
mod tape;
mod tensor;

pub use gradcheck::{
    central_difference, check_param_gradients, relative_error, GradcheckReport, GradcheckSettings, GroupReport,
    Stencil,
};
pub use params::{Param, ParamGroup, ParamId, ParamStore};
pub use sample::{bilinear_sample, nearest_sample, upsample_bilinear};
pub use tape::{GridLevel, Gradients, Tape, Var};
pub(crate) use tape::{softmax_in_place, AggregateSpec};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: reduction over an empty axis")]
    EmptyAxis { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}
