//! Depth- and text-guided weakly supervised affordance grounding on a
//! frozen toy vision transformer.
//!
//! The differentiable substrate in [`diff`] is generic over the scalar type;
//! the model itself runs in `f64` through the aliases below.

#![allow(clippy::should_implement_trait, clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod ablation;
pub mod bpm;
pub mod checks;
pub mod config;
pub mod data;
pub mod diff;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod pipeline;

pub use config::ModelConfig;
pub use diff::{relative_error, GradCheck, GradCheckReport, ParamCheck, Scalar};
pub use error::{Error, Result};
pub use pipeline::{ActivationMap, BitAlignModel, Checkpoint};

pub type Tensor = diff::Tensor<f64>;
pub type Tape = diff::Tape<f64>;
pub type Var<'t> = diff::Var<'t, f64>;
pub type Gradients = diff::Gradients<f64>;
