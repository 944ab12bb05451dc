//! Dense f32 tensors with a reverse-mode tape, the layer set used by the
//! spatial-temporal transformer and the unrolled adversarial baseline, Adam(W),
//! cosine learning-rate schedules, and a flat checkpoint format.

pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
mod ops;
pub mod optim;
pub mod par;
pub mod params;
pub mod schedule;
pub mod tensor;

pub use attention::{rope_apply, CausalMask};
pub use checkpoint::Checkpoint;
pub use error::{NnError, Result};
pub use graph::{BackwardCtx, BackwardFn, Gradients, Graph, Var};
pub use optim::{adamw_step, AdamConfig, OptimizerState, StepReport};
pub use params::{ParamGrads, ParamStore};
pub use schedule::{lr_cosine, CosineSchedule};
pub use tensor::Tensor;
