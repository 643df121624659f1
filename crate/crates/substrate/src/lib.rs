//! Deterministic `f64` compute core: tensors, a reverse-mode tape, fused
//! attention, Adam, checkpoints and seeded random streams.

pub mod adam;
pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod param;
pub mod rng;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use attention::{AttnBlock, AttnLayout};
pub use checkpoint::Checkpoint;
pub use error::{Result, SubstrateError};
pub use gradcheck::{check_gradients, finite_diff_check, GradCheckConfig, GradCheckReport};
pub use graph::{Gradients, Graph, MatmulRecord, Var};
pub use param::{init, ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use tensor::Tensor;
