//! Insertion Transformer with absolute, ternary-relative and fractional
//! positional encodings, plus the decoders, training loop, metrics and
//! synthetic tasks around it.

pub mod bench;
pub mod data;
pub mod decoding;
pub mod error;
pub mod flops;
pub mod metrics;
pub mod model;
pub mod posenc;
pub mod training;
pub mod vocab;

pub use data::{Dataset, Pair, Task};
pub use decoding::{batch_decode, decode, DecodeOptions, DecodeResult, Mode};
pub use error::{Error, Result};
pub use flops::FlopsReport;
pub use model::{DecoderCache, HeadKind, Hypothesis, MaskKind, Memory, Model, ModelConfig, RowMeta, SlotPrediction};
pub use posenc::{FpeState, PeScheme, PosNode, PosRef};
pub use training::{TrainConfig, Trainer};
