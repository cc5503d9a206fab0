//! Sig-Transformer Encoder.
//!
//! A Transformer-encoder variant whose attention sub-layer passes attended
//! sequences through a differentiable truncated path-signature transform,
//! three task-specific predictors trained jointly on top of it, and the
//! cross-validated experiment harness used to train and compare variants.
//!
//! ```text
//! embeddings ─► + positional encoding ─► [ STE layer ] × N ─► pool ─► heads
//!                                          │
//!                                          ├─ additive multi-head sig-attention
//!                                          ├─ position-wise linear (h·d_sig → d_model)
//!                                          └─ relu FFN + residual + layer norm
//! ```

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod folds;
pub mod gradcheck;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod signature;
pub mod tensor;
pub mod train;

pub use attention::{SigAttentionConfig, SigMode};
pub use autodiff::{Fault, ParamId, ParamStore, Tape, Var};
pub use data::{EmbedSpec, PlantedTask, PrescriptionRecord, SynthSpec};
pub use encoder::{Pooling, SteConfig};
pub use error::{Error, Result};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentReport, GridSpec};
pub use gradcheck::{GradCheckConfig, GradCheckReport};
pub use heads::{ClassWeights, TaskWeights};
pub use metrics::{F1Report, RunMetrics};
pub use model::{Model, ModelSpec, Variant};
pub use signature::{sig_dim, PiecewiseLinearPath, TruncatedSignature};
pub use tensor::Tensor;
pub use train::{train_model, GridPoint, TrainConfig};
