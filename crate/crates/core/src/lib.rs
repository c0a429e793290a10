//! Recurrent monocular depth estimation: geometry, losses, sparse sampling,
//! the ConvLSTM depth network, two-stage training, data generation and
//! evaluation.

pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod maps;
pub mod model;
pub mod mode;
pub mod sparsity;
pub mod training;

pub use error::{Error, Result};
pub use eval::{DepthMetrics, EvalConfig};
pub use geometry::{Intrinsics, Pose};
pub use losses::{LossBreakdown, LossValues, LossWeights};
pub use maps::{DepthMap, Image, SparseDepth, ValidityMask};
pub use mode::Mode;
pub use model::{DepthModel, HiddenState, LstmActivation, ModelConfig};
pub use sparsity::SparsePattern;
pub use training::{infer_sequence, train, InitState, TrainConfig, TrainReport, TrainingData};
