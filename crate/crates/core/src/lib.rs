pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod dual;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod linalg;
pub mod metrics;
pub mod microworld;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod train;

pub use checkpoint::Checkpoint;
pub use codec::{BeamConfig, Vocabulary};
pub use config::{ModelConfig, Regime, TrainConfig};
pub use error::{Error, Result};
pub use linalg::{full_bilinear, mode_product, outer_product, Axis, Matrix, Tensor3, Vector};
pub use metrics::EvalReport;
pub use microworld::{Dataset, QAExample};
pub use model::{EncodedExample, Model};
pub use objectives::{LossBreakdown, LossWeights};
