//! BEV-centric driving world model: synthetic scenes, a BEV tokenizer, a small
//! causal language core, a current-to-future link and an SDF point-cloud
//! renderer, trained in three stages.

pub mod autograd;
mod binio;
pub mod bev_tokenizer;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod future_link;
pub mod geometry_opt;
pub mod language_core;
pub mod metrics_eval;
pub mod model;
pub mod nn;
pub mod optim;
pub mod render;
pub mod scene_synth;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::ModelConfig;
pub use error::{Error, Result};
pub use metrics_eval::{EvalReport, Roi};
pub use model::{Sample, WorldModel};
pub use render::PointCloud;
pub use scene_synth::{Dataset, QAPair};
pub use tensor::Tensor;
pub use trainer::{LogRow, Phase, RunConfig, Trainer, Variant};
