//! Window-to-window BEV representation learning for cross-view
//! geo-localization: a small reverse-mode tensor engine, the multi-scale
//! ground/aerial backbones, depth-based BEV initialization, window matching,
//! the BEV encoder, contrastive retrieval, and a seeded synthetic world.

pub mod autodiff;
pub mod backbone;
pub mod bev_init;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod imageio;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod params;
pub mod retrieval;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod windows;

pub use autodiff::{Graph, PadMode, Var};
pub use backbone::{Backbone, BackboneConfig, Pyramid};
pub use bev_init::{BevGrid, BevInit, BevInitConfig};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use encoder::{Encoder, EncoderConfig};
pub use error::{Error, Result};
pub use model::{ModelConfig, W2wBev};
pub use params::{Bound, ParamId, ParamStore};
pub use retrieval::{EmbeddingHead, RetrievalReport};
pub use tensor::{DType, Scalar, Tensor};
pub use train::{TrainConfig, Trainer};
pub use windows::{GridGeometry, WindowAssignment, WindowSet};
