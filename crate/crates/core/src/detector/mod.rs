//! Two-stage detector: conv encoder, region proposal network and box head.

pub mod arch;
pub mod boxes;
pub mod checkpoint;
pub mod gradcheck;
pub mod inference;
pub mod layers;
pub mod loss;
pub mod model;
pub mod nms;
pub mod params;
pub mod sgd;
pub mod targets;

pub use arch::{ArchConfig, DetectorParams, HeadConfig, STRIDE};
pub use params::{ema_update, ParamSet, TensorRef};
