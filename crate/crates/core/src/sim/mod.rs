//! Synthetic data, the toy segmentation model and local training.

pub mod data;
pub mod model;
pub mod pgm;

pub use data::{default_domains, generate_domain, DomainId, DomainSpec, SegSample};
pub use model::{train_local, Architecture, ToyModel, TrainConfig, TrainOutcome};
