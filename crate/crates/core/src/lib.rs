pub mod bridge;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod image;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod phantom;
pub mod pipeline;
pub mod registration;
pub mod rng;
pub mod sampler;
pub mod trainer;

pub use error::{AcmtError, Result};
pub use image::{BinaryMask, DisplacementField, Image};
