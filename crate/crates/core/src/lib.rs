//! Open-set node classification on graphs: a GAT encoder with an extra
//! unknown class, neighborhood-aware OOD scores, positive and negative Mixup,
//! and cross-layer prototype contrastive learning.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod gcl;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod mixup;
pub mod ood;
pub mod rng;
pub mod tensor;
pub mod theorem;
pub mod trainer;

pub use error::{Error, Result};
