//! Camera pose regression head with place-cell memory, head-direction
//! attention and a grid-cell auxiliary target, built on a small
//! reverse-mode autodiff core.

pub mod attention;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod hebbian;
pub mod model;
pub mod parallel;
pub mod tensor;
pub mod train;

pub use data::{Config, Dataset, SceneSample};
pub use error::{Error, Result};
pub use eval::{evaluate, MetricsReport};
pub use model::NeuroLoc;
pub use train::{train, LossRecord};
