//! Multi-task convolutional network that learns event recognition jointly
//! with rigid and non-rigid object detection.
//!
//! All tasks share the convolutional backbone, one RoI pooling layer and
//! the first fully-connected layer (`fc6`); each task owns its `fc7` and
//! `fc8`. At inference only the event stream runs.

pub mod data;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod gradcheck;
pub mod gradsuite;
pub mod layers;
pub mod network;
pub mod roi;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use network::{Network, NetworkSpec, Task};
pub use tensor::{gaussian_init, Rng, Scalar, Tensor};
