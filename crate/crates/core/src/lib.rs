//! Dual contrastive network for few-shot scene classification.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense tensors and a reverse-mode tape.
//! - [`encoder`], [`condenser`], [`smelter`]: the feature encoder and the two
//!   attention branches that produce context features and detail maps.
//! - [`contrastive`]: the context and detail supervised contrastive losses.
//! - [`trainer`]: multi-task pre-training with momentum SGD.
//! - [`episodic`]: C-way K-shot evaluation with dual prototypes.
//! - [`data`], [`config`], [`checkpoint`]: file formats and configuration.

pub mod autodiff;
pub mod checkpoint;
pub mod condenser;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod encoder;
pub mod episodic;
pub mod error;
pub mod model;
pub mod nn;
pub mod smelter;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
