//! Gait-recognition training stack built around reversed-mask feature
//! perturbation.
//!
//! The layering is bottom-up: [`masking`] implements the perturbation
//! family, [`blocks`] the feature-extraction blocks that consume the paired
//! features, [`model`] the backbone plus embedding head, [`loss`]/[`optim`]/
//! [`batch`]/[`train`] the training loop, [`data`] silhouette I/O and the
//! synthetic walker corpus, [`eval`] the cross-view retrieval protocol, and
//! [`gradcheck`] end-to-end gradient verification.

pub mod batch;
pub mod blocks;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod masking;
pub mod model;
pub mod optim;
pub mod train;

pub use error::{CoreError, Result};
