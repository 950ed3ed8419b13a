//! Partial-to-whole rigid point-cloud registration for object pose
//! estimation: Match Normalization features, Sinkhorn matching with outlier
//! bins, NLL supervision, Kabsch/ICP pose solving and evaluation metrics.

pub mod error;
pub mod geometry;

pub use error::{Error, Result};
pub mod features;
pub mod matching;
pub mod solver;
pub mod supervision;
pub mod metrics;
pub mod synth;
pub mod training;
