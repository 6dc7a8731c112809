//! Log-domain intrinsic image decomposition with learned constraint slack.
//!
//! A small encoder-decoder predicts Gaussian beliefs over log-albedo and log
//! gray shading together with a variance for how well the image formation
//! constraint `A + B + C = I` holds at each pixel. Training maximizes the
//! likelihood of the ground truth; inference combines the beliefs with the
//! constraint by exact alternating minimization.

pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod intrinsics;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ewise, from_log, to_log, EwiseOp, LogDomainImage, PlaneTensor};
