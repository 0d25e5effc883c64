//! Optimal differentially private mechanisms on [0, 1]: discrete channels and
//! hypers, geometric and truncated Laplace mechanisms, pixelation, expected
//! loss, and the refinement order.

pub mod error;
pub mod experiments;
pub mod loss;
pub mod lp;
pub mod measure;
pub mod mechanisms;
pub mod num;
pub mod pixelate;
pub mod prob;
pub mod quad;
pub mod refine;

pub use error::{Error, Result};
pub use loss::{expected_loss_continuous, expected_loss_discrete, uncertainty, LossFunction};
pub use measure::{DensityPiece, HybridMeasure};
pub use mechanisms::{
    geometric_channel, t_pixelated_laplace, truncated_laplace, verify_dp, EpsilonParams,
};
pub use pixelate::{pixelate_prior, PiecewisePrior};
pub use prob::{hyper_of, make_channel, push_joint, Channel, DiscreteDist, Grid, Hyper, Joint};
