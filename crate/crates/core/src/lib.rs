//! Model-based restoration of diffusion-weighted input channels for CNN
//! lesion classifiers, with the supporting kurtosis fit, synthetic phantoms,
//! a small trainable classifier and ROC statistics.

pub mod dki;
pub mod dwi;
pub mod error;
pub mod exec;
pub mod io;
pub mod mbda;
pub mod nn;
pub mod phantom;
pub mod scenario;
pub mod stats;

pub use error::{Error, Result};
