//! Classification from multiple noisy annotators.
//!
//! A shared backbone feeds either a single softmax head trained on the mean
//! annotator opinion (BN) or one head per annotator trained with a masked loss
//! (DN). A second phase learns softmax-normalised averaging weights over the
//! frozen annotator heads, globally (WDN) or as a function of the input
//! (IWDN, BIWDN). EM reliability estimation, noise-adaptation losses, a
//! label-corruption and annotator simulator, and calibration/metric tooling
//! round out the experiment harness.

pub mod backbone;
pub mod em;
pub mod error;
pub mod harness;
pub mod heads;
pub mod metrics;
pub mod noise;
pub mod numerics;
pub mod weighting;
pub mod rng;
pub mod simulation;

pub use error::{Error, Result};
