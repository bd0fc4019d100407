//! Few-shot keyword spotting toolkit.
//!
//! Pipeline: audio (or synthetic features) → MFCC/teacher feature maps →
//! metric-learned encoders (pooling, attention, residual convnet student) →
//! K-shot enrollment and open-set evaluation curves.

pub mod cli;
pub mod data;
pub mod dsp;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod protocol;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
