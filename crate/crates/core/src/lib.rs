//! Segmentation-first instance segmentation at desk scale.
//!
//! A semantic FCRN produces per-category score maps, a second FCRN regresses
//! per-pixel instance boxes, and [`assembly`] turns the two into instance
//! masks by box-NMS voting. [`losses`] holds the online-bootstrapped training
//! losses and [`eval`] the semantic and region-AP metrics.

pub mod assembly;
pub mod error;
pub mod eval;
pub mod fcrn;
pub mod losses;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod workflow;

pub use error::{Error, Result};
pub use tensor::{BBox, LabelMap, Real, Tensor};
