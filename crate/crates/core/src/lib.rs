//! Class-incremental multi-class segmentation from partially labeled datasets.
//!
//! Each training stage sees only a dataset annotating new categories. Old
//! categories are preserved through background-merged (marginal) prediction
//! remapping, distillation from the frozen previous-stage model, and a
//! per-category prototype memory maintained by a scheduled moving average.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
