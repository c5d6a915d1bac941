//! Mixture-of-experts image deblurring, built on a small reverse-mode
//! autodiff engine, together with synthetic blur data, dataset curation,
//! weight-similarity analysis and restoration metrics.

pub mod autodiff;
pub mod error;
#[cfg(feature = "io")]
pub mod io;
pub mod metrics;
pub mod net;
pub mod ops;
pub mod optim;
pub mod similarity;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Shape, Tensor};
