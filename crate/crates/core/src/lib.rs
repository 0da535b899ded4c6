//! Numerical laboratory for DDIM sampling and inversion.
//!
//! The denoisers here are exact: the data prior is an isotropic Gaussian
//! mixture, so the MMSE noise prediction has a closed form and every
//! sampling or inversion error can be attributed to the solver rather than
//! to a learned network.

// `!(a < b)` guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod denoiser;
pub mod dynamics;
pub mod error;
pub mod io;
pub mod metrics;
pub mod parallel;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod schedule;
pub mod tensor;

pub use denoiser::{DatasetSpec, FlatfieldDataset, GmmModel, PatchRect};
pub use dynamics::{Direction, HybridConfig, Method, Trajectory};
pub use error::{Error, Result};
pub use metrics::{ErrorProfile, Mask, TriangleAngles};
pub use report::MetricsReport;
pub use schedule::{NoiseSchedule, ScheduleKind, TimestepGrid};
pub use tensor::Tensor;
