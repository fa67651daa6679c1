//! Calibration-curve fitting, model selection and dose estimation for
//! chromosomal-aberration biodosimetry after mixed neutron and gamma
//! exposure.

pub mod curves;
pub mod dose;
pub mod error;
pub mod fitting;
pub mod io;
pub mod mcsim;
pub mod numeric;
pub mod priors;
pub mod selection;

pub use curves::{CurveKind, CurveModel};
pub use error::{Error, Result};
pub use fitting::{DataPoint, Engine, FitOptions, FitResult};
