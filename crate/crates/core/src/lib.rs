//! Pseudo-spectral solver for the nonlocal (relaxed) incompressible
//! Navier-Stokes-Korteweg system on the periodic torus, together with its
//! local and zero-capillarity limit systems.

pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod io;
pub mod nonlocal;
pub mod picard;
pub mod spectral;

pub use dynamics::{DtPolicy, FlowState, PhysParams, SimulateOptions, System, Trajectory};
pub use error::{Error, Result};
pub use io::{read_field, write_field, RunConfig};
pub use nonlocal::{Capillarity, RelaxationParam};
pub use picard::{ContractionReport, PicardConfig, PicardIterate};
pub use spectral::{Grid, RealField, SpectralField};
