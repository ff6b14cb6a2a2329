//! Optical quantum state tomography of spin-1 (qutrit) atomic ensembles.
//!
//! The crate synthesizes polarization-rotation signals, removes instrument
//! phase and offset with CYCLOPS phase cycling, fits the difference traces
//! jointly, reconstructs the density matrix by linear inversion followed by
//! projection onto physical states, and analyses the conditioning of the
//! inversion.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calib;
pub mod config;
pub mod design;
pub mod error;
pub mod fitting;
pub mod io;
pub mod observables;
pub mod qutrit;
pub mod signal;
pub mod tomo;

pub use error::{Error, Result};
pub use observables::{default_observables, MeasurementPlan, ObservableSet};
pub use qutrit::{fidelity, random_state, DensityMatrix, StateVector8};
pub use tomo::{reconstruct, Reconstruction};
