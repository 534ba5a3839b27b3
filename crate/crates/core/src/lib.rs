//! Software model of a spatial-photonic Ising machine that encodes two-way
//! number partitioning as a Mattis Hamiltonian on a phase-only modulator.
//!
//! - [`model`]: instances, spins, the Mattis energy, fidelity and the
//!   adiabatic amplitude schedule;
//! - [`optics`]: phase-mask composition and Fourier propagation;
//! - [`camera`]: exposure, quantization and device noise;
//! - [`solvers`]: Metropolis-Hastings annealing, the genetic baseline and the
//!   adiabatic driver;
//! - [`bench`]: exact and heuristic oracles and the benchmark harness;
//! - [`io`]: instance files and image containers.

pub mod bench;
pub mod camera;
pub mod error;
pub mod io;
pub mod model;
pub mod optics;
pub mod solvers;

pub use error::{Result, SpimError};
