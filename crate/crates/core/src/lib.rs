// Copyright 2026 The iontrap Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Simulation of dispersive (off-resonant sideband) quantum logic with
//! trapped ions.
//!
//! The crate is organised bottom-up:
//!
//! * [`modes`]: Coulomb crystal equilibrium, axial normal modes and per-ion
//!   Lamb-Dicke factors.
//! * [`hilbert`]: the composite space of two-level ions and truncated
//!   harmonic modes, state preparation, populations, fidelities and
//!   projective measurement.
//! * [`hamiltonian`]: rotating-frame laser-ion operators (carrier, sidebands,
//!   light-shift budget) and the closed-form dispersive quantities.
//! * [`evolve`]: exact propagation of piecewise-constant schedules and the
//!   Monte Carlo noise layer (preparation errors, quasi-static dephasing).
//! * [`gates`]: ideal gate matrices, gate and entangling times, the GHZ
//!   sequence builder and truth-table extraction.
//! * [`analysis`]: sideband-flop, Stark-slope and Ramsey-fringe fits.
//! * [`config`] and [`experiments`]: the experiment drivers behind the
//!   `iontrap` command line tool.
//!
//! All angular frequencies inside the library are in rad/s and all times in
//! seconds. Configuration files use cyclic units (kHz, us); conversion
//! happens in [`config`] and nowhere else.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod config;
pub mod evolve;
pub mod experiments;
pub mod gates;
pub mod hamiltonian;
pub mod hilbert;
mod lm;
pub mod modes;
pub mod report;

pub use num_complex::Complex64;

use thiserror::Error;

/// Errors produced by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("equilibrium solve did not converge after {iterations} iterations (gradient max-norm {residual:e})")]
    EquilibriumNotConverged { iterations: usize, residual: f64 },

    #[error("occupation {occupation} of mode {mode} exceeds truncation n_max={n_max}")]
    OccupationOutOfRange {
        mode: usize,
        occupation: usize,
        n_max: usize,
    },

    #[error("Hilbert space dimension {dimension} exceeds the cap of {cap}")]
    DimensionTooLarge { dimension: usize, cap: usize },

    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("not in the dispersive regime: {0}")]
    NotDispersive(String),

    #[error("operator is not Hermitian (max |H - H^dagger| = {0:e})")]
    NotHermitian(f64),

    #[error("mode {0} is not part of the state space")]
    UnknownMode(usize),

    #[error("singular fit design: {0}")]
    SingularDesign(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed input at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Conversion between the cyclic units used at the configuration boundary and
/// the angular units used everywhere else.
pub mod units {
    use std::f64::consts::TAU;

    /// Cyclic frequency in kHz to angular frequency in rad/s.
    pub fn khz(f: f64) -> f64 {
        TAU * f * 1e3
    }

    /// Angular frequency in rad/s to cyclic kHz.
    pub fn to_khz(omega: f64) -> f64 {
        omega / (TAU * 1e3)
    }

    /// Microseconds to seconds.
    pub fn us(t: f64) -> f64 {
        t * 1e-6
    }

    /// Seconds to microseconds.
    pub fn to_us(t: f64) -> f64 {
        t * 1e6
    }
}
