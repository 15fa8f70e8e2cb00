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

//! Laser-ion interaction operators in the rotating frame.
//!
//! Every pulse is described in its own laser frame: the diagonal carries
//! `-detuning` per ion in D and, for sideband pulses, the offset of every
//! other mode from the addressed one. After propagation the frame diagonal
//! is undone (see [`crate::evolve`]), so consecutive pulses share the
//! interaction picture of the bare qubit and mode frequencies. Laser phases
//! are referenced to the start of each pulse.
//!
//! Coupling convention: a carrier pulse contributes
//! `(rabi_0 / 2) e^{i phase} |D><S|_j + h.c.` per ion, a blue sideband on
//! mode `m` contributes `(rabi_0 eta[j][m] / 2) sqrt(n+1) e^{i phase}
//! |D><S|_j (x) a_m^dagger + h.c.`. The resonant sideband Rabi frequency is
//! therefore `eta rabi_0 sqrt(n+1)` and a resonant pulse of area `theta`
//! moves `sin^2(theta / 2)` of the population.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::hilbert::SpaceSpec;
use crate::modes::ModeSet;
use crate::{Error, Result};

/// Which transition a pulse drives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Coupling {
    Carrier,
    BlueSideband(usize),
    RedSideband(usize),
    /// Only the diagonal light-shift budget, no population transfer.
    StaticShift,
}

/// One square laser pulse. All ions are addressed uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseEvent {
    pub coupling: Coupling,
    /// Carrier Rabi frequency, rad/s.
    pub rabi_0: f64,
    /// Laser detuning from the addressed resonance, rad/s.
    pub detuning: f64,
    /// Laser phase, rad.
    pub phase: f64,
    /// Duration, s.
    pub duration: f64,
}

impl PulseEvent {
    pub fn carrier(rabi_0: f64, phase: f64, duration: f64) -> Self {
        PulseEvent {
            coupling: Coupling::Carrier,
            rabi_0,
            detuning: 0.0,
            phase,
            duration,
        }
    }

    /// Resonant carrier pulse of the given area.
    pub fn carrier_area(rabi_0: f64, phase: f64, area: f64) -> Self {
        Self::carrier(rabi_0, phase, area / rabi_0)
    }

    pub fn blue_sideband(mode: usize, rabi_0: f64, detuning: f64, phase: f64, duration: f64) -> Self {
        PulseEvent {
            coupling: Coupling::BlueSideband(mode),
            rabi_0,
            detuning,
            phase,
            duration,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "pulse duration must be >= 0, got {}",
                self.duration
            )));
        }
        if !self.rabi_0.is_finite() || !self.detuning.is_finite() || !self.phase.is_finite() {
            return Err(Error::InvalidParameter("non-finite pulse parameter".into()));
        }
        Ok(())
    }
}

/// Motional-state independent differential (S minus D) light shifts that
/// act while the dispersive beam is on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ShiftBudget {
    /// Lumped shift from dipole and Zeeman-carrier couplings, rad/s.
    pub delta_other: f64,
    /// Shift produced by the compensation beam, rad/s.
    pub delta_comp: f64,
}

impl ShiftBudget {
    pub fn total(&self) -> f64 {
        self.delta_other + self.delta_comp
    }
}

/// Resonant sideband Rabi frequency `eta rabi_0 sqrt(n+1)`.
pub fn sideband_rabi(n: usize, eta: f64, rabi_0: f64) -> f64 {
    eta * rabi_0 * ((n + 1) as f64).sqrt()
}

fn require_detuned(detuning: f64) -> Result<()> {
    if detuning == 0.0 || !detuning.is_finite() {
        return Err(Error::NotDispersive(
            "zero detuning is the resonant regime, no dispersive limit".into(),
        ));
    }
    Ok(())
}

/// Second-order light shift of `|S,n>` from its blue-sideband partner
/// `|D,n+1>`: `Omega_{n,n+1}^2 / (4 detuning)`. The partner shifts by the
/// negative of this value.
pub fn dispersive_shift(n: usize, eta: f64, rabi_0: f64, detuning: f64) -> Result<f64> {
    require_detuned(detuning)?;
    Ok(sideband_rabi(n, eta, rabi_0).powi(2) / (4.0 * detuning))
}

/// Shift per phonon of a single level, `eta^2 rabi_0^2 / (4 detuning)`.
pub fn light_shift_unit(eta: f64, rabi_0: f64, detuning: f64) -> Result<f64> {
    dispersive_shift(0, eta, rabi_0, detuning)
}

/// Net S-D differential phase rate for motional state `n`.
///
/// `|S,n>` moves up by `(n+1) k` and `|D,n>` down by `n k`
/// (`k = eta^2 rabi_0^2 / 4 detuning`), so the differential rate is
/// `(2n+1) k` plus the motional-state independent budget.
pub fn ramsey_phase_rate(n: usize, eta: f64, rabi_0: f64, detuning: f64, budget: &ShiftBudget) -> Result<f64> {
    let k = light_shift_unit(eta, rabi_0, detuning)?;
    Ok((2 * n + 1) as f64 * k + budget.total())
}

/// How a "per phonon" rate is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlopeConvention {
    /// Shift of each level per phonon, `k`; S and D of the same `n` move in
    /// opposite directions, so the gate needs `k t0 = pi/2`.
    #[default]
    PerLevel,
    /// Differential Ramsey slope, `2 k` per phonon.
    Differential,
}

/// Per-phonon rate under `convention`.
pub fn per_phonon_rate(eta: f64, rabi_0: f64, detuning: f64, convention: SlopeConvention) -> Result<f64> {
    let k = light_shift_unit(eta, rabi_0, detuning)?;
    Ok(match convention {
        SlopeConvention::PerLevel => k,
        SlopeConvention::Differential => 2.0 * k,
    })
}

/// Largest sideband coupling must stay below the detuning:
/// `eta rabi_0 sqrt(n_max + 1) < |detuning|`.
pub fn check_dispersive(eta: f64, rabi_0: f64, detuning: f64, n_max: usize) -> Result<()> {
    require_detuned(detuning)?;
    let coupling = sideband_rabi(n_max, eta.abs(), rabi_0.abs());
    if coupling >= detuning.abs() {
        return Err(Error::NotDispersive(format!(
            "sideband Rabi frequency {:.4} kHz at n={} is not below the detuning {:.4} kHz",
            crate::units::to_khz(coupling),
            n_max,
            crate::units::to_khz(detuning.abs())
        )));
    }
    Ok(())
}

/// Compensation shift cancelling the n=0 differential rate.
pub fn compensation_solve(eta: f64, rabi_0: f64, detuning: f64, delta_other: f64, n_max: usize) -> Result<ShiftBudget> {
    check_dispersive(eta, rabi_0, detuning, n_max)?;
    let k = light_shift_unit(eta, rabi_0, detuning)?;
    Ok(ShiftBudget {
        delta_other,
        delta_comp: -(k + delta_other),
    })
}

/// Sparse Hermitian operator: real diagonal plus strictly-upper entries,
/// the lower triangle is implied by conjugation.
#[derive(Debug, Clone, PartialEq)]
pub struct Operator {
    pub dim: usize,
    pub diag: Vec<f64>,
    /// `(row, col, value)` with `row < col`, meaning `H[row][col] = value`.
    pub upper: Vec<(usize, usize, Complex64)>,
}

impl Operator {
    pub fn zeros(dim: usize) -> Self {
        Operator {
            dim,
            diag: vec![0.0; dim],
            upper: Vec::new(),
        }
    }

    /// Add `value` at `(row, col)` and its conjugate at `(col, row)`.
    pub fn add_coupling(&mut self, row: usize, col: usize, value: Complex64) {
        debug_assert_ne!(row, col);
        if row < col {
            self.upper.push((row, col, value));
        } else {
            self.upper.push((col, row, value.conj()));
        }
    }

    /// Merge duplicate entries and drop exact zeros.
    pub fn compact(&mut self) {
        self.upper.sort_by_key(|&(r, c, _)| (r, c));
        let mut merged: Vec<(usize, usize, Complex64)> = Vec::with_capacity(self.upper.len());
        for (r, c, v) in self.upper.drain(..) {
            match merged.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => merged.push((r, c, v)),
            }
        }
        merged.retain(|e| e.2 != Complex64::new(0.0, 0.0));
        self.upper = merged;
    }

    pub fn to_dense(&self) -> DMatrix<Complex64> {
        let mut m = DMatrix::from_element(self.dim, self.dim, Complex64::new(0.0, 0.0));
        for (i, d) in self.diag.iter().enumerate() {
            m[(i, i)] = Complex64::new(*d, 0.0);
        }
        for &(r, c, v) in &self.upper {
            m[(r, c)] += v;
            m[(c, r)] += v.conj();
        }
        m
    }

    /// Accept a dense matrix if it is Hermitian within 1e-12.
    pub fn from_dense(m: &DMatrix<Complex64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch(m.nrows(), m.ncols()));
        }
        let dim = m.nrows();
        let mut worst = 0.0_f64;
        for r in 0..dim {
            for c in r..dim {
                worst = worst.max((m[(r, c)] - m[(c, r)].conj()).norm());
            }
        }
        if worst > 1e-12 {
            return Err(Error::NotHermitian(worst));
        }
        let mut op = Operator::zeros(dim);
        for r in 0..dim {
            op.diag[r] = m[(r, r)].re;
            for c in r + 1..dim {
                let v = 0.5 * (m[(r, c)] + m[(c, r)].conj());
                if v != Complex64::new(0.0, 0.0) {
                    op.upper.push((r, c, v));
                }
            }
        }
        Ok(op)
    }

    /// `H psi`.
    pub fn apply(&self, psi: &[Complex64]) -> Vec<Complex64> {
        let mut out: Vec<Complex64> = self.diag.iter().zip(psi).map(|(d, a)| a * d).collect();
        for &(r, c, v) in &self.upper {
            out[r] += v * psi[c];
            out[c] += v.conj() * psi[r];
        }
        out
    }

    /// Sparse triplet dump: `row,col,re,im` over all stored entries of both
    /// triangles, labelled with basis labels.
    pub fn to_csv(&self, space: &SpaceSpec) -> String {
        let mut out = String::from("row,col,re,im\n");
        let mut entries: Vec<(usize, usize, Complex64)> = self
            .diag
            .iter()
            .enumerate()
            .filter(|(_, d)| **d != 0.0)
            .map(|(i, d)| (i, i, Complex64::new(*d, 0.0)))
            .collect();
        for &(r, c, v) in &self.upper {
            entries.push((r, c, v));
            entries.push((c, r, v.conj()));
        }
        entries.sort_by_key(|&(r, c, _)| (r, c));
        for (r, c, v) in entries {
            let _ = writeln!(out, "{},{},{:.15e},{:.15e}", space.label(r), space.label(c), v.re, v.im);
        }
        out
    }
}

/// A pulse operator together with the diagonal of its laser frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Hamiltonian {
    pub operator: Operator,
    /// Frame energies; after evolving for `t` the state is multiplied by
    /// `exp(+i frame t)` to return to the common interaction picture.
    pub frame: Vec<f64>,
    /// Basis states whose sideband ladder is cut by the truncation.
    pub ladder_edges: Vec<usize>,
}

/// Build the operator for `pulse` without noise offsets.
pub fn build_hamiltonian(
    space: &SpaceSpec,
    modes: &ModeSet,
    pulse: &PulseEvent,
    budget: &ShiftBudget,
) -> Result<Hamiltonian> {
    build_hamiltonian_with_offset(space, modes, pulse, budget, 0.0)
}

/// Build the operator for `pulse`; `qubit_offset` (rad/s) shifts the qubit
/// transition of every ion, modelling a quasi-static frequency error.
pub fn build_hamiltonian_with_offset(
    space: &SpaceSpec,
    modes: &ModeSet,
    pulse: &PulseEvent,
    budget: &ShiftBudget,
    qubit_offset: f64,
) -> Result<Hamiltonian> {
    pulse.validate()?;
    if modes.ion_count() != space.ion_count {
        return Err(Error::DimensionMismatch(modes.ion_count(), space.ion_count));
    }
    for slot in &space.modes {
        if slot.mode >= modes.mode_count() {
            return Err(Error::UnknownMode(slot.mode));
        }
    }
    let dim = space.dimension();
    let n_ions = space.ion_count;
    let mut op = Operator::zeros(dim);
    let mut frame = vec![0.0; dim];
    let mut ladder_edges = Vec::new();

    let addressed = match pulse.coupling {
        Coupling::BlueSideband(m) | Coupling::RedSideband(m) => Some(space.slot_of(m).ok_or(Error::UnknownMode(m))?),
        _ => None,
    };
    let with_budget = !matches!(pulse.coupling, Coupling::Carrier);
    let phase = Complex64::from_polar(1.0, pulse.phase);

    // strides of the mode slots in the motional index
    let mut strides = vec![1usize; space.modes.len()];
    for k in (0..space.modes.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * (space.modes[k + 1].n_max + 1);
    }
    let motional_dim = space.motional_dimension();

    for i in 0..dim {
        let n_d = space.excitation_count(i) as f64;
        let n_s = n_ions as f64 - n_d;
        let occ = space.occupations(i);

        let mut f = match pulse.coupling {
            Coupling::StaticShift => 0.0,
            _ => -pulse.detuning * n_d,
        };
        if let Some(a) = addressed {
            let w_a = modes.angular_frequency(space.modes[a].mode);
            for (k, slot) in space.modes.iter().enumerate() {
                f += (modes.angular_frequency(slot.mode) - w_a) * occ[k] as f64;
            }
        }
        frame[i] = f;
        let mut d = f + qubit_offset * n_d;
        if with_budget {
            d += budget.total() * n_s;
        }
        op.diag[i] = d;

        // couplings are generated from the S side of each ion
        for j in 0..n_ions {
            if space.is_excited(i, j) {
                continue;
            }
            let flip = motional_dim << (n_ions - 1 - j);
            match pulse.coupling {
                Coupling::Carrier => {
                    op.add_coupling(i + flip, i, 0.5 * pulse.rabi_0 * phase);
                }
                Coupling::BlueSideband(_) => {
                    for (k, slot) in space.modes.iter().enumerate() {
                        let eta = modes.eta[j][slot.mode];
                        if eta == 0.0 {
                            continue;
                        }
                        if occ[k] == slot.n_max {
                            ladder_edges.push(i);
                            continue;
                        }
                        let g = 0.5 * pulse.rabi_0 * eta * ((occ[k] + 1) as f64).sqrt();
                        op.add_coupling(i + flip + strides[k], i, g * phase);
                    }
                }
                Coupling::RedSideband(_) => {
                    for (k, slot) in space.modes.iter().enumerate() {
                        let eta = modes.eta[j][slot.mode];
                        if eta == 0.0 || occ[k] == 0 {
                            continue;
                        }
                        let g = 0.5 * pulse.rabi_0 * eta * (occ[k] as f64).sqrt();
                        op.add_coupling(i + flip - strides[k], i, g * phase);
                    }
                }
                Coupling::StaticShift => {}
            }
        }
        if matches!(pulse.coupling, Coupling::RedSideband(_)) {
            // D ions at the top of the ladder cannot return to S with n+1
            let top = space.modes.iter().enumerate().any(|(k, s)| occ[k] == s.n_max);
            if top && n_d > 0.0 {
                ladder_edges.push(i);
            }
        }
    }
    op.compact();
    ladder_edges.sort_unstable();
    ladder_edges.dedup();
    Ok(Hamiltonian {
        operator: op,
        frame,
        ladder_edges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::ModeSlot;
    use crate::modes::{normal_modes, IonCrystal};
    use crate::units::khz;
    use approx::assert_abs_diff_eq;
    use nalgebra::SymmetricEigen;

    fn modes(n: usize) -> ModeSet {
        normal_modes(&IonCrystal::new(n, khz(1712.0), 0.068).unwrap()).unwrap()
    }

    #[test]
    fn sideband_rabi_values() {
        // rabi_0 back-solved from the 11.9 kHz n=0 sideband Rabi frequency
        let r = sideband_rabi(0, 0.068, khz(175.0));
        assert_abs_diff_eq!(r / khz(1.0), 11.9, epsilon = 1e-9);
        let ratio = sideband_rabi(1, 0.068, 1.0) / sideband_rabi(0, 0.068, 1.0);
        assert_abs_diff_eq!(ratio, 2f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(sideband_rabi(3, 0.05, 7.0), 2.0 * 0.05 * 7.0, epsilon = 1e-15);
    }

    #[test]
    fn dispersive_shift_values() {
        // Omega_{n,n+1} = 12 kHz, detuning 60 kHz: 12^2 / 240 = 0.6 kHz
        let eta = 0.1;
        let rabi = khz(120.0);
        let s = dispersive_shift(0, eta, rabi, khz(60.0)).unwrap();
        assert_abs_diff_eq!(s / khz(1.0), 0.6, epsilon = 1e-12);
        let s10 = dispersive_shift(0, eta, rabi, khz(600.0)).unwrap();
        assert_abs_diff_eq!(s / s10, 10.0, epsilon = 1e-12);
        for n in 0..4 {
            let sn = dispersive_shift(n, eta, rabi, khz(60.0)).unwrap();
            assert_abs_diff_eq!(sn / s, (n + 1) as f64, epsilon = 1e-12);
        }
        assert!(matches!(
            dispersive_shift(0, eta, rabi, 0.0),
            Err(Error::NotDispersive(_))
        ));
    }

    #[test]
    fn compensated_rate_is_linear_in_n() {
        let (eta, rabi, det) = (0.068, khz(265.0), khz(60.0));
        let b = compensation_solve(eta, rabi, det, khz(100.0), 3).unwrap();
        let r0 = ramsey_phase_rate(0, eta, rabi, det, &b).unwrap();
        assert!(r0.abs() <= khz(0.3));
        assert_abs_diff_eq!(r0, 0.0, epsilon = 1e-9);
        let r1 = ramsey_phase_rate(1, eta, rabi, det, &b).unwrap();
        let r2 = ramsey_phase_rate(2, eta, rabi, det, &b).unwrap();
        assert_abs_diff_eq!(r2, 2.0 * r1, epsilon = 1e-9);

        // quadratic fit over n = 0..3 has zero curvature
        let r: Vec<f64> = (0..4)
            .map(|n| ramsey_phase_rate(n, eta, rabi, det, &b).unwrap() - r0)
            .collect();
        let second: Vec<f64> = r.windows(3).map(|w| w[2] - 2.0 * w[1] + w[0]).collect();
        assert!(second.iter().all(|x| x.abs() < 1e-9));
    }

    #[test]
    fn compensation_is_n_independent_and_idempotent() {
        let (eta, rabi, det) = (0.068, khz(200.0), khz(60.0));
        let none = compensation_solve(eta, rabi, det, 0.0, 3).unwrap();
        assert_abs_diff_eq!(none.delta_comp, -light_shift_unit(eta, rabi, det).unwrap());
        let raw = ShiftBudget::default();
        let r1_raw = ramsey_phase_rate(1, eta, rabi, det, &raw).unwrap();
        let r1 = ramsey_phase_rate(1, eta, rabi, det, &none).unwrap();
        assert_abs_diff_eq!(r1_raw - r1, -none.delta_comp, epsilon = 1e-9);

        let first = compensation_solve(eta, rabi, det, khz(40.0), 3).unwrap();
        let again = compensation_solve(eta, rabi, det, first.delta_other, 3).unwrap();
        assert!((again.delta_comp - first.delta_comp).abs() <= 1e-12 * first.delta_comp.abs());
    }

    #[test]
    fn compensation_rejects_resonant_regime() {
        assert!(matches!(
            compensation_solve(0.068, khz(1000.0), khz(60.0), 0.0, 3),
            Err(Error::NotDispersive(_))
        ));
    }

    #[test]
    fn carrier_blocks() {
        let sp = SpaceSpec::single_ion(3).unwrap();
        let m = modes(1);
        let h = build_hamiltonian(
            &sp,
            &m,
            &PulseEvent::carrier(khz(50.0), 0.0, 1e-6),
            &ShiftBudget::default(),
        )
        .unwrap();
        let dense = h.operator.to_dense();
        for n in 0..4 {
            let s = sp.index_of(&[crate::hilbert::Level::S], &[n]).unwrap();
            let d = sp.index_of(&[crate::hilbert::Level::D], &[n]).unwrap();
            assert_abs_diff_eq!(dense[(d, s)].re, khz(50.0) / 2.0, epsilon = 1e-9);
            assert_abs_diff_eq!(dense[(d, s)].im, 0.0);
        }
        assert_eq!(h.operator.upper.len(), 4);
    }

    #[test]
    fn blue_sideband_sqrt_ladder() {
        use crate::hilbert::Level::{D, S};
        let sp = SpaceSpec::single_ion(3).unwrap();
        let m = modes(1);
        let p = PulseEvent::blue_sideband(0, khz(100.0), khz(60.0), 0.3, 1e-6);
        let h = build_hamiltonian(&sp, &m, &p, &ShiftBudget::default()).unwrap();
        let dense = h.operator.to_dense();
        let e01 = dense[(sp.index_of(&[D], &[1]).unwrap(), sp.index_of(&[S], &[0]).unwrap())];
        let e12 = dense[(sp.index_of(&[D], &[2]).unwrap(), sp.index_of(&[S], &[1]).unwrap())];
        assert_abs_diff_eq!((e12 / e01).re, 2f64.sqrt(), epsilon = 1e-14);
        assert_abs_diff_eq!((e12 / e01).im, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(e01.arg(), 0.3, epsilon = 1e-14);
        assert_eq!(h.ladder_edges, vec![sp.index_of(&[S], &[3]).unwrap()]);
    }

    #[test]
    fn two_ion_uniform_addressing() {
        use crate::hilbert::Level::{D, S};
        let sp = SpaceSpec::new(2, vec![ModeSlot { mode: 0, n_max: 2 }]).unwrap();
        let m = modes(2);
        let p = PulseEvent::blue_sideband(0, khz(100.0), khz(60.0), 0.0, 1e-6);
        let h = build_hamiltonian(&sp, &m, &p, &ShiftBudget::default()).unwrap();
        let dense = h.operator.to_dense();
        let dd1 = sp.index_of(&[D, D], &[1]).unwrap();
        let a = dense[(dd1, sp.index_of(&[S, D], &[0]).unwrap())];
        let b = dense[(dd1, sp.index_of(&[D, S], &[0]).unwrap())];
        assert!(a.norm() > 0.0);
        assert_abs_diff_eq!(a.norm(), b.norm(), epsilon = 1e-12);
    }

    #[test]
    fn operators_are_hermitian() {
        let sp = SpaceSpec::new(3, vec![ModeSlot { mode: 0, n_max: 2 }, ModeSlot { mode: 1, n_max: 1 }]).unwrap();
        let m = modes(3);
        let budget = ShiftBudget {
            delta_other: khz(3.0),
            delta_comp: -khz(2.0),
        };
        for coupling in [
            Coupling::Carrier,
            Coupling::BlueSideband(0),
            Coupling::RedSideband(1),
            Coupling::StaticShift,
        ] {
            let p = PulseEvent {
                coupling,
                rabi_0: khz(150.0),
                detuning: khz(40.0),
                phase: 1.1,
                duration: 1e-6,
            };
            let h = build_hamiltonian_with_offset(&sp, &m, &p, &budget, 123.0).unwrap();
            let d = h.operator.to_dense();
            let worst = (&d - d.adjoint()).iter().fold(0.0_f64, |w, z| w.max(z.norm()));
            assert!(worst <= 1e-14, "{coupling:?}");
        }
    }

    #[test]
    fn from_dense_rejects_non_hermitian() {
        let mut m = DMatrix::from_element(2, 2, Complex64::new(0.0, 0.0));
        m[(0, 1)] = Complex64::new(1.0, 0.0);
        assert!(matches!(Operator::from_dense(&m), Err(Error::NotHermitian(_))));
        m[(1, 0)] = Complex64::new(1.0, 0.0);
        let op = Operator::from_dense(&m).unwrap();
        assert_eq!(op.to_dense(), m);
    }

    #[test]
    fn unknown_mode_is_rejected() {
        let sp = SpaceSpec::single_ion(2).unwrap();
        let p = PulseEvent::blue_sideband(3, 1.0, 1.0, 0.0, 1.0);
        assert!(matches!(
            build_hamiltonian(&sp, &modes(1), &p, &ShiftBudget::default()),
            Err(Error::UnknownMode(3))
        ));
    }

    /// Dressed-state oracle: the pair (|S,n>, |D,n+1>) has eigenvalues
    /// -detuning/2 +- sqrt(Omega^2 + detuning^2)/2, and the upper one is
    /// the dispersive shift up to O(Omega^4 / detuning^3).
    #[test]
    fn dressed_pair_eigenvalues() {
        use crate::hilbert::Level::{D, S};
        let sp = SpaceSpec::single_ion(4).unwrap();
        let m = modes(1);
        let (rabi, det) = (khz(120.0), khz(60.0));
        let p = PulseEvent::blue_sideband(0, rabi, det, 0.7, 1e-6);
        let dense = build_hamiltonian(&sp, &m, &p, &ShiftBudget::default())
            .unwrap()
            .operator
            .to_dense();
        for n in 0..3 {
            let a = sp.index_of(&[S], &[n]).unwrap();
            let b = sp.index_of(&[D], &[n + 1]).unwrap();
            let block = DMatrix::from_row_slice(2, 2, &[dense[(a, a)], dense[(a, b)], dense[(b, a)], dense[(b, b)]]);
            let eig = SymmetricEigen::new(block);
            let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
            ev.sort_by(f64::total_cmp);
            let om = sideband_rabi(n, 0.068, rabi);
            let half = 0.5 * (om * om + det * det).sqrt();
            assert_abs_diff_eq!(ev[0], -det / 2.0 - half, epsilon = 1e-9 * det);
            assert_abs_diff_eq!(ev[1], -det / 2.0 + half, epsilon = 1e-9 * det);
            let second = dispersive_shift(n, 0.068, rabi, det).unwrap();
            let bound = 2.0 * om.powi(4) / (16.0 * det.powi(3));
            assert!((ev[1] - second).abs() <= bound);
        }
    }
}
