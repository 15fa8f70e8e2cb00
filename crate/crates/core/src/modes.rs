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

//! Axial normal modes of a linear Coulomb crystal.
//!
//! Lengths are in the natural unit of a harmonic axial trap with mutual
//! Coulomb repulsion, l = (e^2 / 4 pi eps0 m w_ax^2)^(1/3), in which the
//! scaled potential is `sum u_i^2 / 2 + sum_{i<j} 1 / |u_i - u_j|`.
//! Frequencies are in units of the axial (center-of-mass) frequency.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::{Error, Result};

/// Iteration cap of the damped Newton equilibrium solve.
pub const EQUILIBRIUM_MAX_ITER: usize = 200;
/// Gradient max-norm accepted as converged.
pub const EQUILIBRIUM_TOL: f64 = 1e-12;

/// Trap and ion parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IonCrystal {
    pub ion_count: usize,
    /// Axial center-of-mass frequency, rad/s.
    pub axial_frequency: f64,
    /// Lamb-Dicke factor of a single ion in the same trap.
    pub eta_single: f64,
}

impl IonCrystal {
    pub fn new(ion_count: usize, axial_frequency: f64, eta_single: f64) -> Result<Self> {
        let crystal = IonCrystal {
            ion_count,
            axial_frequency,
            eta_single,
        };
        crystal.validate()?;
        Ok(crystal)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ion_count == 0 {
            return Err(Error::InvalidParameter("ion_count must be >= 1".into()));
        }
        if !(self.axial_frequency > 0.0 && self.axial_frequency.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "axial_frequency must be positive, got {}",
                self.axial_frequency
            )));
        }
        if !(self.eta_single > 0.0 && self.eta_single < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "eta_single must lie in (0, 1), got {}",
                self.eta_single
            )));
        }
        Ok(())
    }
}

/// Axial normal modes with their Lamb-Dicke couplings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeSet {
    /// Equilibrium positions in trap length units, ascending.
    pub positions: Vec<f64>,
    /// Mode frequencies in units of the axial frequency, ascending;
    /// `frequencies[0] == 1.0` is the center-of-mass mode.
    pub frequencies: Vec<f64>,
    /// Row `m` is the unit displacement pattern of mode `m`.
    pub eigenvectors: Vec<Vec<f64>>,
    /// `eta[j][m]`: Lamb-Dicke factor of ion `j` on mode `m`.
    pub eta: Vec<Vec<f64>>,
    /// Axial frequency the dimensionless values refer to, rad/s.
    pub axial_frequency: f64,
}

impl ModeSet {
    pub fn ion_count(&self) -> usize {
        self.positions.len()
    }

    pub fn mode_count(&self) -> usize {
        self.frequencies.len()
    }

    /// Angular frequency of mode `m` in rad/s.
    pub fn angular_frequency(&self, m: usize) -> f64 {
        self.frequencies[m] * self.axial_frequency
    }
}

fn gradient(u: &[f64]) -> Vec<f64> {
    let n = u.len();
    (0..n)
        .map(|i| {
            let mut g = u[i];
            for j in 0..n {
                if j != i {
                    let d = u[i] - u[j];
                    g -= d.signum() / (d * d);
                }
            }
            g
        })
        .collect()
}

fn hessian(u: &[f64]) -> DMatrix<f64> {
    let n = u.len();
    let mut h = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut diag = 1.0;
        for j in 0..n {
            if j != i {
                let c = 2.0 / (u[i] - u[j]).abs().powi(3);
                diag += c;
                h[(i, j)] = -c;
            }
        }
        h[(i, i)] = diag;
    }
    h
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Equilibrium positions of `ion_count` ions, sorted ascending.
///
/// Damped Newton iteration from the asymptotic spacing ansatz; the step is
/// halved whenever it would increase the gradient norm.
pub fn equilibrium_positions(ion_count: usize) -> Result<Vec<f64>> {
    if ion_count == 0 {
        return Err(Error::InvalidParameter("ion_count must be >= 1".into()));
    }
    if ion_count == 1 {
        return Ok(vec![0.0]);
    }
    let n = ion_count as f64;
    // minimum spacing scales as ~2.018 N^-0.559 near the center
    let spacing = 2.018 * n.powf(-0.559);
    let mut u: Vec<f64> = (0..ion_count).map(|i| (i as f64 - (n - 1.0) / 2.0) * spacing).collect();

    let mut grad = gradient(&u);
    let mut residual = max_norm(&grad);
    for _ in 0..EQUILIBRIUM_MAX_ITER {
        if residual <= EQUILIBRIUM_TOL {
            break;
        }
        let h = hessian(&u);
        let g = nalgebra::DVector::from_column_slice(&grad);
        let step = match h.lu().solve(&g) {
            Some(s) => s,
            None => break,
        };
        let mut scale = 1.0;
        loop {
            let trial: Vec<f64> = u.iter().zip(step.iter()).map(|(x, s)| x - scale * s).collect();
            let ordered = trial.windows(2).all(|w| w[0] < w[1]);
            if ordered {
                let g_trial = gradient(&trial);
                let r_trial = max_norm(&g_trial);
                if r_trial < residual || scale < 1e-6 {
                    u = trial;
                    grad = g_trial;
                    residual = r_trial;
                    break;
                }
            }
            scale *= 0.5;
            if scale < 1e-6 {
                break;
            }
        }
    }
    // enforce the mirror symmetry exactly
    let sym: Vec<f64> = (0..ion_count).map(|i| 0.5 * (u[i] - u[ion_count - 1 - i])).collect();
    let residual = max_norm(&gradient(&sym));
    if residual > 1e-10 {
        return Err(Error::EquilibriumNotConverged {
            iterations: EQUILIBRIUM_MAX_ITER,
            residual,
        });
    }
    Ok(sym)
}

/// Axial normal modes of the crystal.
pub fn normal_modes(crystal: &IonCrystal) -> Result<ModeSet> {
    crystal.validate()?;
    let n = crystal.ion_count;
    let positions = equilibrium_positions(n)?;
    let h = hessian(&positions);
    let eig = SymmetricEigen::new(h);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    let mut frequencies = Vec::with_capacity(n);
    let mut eigenvectors = Vec::with_capacity(n);
    for (rank, &k) in order.iter().enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        if rank == 0 {
            // center of mass: the Hessian has eigenvalue 1 with the uniform vector
            let c = 1.0 / (n as f64).sqrt();
            debug_assert!(v.iter().all(|x| (x.abs() - c).abs() < 1e-8));
            v.iter_mut().for_each(|x| *x = c);
            frequencies.push(1.0);
        } else {
            // sign convention: last ion moves in the positive direction
            let pivot = v.iter().rev().find(|x| x.abs() > 1e-9).copied().unwrap_or(1.0);
            if pivot < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            frequencies.push(eig.eigenvalues[k].max(0.0).sqrt());
        }
        eigenvectors.push(v);
    }

    let mut modes = ModeSet {
        positions,
        frequencies,
        eigenvectors,
        eta: Vec::new(),
        axial_frequency: crystal.axial_frequency,
    };
    modes.eta = lamb_dicke_factors(crystal, &modes);
    Ok(modes)
}

/// Per-ion per-mode Lamb-Dicke factors, `eta[j][m] = eta_single b_m[j] / sqrt(w_m)`.
pub fn lamb_dicke_factors(crystal: &IonCrystal, modes: &ModeSet) -> Vec<Vec<f64>> {
    (0..crystal.ion_count)
        .map(|j| {
            modes
                .frequencies
                .iter()
                .zip(&modes.eigenvectors)
                .map(|(w, b)| crystal.eta_single * b[j] / w.sqrt())
                .collect()
        })
        .collect()
}

/// Indices of the bus mode followed by the `count` spectator modes closest
/// to it in frequency.
pub fn bus_and_spectators(modes: &ModeSet, count: usize) -> Vec<usize> {
    let mut rest: Vec<usize> = (1..modes.mode_count()).collect();
    rest.sort_by(|&a, &b| {
        (modes.frequencies[a] - 1.0)
            .abs()
            .total_cmp(&(modes.frequencies[b] - 1.0).abs())
    });
    std::iter::once(0).chain(rest.into_iter().take(count)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    // Golden-section minimization of a 1-D function, used as an independent
    // oracle for the symmetric small crystals.
    fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
        let r = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - r * (b - a);
            let d = a + r * (b - a);
            if f(c) < f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn single_ion_sits_at_center() {
        assert_eq!(equilibrium_positions(1).unwrap(), vec![0.0]);
    }

    #[test]
    fn two_ions_match_brute_force() {
        // u = +-x: V = x^2 + 1/(2x)
        let x = golden_min(|x| x * x + 1.0 / (2.0 * x), 0.1, 3.0);
        assert_abs_diff_eq!(x, 0.62996, epsilon = 1e-5);
        assert_abs_diff_eq!(x, 0.5f64.powf(2.0 / 3.0), epsilon = 1e-8);
        let u = equilibrium_positions(2).unwrap();
        assert_abs_diff_eq!(u[0], -x, epsilon = 1e-8);
        assert_abs_diff_eq!(u[1], x, epsilon = 1e-8);
    }

    #[test]
    fn three_ions_match_brute_force() {
        // u = (-x, 0, x): V = x^2 + 2/x + 1/(2x)
        let x = golden_min(|x| x * x + 2.0 / x + 1.0 / (2.0 * x), 0.1, 3.0);
        assert_abs_diff_eq!(x, 1.0772, epsilon = 1e-4);
        let u = equilibrium_positions(3).unwrap();
        assert_abs_diff_eq!(u[0], -x, epsilon = 1e-7);
        assert_abs_diff_eq!(u[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(u[2], x, epsilon = 1e-7);
    }

    #[test]
    fn equilibrium_gradient_vanishes_up_to_twenty_ions() {
        for n in 1..=20 {
            let u = equilibrium_positions(n).unwrap();
            assert!(max_norm(&gradient(&u)) <= 1e-10, "N={n}");
            assert!(u.windows(2).all(|w| w[0] < w[1]));
            for i in 0..n {
                assert_abs_diff_eq!(u[i], -u[n - 1 - i], epsilon = 1e-14);
            }
        }
    }

    fn crystal(n: usize) -> IonCrystal {
        IonCrystal::new(n, std::f64::consts::TAU * 1.712e6, 0.068).unwrap()
    }

    #[test]
    fn analytic_mode_frequencies() {
        let m1 = normal_modes(&crystal(1)).unwrap();
        assert_eq!(m1.frequencies, vec![1.0]);
        let m2 = normal_modes(&crystal(2)).unwrap();
        assert_abs_diff_eq!(m2.frequencies[1], 3f64.sqrt(), epsilon = 1e-9);
        let m3 = normal_modes(&crystal(3)).unwrap();
        assert_abs_diff_eq!(m3.frequencies[1], 3f64.sqrt(), epsilon = 1e-9);
        assert_abs_diff_eq!(m3.frequencies[2], (29.0f64 / 5.0).sqrt(), epsilon = 1e-9);
    }

    #[test]
    fn modes_are_orthonormal_and_sorted() {
        for n in 1..=10 {
            let m = normal_modes(&crystal(n)).unwrap();
            assert_eq!(m.frequencies[0], 1.0);
            assert!(m.frequencies.windows(2).all(|w| w[0] < w[1]), "N={n}");
            for a in 0..n {
                for b in 0..n {
                    let dot: f64 = (0..n).map(|j| m.eigenvectors[a][j] * m.eigenvectors[b][j]).sum();
                    let expect = if a == b { 1.0 } else { 0.0 };
                    assert_abs_diff_eq!(dot, expect, epsilon = 1e-12);
                }
            }
            let c = 1.0 / (n as f64).sqrt();
            assert!(m.eigenvectors[0].iter().all(|x| (x - c).abs() < 1e-12));
        }
    }

    #[test]
    fn eta_sum_rule_is_ion_independent() {
        for n in 1..=10 {
            let m = normal_modes(&crystal(n)).unwrap();
            let sums: Vec<f64> = (0..n)
                .map(|j| (0..n).map(|k| m.eta[j][k].powi(2) * m.frequencies[k]).sum())
                .collect();
            for s in &sums {
                assert_abs_diff_eq!(*s, 0.068f64.powi(2), epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn five_ion_bus_mode_eta() {
        let m = normal_modes(&crystal(5)).unwrap();
        for j in 0..5 {
            assert_abs_diff_eq!(m.eta[j][0].abs(), 0.068 / 5f64.sqrt(), epsilon = 1e-12);
            assert_abs_diff_eq!(m.eta[j][0].abs(), 0.0304, epsilon = 1e-4);
        }
        assert_eq!(bus_and_spectators(&m, 2), vec![0, 1, 2]);
    }

    #[test]
    fn single_ion_eta_and_frequency_scaling() {
        let m = normal_modes(&crystal(1)).unwrap();
        assert_eq!(m.eta, vec![vec![0.068]]);

        let base = crystal(4);
        let stiffer = IonCrystal::new(4, 2.0 * base.axial_frequency, base.eta_single / 2f64.sqrt()).unwrap();
        let a = normal_modes(&base).unwrap();
        let b = normal_modes(&stiffer).unwrap();
        for j in 0..4 {
            for k in 0..4 {
                assert_abs_diff_eq!(b.eta[j][k], a.eta[j][k] / 2f64.sqrt(), epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn rejects_invalid_crystals() {
        assert!(IonCrystal::new(0, 1.0, 0.1).is_err());
        assert!(IonCrystal::new(2, -1.0, 0.1).is_err());
        assert!(IonCrystal::new(2, 1.0, 1.5).is_err());
        assert!(equilibrium_positions(0).is_err());
    }
}
