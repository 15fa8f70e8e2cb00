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

//! Ideal gate matrices, gate-time conditions, sequence builders and truth
//! tables.
//!
//! The computational space of one ion and one mode is ordered
//! `(|S,0>, |D,0>, |S,1>, |D,1>)`; the internal level is the target qubit and
//! the Fock state the control.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, PI, SQRT_2};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::analysis::{fit_flop, fit_sine, FlopOptions, Point};
use crate::evolve::{run_sequence_with_offset, run_shots, Element, NoiseModel, Preparation, Readout, SequenceSpec};
use crate::hamiltonian::{check_dispersive, per_phonon_rate, PulseEvent, ShiftBudget, SlopeConvention};
use crate::hilbert::{prepare_levels, Level, SpaceSpec};
use crate::modes::ModeSet;
use crate::{Error, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);
const I: Complex64 = Complex64::new(0.0, 1.0);

/// Computational basis `(level, phonons)` in matrix order.
pub const COMPUTATIONAL: [(Level, usize); 4] = [(Level::S, 0), (Level::D, 0), (Level::S, 1), (Level::D, 1)];

/// Labels of [`COMPUTATIONAL`] as produced by phonon-resolved measurement.
pub const COMPUTATIONAL_LABELS: [&str; 4] = ["S,0", "D,0", "S,1", "D,1"];

/// A 4x4 unitary on the computational space.
#[derive(Debug, Clone, PartialEq)]
pub struct GateMatrix(pub DMatrix<Complex64>);

impl GateMatrix {
    pub fn new(m: DMatrix<Complex64>) -> Result<Self> {
        if m.nrows() != 4 || m.ncols() != 4 {
            return Err(Error::DimensionMismatch(m.nrows(), 4));
        }
        let g = GateMatrix(m);
        let err = g.unitarity_error();
        if err > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "matrix is not unitary (error {err:e})"
            )));
        }
        Ok(g)
    }

    fn diag(d: [Complex64; 4]) -> Self {
        let mut m = DMatrix::from_element(4, 4, ZERO);
        for k in 0..4 {
            m[(k, k)] = d[k];
        }
        GateMatrix(m)
    }

    /// `max |U U^dagger - 1|`.
    pub fn unitarity_error(&self) -> f64 {
        let p = &self.0 * self.0.adjoint();
        let mut worst = 0.0_f64;
        for r in 0..4 {
            for c in 0..4 {
                let e = if r == c { ONE } else { ZERO };
                worst = worst.max((p[(r, c)] - e).norm());
            }
        }
        worst
    }

    pub fn mul(&self, other: &GateMatrix) -> GateMatrix {
        GateMatrix(&self.0 * &other.0)
    }

    /// Phase-insensitive overlap `|Tr(U^dagger V)| / 4`.
    pub fn overlap(&self, other: &GateMatrix) -> f64 {
        (self.0.adjoint() * &other.0).trace().norm() / 4.0
    }

    /// Largest entry-wise difference.
    pub fn max_diff(&self, other: &GateMatrix) -> f64 {
        (&self.0 - &other.0).iter().fold(0.0, |w, z| w.max(z.norm()))
    }

    pub fn column(&self, k: usize) -> [Complex64; 4] {
        [self.0[(0, k)], self.0[(1, k)], self.0[(2, k)], self.0[(3, k)]]
    }
}

/// Conditional phase `diag(1, 1, e^{i pi t/2t0}, e^{-i pi t/2t0})`.
pub fn ideal_phase(t_over_t0: f64) -> Result<GateMatrix> {
    if !(t_over_t0 >= 0.0 && t_over_t0.is_finite()) {
        return Err(Error::InvalidParameter(format!("t/t0 must be >= 0, got {t_over_t0}")));
    }
    let phi = FRAC_PI_2 * t_over_t0;
    Ok(GateMatrix::diag([
        ONE,
        ONE,
        Complex64::from_polar(1.0, phi),
        Complex64::from_polar(1.0, -phi),
    ]))
}

/// Sign of the off-diagonal elements of a Ramsey pulse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RamseySign {
    /// R1
    Plus,
    /// R2
    Minus,
}

/// `(1/sqrt2) [[1, +-i], [+-i, 1]]` on each motional block.
pub fn ideal_ramsey(sign: RamseySign) -> GateMatrix {
    let s = match sign {
        RamseySign::Plus => I,
        RamseySign::Minus => -I,
    } * FRAC_1_SQRT_2;
    let d = Complex64::new(FRAC_1_SQRT_2, 0.0);
    let mut m = DMatrix::from_element(4, 4, ZERO);
    for b in [0, 2] {
        m[(b, b)] = d;
        m[(b + 1, b + 1)] = d;
        m[(b, b + 1)] = s;
        m[(b + 1, b)] = s;
    }
    GateMatrix(m)
}

/// Carrier phase that realises [`ideal_ramsey`] for a resonant pi/2 pulse.
pub fn ramsey_phase(sign: RamseySign) -> f64 {
    match sign {
        RamseySign::Plus => PI,
        RamseySign::Minus => 0.0,
    }
}

/// The composite gate `C = R2 Phi(t0) R1`.
pub fn composite_gate() -> GateMatrix {
    let mut m = DMatrix::from_element(4, 4, ZERO);
    m[(0, 0)] = ONE;
    m[(1, 1)] = ONE;
    m[(2, 3)] = -ONE;
    m[(3, 2)] = ONE;
    GateMatrix(m)
}

/// `t0` at which the n=1 states have acquired a relative phase of pi.
pub fn gate_time_from_rate(rate: f64) -> Result<f64> {
    if rate == 0.0 || !rate.is_finite() {
        return Err(Error::InvalidParameter("zero phase rate gives no gate time".into()));
    }
    Ok(FRAC_PI_2 / rate.abs())
}

/// Gate time `(pi/2) / rate` with the per-phonon rate read under
/// `convention`.
pub fn gate_time(eta: f64, rabi_0: f64, detuning: f64, convention: SlopeConvention) -> Result<f64> {
    check_dispersive(eta, rabi_0, detuning, 1)?;
    gate_time_from_rate(per_phonon_rate(eta, rabi_0, detuning, convention)?)
}

/// Time after which `|SS..S>` acquires the phase -1 under the collective
/// dispersive coupling: `2 pi Delta / (eta^2 Omega^2)`. The bare expression
/// `Delta / (eta^2 Omega^2)` must be read with cyclic frequencies; in
/// angular units it acquires the factor 2 pi.
pub fn entangle_time(eta_bus: f64, rabi_0: f64, detuning: f64) -> Result<f64> {
    check_dispersive(eta_bus, rabi_0, detuning, 0)?;
    Ok(2.0 * PI * detuning.abs() / (eta_bus * rabi_0).powi(2))
}

/// Phase of the final pi/2 pulse of the GHZ sequence: `r1 + pi` for an odd
/// and `r1 + pi/2` for an even number of ions.
pub fn ghz_r2_phase(ion_count: usize, r1_phase: f64) -> f64 {
    if ion_count % 2 == 1 {
        r1_phase + PI
    } else {
        r1_phase + FRAC_PI_2
    }
}

/// Parameters of the N-ion entangling sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GhzParams {
    pub ion_count: usize,
    pub bus_mode: usize,
    /// Dispersive beam, rad/s.
    pub rabi_0: f64,
    pub detuning: f64,
    /// Duration of the dispersive pulse, s.
    pub phi_time: f64,
    /// Carrier Rabi frequency of the pi/2 pulses, rad/s.
    pub carrier_rabi: f64,
    pub r1_phase: f64,
}

/// `pi/2 (r1) -> dispersive bus pulse -> pi/2 (parity-dependent phase)`,
/// all ions illuminated uniformly.
pub fn ghz_sequence(p: &GhzParams) -> Result<SequenceSpec> {
    if p.ion_count < 2 {
        return Err(Error::InvalidParameter(
            "the entangling sequence needs at least 2 ions".into(),
        ));
    }
    if !(p.carrier_rabi > 0.0) {
        return Err(Error::InvalidParameter("carrier Rabi frequency must be > 0".into()));
    }
    let t = FRAC_PI_2 / p.carrier_rabi;
    Ok(SequenceSpec::new(
        vec![
            Element::Pulse(PulseEvent::carrier(p.carrier_rabi, p.r1_phase, t)),
            Element::Pulse(PulseEvent::blue_sideband(
                p.bus_mode, p.rabi_0, p.detuning, 0.0, p.phi_time,
            )),
            Element::Pulse(PulseEvent::carrier(
                p.carrier_rabi,
                ghz_r2_phase(p.ion_count, p.r1_phase),
                t,
            )),
        ],
        p.carrier_rabi,
    ))
}

/// Parameters of the single-ion conditional-phase gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub mode: usize,
    pub rabi_0: f64,
    pub detuning: f64,
    pub phi_time: f64,
    pub carrier_rabi: f64,
}

/// `R1 -> dispersive pulse -> R2`.
pub fn gate_sequence(p: &GateParams) -> SequenceSpec {
    let t = FRAC_PI_2 / p.carrier_rabi;
    SequenceSpec::new(
        vec![
            Element::Pulse(PulseEvent::carrier(p.carrier_rabi, ramsey_phase(RamseySign::Plus), t)),
            Element::Pulse(PulseEvent::blue_sideband(p.mode, p.rabi_0, p.detuning, 0.0, p.phi_time)),
            Element::Pulse(PulseEvent::carrier(p.carrier_rabi, ramsey_phase(RamseySign::Minus), t)),
        ],
        p.carrier_rabi,
    )
}

fn single_ion_check(space: &SpaceSpec) -> Result<()> {
    if space.ion_count != 1 || space.modes.is_empty() || space.modes[0].n_max < 1 {
        return Err(Error::InvalidParameter(
            "the computational space needs one ion and a first mode with n_max >= 1".into(),
        ));
    }
    Ok(())
}

fn basis_phonons(space: &SpaceSpec, n: usize) -> Vec<usize> {
    let mut ph = vec![0; space.modes.len()];
    ph[0] = n;
    ph
}

/// Noiseless channel restricted to the computational space: column k is the
/// projection of the evolved k-th basis state. Population leaving the
/// subspace shows up as a non-unitary block.
pub fn simulated_gate_matrix(
    space: &SpaceSpec,
    modes: &ModeSet,
    seq: &SequenceSpec,
    budget: &ShiftBudget,
) -> Result<DMatrix<Complex64>> {
    single_ion_check(space)?;
    let mut m = DMatrix::from_element(4, 4, ZERO);
    for (k, (l, n)) in COMPUTATIONAL.iter().enumerate() {
        let s0 = prepare_levels(space, &[*l], &basis_phonons(space, *n))?;
        let (s, _) = run_sequence_with_offset(space, modes, seq, &s0, budget, 0.0)?;
        for (r, (l2, n2)) in COMPUTATIONAL.iter().enumerate() {
            m[(r, k)] = s.amplitude(&[*l2], &basis_phonons(space, *n2))?;
        }
    }
    Ok(m)
}

/// How the motional state is read out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum TruthReadout {
    /// Project internal level and phonon number directly.
    Fast,
    /// Drive a resonant blue-sideband flop after the gate, record `P_D(tau)`
    /// and fit the four-population flop model.
    Flop {
        /// Carrier Rabi frequency of the readout beam, rad/s.
        rabi_0: f64,
        /// Flop durations, s.
        taus: Vec<f64>,
    },
}

/// Rows: inputs; columns: outputs, both in [`COMPUTATIONAL`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthTable {
    pub probabilities: [[f64; 4]; 4],
    pub stderr: [[f64; 4]; 4],
    /// Mean population outside the computational space, per input.
    pub leakage: [f64; 4],
    pub shots: usize,
    pub repetitions: usize,
    pub readout: TruthReadout,
}

impl TruthTable {
    /// `input,S0,D0,S1,D1,stderr_S0,...,leakage`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("input,S0,D0,S1,D1,stderr_S0,stderr_D0,stderr_S1,stderr_D1,leakage\n");
        let names = ["S0", "D0", "S1", "D1"];
        for r in 0..4 {
            s.push_str(names[r]);
            for c in 0..4 {
                s.push_str(&format!(",{:.4}", self.probabilities[r][c]));
            }
            for c in 0..4 {
                s.push_str(&format!(",{:.4}", self.stderr[r][c]));
            }
            s.push_str(&format!(",{:.4}\n", self.leakage[r]));
        }
        s
    }

    /// Diagonal of `S0, D0` and the anti-diagonal of the n=1 block: the
    /// entries an ideal C gate sets to one.
    pub fn bold(&self) -> [f64; 4] {
        [
            self.probabilities[0][0],
            self.probabilities[1][1],
            self.probabilities[2][3],
            self.probabilities[3][2],
        ]
    }
}

/// A gate channel: sequence, light-shift budget and optional noise.
#[derive(Debug, Clone)]
pub struct Channel<'a> {
    pub space: &'a SpaceSpec,
    pub modes: &'a ModeSet,
    pub sequence: &'a SequenceSpec,
    pub budget: ShiftBudget,
    pub noise: Option<&'a NoiseModel>,
}

fn mean_and_err(samples: &[f64], binomial_shots: usize) -> (f64, f64) {
    let k = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / k;
    if samples.len() > 1 {
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
        (mean, (var / k).sqrt())
    } else {
        (mean, (mean * (1.0 - mean) / binomial_shots as f64).sqrt())
    }
}

/// Run the channel on the four basis inputs. Each repetition uses `shots`
/// shots per input (per flop point in flop mode); results are averaged
/// over repetitions. Input `r`, repetition `k` draws from seed
/// `seed + r` at streams `k * shots ..`.
pub fn truth_table(
    channel: &Channel,
    readout: &TruthReadout,
    shots: usize,
    repetitions: usize,
    seed: u64,
    threads: usize,
) -> Result<TruthTable> {
    single_ion_check(channel.space)?;
    if shots == 0 || repetitions == 0 {
        return Err(Error::InvalidParameter("shots and repetitions must be >= 1".into()));
    }
    let mut table = TruthTable {
        probabilities: [[0.0; 4]; 4],
        stderr: [[0.0; 4]; 4],
        leakage: [0.0; 4],
        shots,
        repetitions,
        readout: readout.clone(),
    };
    match readout {
        TruthReadout::Fast => {
            for r in 0..4 {
                let prep = basis_preparation(channel.space, r);
                let all = run_shots(
                    channel.space,
                    channel.modes,
                    channel.sequence,
                    &prep,
                    &channel.budget,
                    channel.noise,
                    shots * repetitions,
                    seed.wrapping_add(r as u64),
                    threads,
                    Readout { project_phonons: true },
                )?;
                let mut per_rep = vec![[0.0; 4]; repetitions];
                let mut leak = Vec::with_capacity(repetitions);
                for (k, chunk) in all.chunks(shots).enumerate() {
                    let mut counts = [0usize; 4];
                    for s in chunk {
                        if let Some(c) = outcome_index(&s.outcome) {
                            counts[c] += 1;
                        }
                    }
                    let inside: usize = counts.iter().sum();
                    leak.push(1.0 - inside as f64 / shots as f64);
                    for c in 0..4 {
                        per_rep[k][c] = if inside > 0 {
                            counts[c] as f64 / inside as f64
                        } else {
                            0.0
                        };
                    }
                }
                for c in 0..4 {
                    let col: Vec<f64> = per_rep.iter().map(|p| p[c]).collect();
                    let (m, e) = mean_and_err(&col, shots * repetitions);
                    table.probabilities[r][c] = m;
                    table.stderr[r][c] = e;
                }
                table.leakage[r] = leak.iter().sum::<f64>() / repetitions as f64;
            }
        }
        TruthReadout::Flop { rabi_0, taus } => {
            let records = flop_records(channel, *rabi_0, taus, shots, repetitions, seed, threads)?;
            let eta = channel.modes.eta[0][channel.space.modes[0].mode].abs();
            // first pass: a pure sine fit of the |S,0> input fixes W01
            let predicted = 0.5 * eta * rabi_0;
            let hint = fit_sine(&records[0].0[0])
                .ok()
                .map(|f| f.omega)
                .filter(|w| (w / predicted - 1.0).abs() < 0.2)
                .unwrap_or(predicted);
            for (r, (per_rep, leak)) in records.iter().enumerate() {
                let mut coef = vec![[0.0; 4]; repetitions];
                let mut fit_err = [0.0; 4];
                for (k, data) in per_rep.iter().enumerate() {
                    let f = fit_flop(
                        data,
                        FlopOptions {
                            lock_sqrt2: true,
                            fixed_frequencies: None,
                            omega01_hint: Some(hint),
                        },
                    )?;
                    coef[k] = f.coefficients();
                    let e = f.stderr();
                    for c in 0..4 {
                        fit_err[c] += e[c] / repetitions as f64;
                    }
                }
                for c in 0..4 {
                    let col: Vec<f64> = coef.iter().map(|p| p[c]).collect();
                    let (m, e) = mean_and_err(&col, shots);
                    table.probabilities[r][c] = m;
                    table.stderr[r][c] = if repetitions > 1 { e } else { fit_err[c] };
                }
                table.leakage[r] = *leak;
            }
        }
    }
    Ok(table)
}

fn outcome_index(label: &str) -> Option<usize> {
    COMPUTATIONAL_LABELS.iter().position(|l| *l == label)
}

/// Per input: per repetition the `(tau, P_D, stderr)` record, and the mean
/// simulated leakage at the end of the gate.
type FlopRecords = Vec<(Vec<Vec<Point>>, f64)>;

fn flop_records(
    channel: &Channel,
    rabi_0: f64,
    taus: &[f64],
    shots: usize,
    repetitions: usize,
    seed: u64,
    threads: usize,
) -> Result<FlopRecords> {
    let mut out = Vec::with_capacity(4);
    for r in 0..4 {
        let per_rep = (0..repetitions)
            .map(|k| {
                let s = seed.wrapping_add(((r * repetitions + k) as u64) << 20);
                flop_scan(channel, r, rabi_0, taus, shots, s, threads)
            })
            .collect::<Result<Vec<_>>>()?;
        let prep = basis_preparation(channel.space, r);
        let gate = run_shots(
            channel.space,
            channel.modes,
            channel.sequence,
            &prep,
            &channel.budget,
            channel.noise,
            shots,
            seed.wrapping_add(r as u64),
            threads,
            Readout::default(),
        )?;
        let leak = gate.iter().map(|s| s.leakage).sum::<f64>() / gate.len() as f64;
        out.push((per_rep, leak));
    }
    Ok(out)
}

/// Preparation of computational basis state `input` (0..4).
pub fn basis_preparation(space: &SpaceSpec, input: usize) -> Preparation {
    let (l, n) = COMPUTATIONAL[input];
    Preparation {
        levels: vec![l; space.ion_count],
        phonons: basis_phonons(space, n),
    }
}

/// Resonant blue-sideband flop on the first mode after the channel, for
/// basis input `input`: `(tau, P_D, binomial stderr)` with `shots` shots per
/// point. Point `i` draws from seed `seed + (i << 8)`.
///
/// The readout pulse phase is not locked to the gate pulses. Half the
/// shots of each point use phase 0 and half use phase pi, which removes
/// the `|S,n> <-> |D,n+1>` coherences exactly and leaves the incoherent
/// mixture that the flop model describes.
pub fn flop_scan(
    channel: &Channel,
    input: usize,
    rabi_0: f64,
    taus: &[f64],
    shots: usize,
    seed: u64,
    threads: usize,
) -> Result<Vec<Point>> {
    if input >= 4 {
        return Err(Error::InvalidParameter(format!("basis input {input} out of range")));
    }
    let mode = channel.space.modes[0].mode;
    let prep = basis_preparation(channel.space, input);
    let mut out = Vec::with_capacity(taus.len());
    for (i, tau) in taus.iter().enumerate() {
        let mut dark = 0usize;
        for (half, phase) in [(0usize, 0.0), (1, PI)] {
            let n = if half == 0 { shots.div_ceil(2) } else { shots / 2 };
            if n == 0 {
                continue;
            }
            let mut seq = channel.sequence.clone();
            seq.elements.push(Element::Probe(PulseEvent::blue_sideband(
                mode, rabi_0, 0.0, phase, *tau,
            )));
            let all = run_shots(
                channel.space,
                channel.modes,
                &seq,
                &prep,
                &channel.budget,
                channel.noise,
                n,
                seed.wrapping_add(((i as u64) << 8) + ((half as u64) << 7)),
                threads,
                Readout::default(),
            )?;
            dark += all.iter().filter(|s| s.outcome == "D").count();
        }
        let d = dark as f64 / shots as f64;
        out.push((*tau, d, (d * (1.0 - d) / shots as f64).sqrt()));
    }
    Ok(out)
}

/// Expected Bell/GHZ target `(|S..S> + e^{i phi} |D..D>)/sqrt2` fidelity
/// maximised over `phi`: `(P_S + P_D)/2 + |c_S c_D|`.
pub fn ghz_fidelity(p_all_s: f64, p_all_d: f64, coherence: f64) -> f64 {
    0.5 * (p_all_s + p_all_d) + coherence
}

/// Ratio of the n=1 to n=0 sideband Rabi frequencies.
pub const SIDEBAND_RATIO: f64 = SQRT_2;
