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

//! Experiment drivers behind the `iontrap` subcommands.
//!
//! Each driver takes a validated [`ExperimentConfig`] and returns a typed
//! result; [`CommandOutput`] conversion renders it into CSV files and the
//! `results` block of the JSON summary.

use std::f64::consts::{FRAC_PI_2, PI, SQRT_2, TAU};
use std::path::Path;

use num_complex::Complex64;
use serde::Serialize;

use crate::analysis::{
    fit_flop, fit_polynomial, fit_sine, fit_stark_slope, ramsey_contrast, FitResult, FlopOptions, LineFit, Point,
    PolyFit, SineFit, FLOP_PARAMETERS,
};
use crate::config::{ExperimentConfig, ReadoutKind};
use crate::evolve::{
    monte_carlo, run_sequence_with_offset, CompiledSequence, Element, NoiseModel, Preparation, Propagator, Readout,
    SequenceSpec,
};
use crate::gates::{
    entangle_time, flop_scan, gate_sequence, gate_time, ghz_fidelity, ghz_r2_phase, truth_table, Channel, GateParams,
    TruthReadout, TruthTable,
};
use crate::hamiltonian::{
    build_hamiltonian, check_dispersive, compensation_solve, light_shift_unit, PulseEvent, ShiftBudget,
};
use crate::hilbert::{prepare_levels, Level, ModeSlot, SpaceSpec, StateVector};
use crate::modes::{bus_and_spectators, equilibrium_positions, normal_modes, IonCrystal, ModeSet};
use crate::report::{num, Artifact, CommandOutput, Csv};
use crate::units::{khz, to_khz, to_us, us};
use crate::{Error, Result};

/// Largest Hilbert space the GHZ experiment runs without a warning.
pub const GHZ_DIMENSION_GUARD: usize = 32 * 27;

/// Single-ion gate: state space, modes and the R1 - dispersive - R2 schedule.
#[derive(Debug, Clone)]
pub struct GateSetup {
    pub space: SpaceSpec,
    pub modes: ModeSet,
    pub eta: f64,
    pub rabi_0: f64,
    pub detuning: f64,
    pub t0: f64,
    pub phi_time: f64,
    pub budget: ShiftBudget,
    pub sequence: SequenceSpec,
}

fn single_ion_modes(cfg: &ExperimentConfig) -> Result<ModeSet> {
    if cfg.crystal.ion_count != 1 {
        return Err(Error::Config(format!(
            "this experiment uses a single ion; crystal.ion_count is {}",
            cfg.crystal.ion_count
        )));
    }
    normal_modes(&IonCrystal::new(1, cfg.axial_frequency(), cfg.crystal.eta_single)?)
}

fn single_ion_space(cfg: &ExperimentConfig, modes: &ModeSet, n_max: usize) -> Result<SpaceSpec> {
    let mode = cfg.gate.mode;
    if mode >= modes.mode_count() {
        return Err(Error::Config(format!("gate.mode {mode} does not exist")));
    }
    SpaceSpec::with_cap(1, vec![ModeSlot { mode, n_max }], cfg.space.dimension_cap)
}

/// Compensated or bare light-shift budget for a dispersive beam.
pub fn shift_budget(cfg: &ExperimentConfig, eta: f64, rabi_0: f64, detuning: f64, n_max: usize) -> Result<ShiftBudget> {
    if cfg.shift.compensate {
        compensation_solve(eta, rabi_0, detuning, cfg.shift_other(), n_max)
    } else {
        check_dispersive(eta, rabi_0, detuning, n_max)?;
        Ok(ShiftBudget {
            delta_other: cfg.shift_other(),
            delta_comp: 0.0,
        })
    }
}

pub fn gate_setup(cfg: &ExperimentConfig) -> Result<GateSetup> {
    let modes = single_ion_modes(cfg)?;
    let space = single_ion_space(cfg, &modes, cfg.space.n_max)?;
    let eta = modes.eta[0][cfg.gate.mode].abs();
    let rabi_0 = cfg.gate_rabi();
    let detuning = cfg.detuning();
    let budget = shift_budget(cfg, eta, rabi_0, detuning, cfg.space.n_max)?;
    let t0 = gate_time(eta, rabi_0, detuning, cfg.gate.slope_convention)?;
    let phi_time = cfg.gate.phi_time_us.map(us).unwrap_or(cfg.gate.phi_time_factor * t0);
    let sequence = gate_sequence(&GateParams {
        mode: cfg.gate.mode,
        rabi_0,
        detuning,
        phi_time,
        carrier_rabi: cfg.carrier_rabi(),
    });
    Ok(GateSetup {
        space,
        modes,
        eta,
        rabi_0,
        detuning,
        t0,
        phi_time,
        budget,
        sequence,
    })
}

fn noise_for(cfg: &ExperimentConfig, phi_time: f64) -> Result<Option<NoiseModel>> {
    if cfg.noise.enabled {
        Ok(Some(cfg.noise_model(phi_time)?))
    } else {
        Ok(None)
    }
}

// ---------------------------------------------------------------- stark

/// Fringe phase of one Ramsey delay.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FringeRecord {
    pub n: usize,
    pub delay: f64,
    pub phase_offset: f64,
    pub unwrapped: f64,
    pub phase_err: f64,
    pub contrast: f64,
}

/// Ramsey phase rate with the dispersive beam on, for Fock state n.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StarkLevel {
    pub n: usize,
    /// rad/s
    pub rate: f64,
    pub rate_err: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibrationStep {
    pub rabi_0: f64,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StarkResult {
    pub rabi_0: f64,
    pub detuning: f64,
    pub eta: f64,
    pub budget: ShiftBudget,
    pub levels: Vec<StarkLevel>,
    pub fringes: Vec<FringeRecord>,
    pub line: LineFit,
    /// Degree-2 fit; `coefficients[2]` is the curvature per phonon^2.
    pub quadratic: PolyFit,
    pub max_linear_residual: f64,
    /// Dispersive-limit differential slope `2 kappa`.
    pub closed_form_slope: f64,
    pub calibration: Vec<CalibrationStep>,
}

fn wrap(x: f64) -> f64 {
    let y = x.rem_euclid(TAU);
    if y > PI {
        y - TAU
    } else {
        y
    }
}

struct StarkRun<'a> {
    cfg: &'a ExperimentConfig,
    space: SpaceSpec,
    modes: ModeSet,
    eta: f64,
    threads: usize,
}

impl StarkRun<'_> {
    fn fringe(&self, n: usize, rabi_0: f64, budget: &ShiftBudget, delay: f64, seed: u64) -> Result<Vec<Point>> {
        let cfg = self.cfg;
        let carrier = cfg.carrier_rabi();
        let p = cfg.stark.phase_points;
        let prep = Preparation {
            levels: vec![Level::S],
            phonons: vec![n],
        };
        let initial = prep.state(&self.space)?;
        let mut pts = Vec::with_capacity(p);
        for k in 0..p {
            let phase = TAU * k as f64 / (p - 1) as f64;
            let mut el = vec![Element::Pulse(PulseEvent::carrier(carrier, PI, FRAC_PI_2 / carrier))];
            if delay > 0.0 {
                el.push(Element::Pulse(PulseEvent::blue_sideband(
                    cfg.gate.mode,
                    rabi_0,
                    cfg.detuning(),
                    0.0,
                    delay,
                )));
            }
            el.push(Element::Pulse(PulseEvent::carrier(carrier, phase, FRAC_PI_2 / carrier)));
            let seq = SequenceSpec::new(el, carrier);
            if cfg.stark.exact {
                let (s, _) = run_sequence_with_offset(&self.space, &self.modes, &seq, &initial, budget, 0.0)?;
                pts.push((phase, excited_population(&s), 0.0));
            } else {
                let st = monte_carlo(
                    &self.space,
                    &self.modes,
                    &seq,
                    &prep,
                    budget,
                    None,
                    cfg.run.shots,
                    seed.wrapping_add(k as u64),
                    self.threads,
                    Readout::default(),
                )?;
                pts.push((phase, st.frequency("D"), st.stderr("D").max(0.5 / cfg.run.shots as f64)));
            }
        }
        Ok(pts)
    }

    fn measure(&self, rabi_0: f64) -> Result<(ShiftBudget, Vec<StarkLevel>, Vec<FringeRecord>)> {
        let cfg = self.cfg;
        let n_levels = cfg.space.n_max;
        let budget = shift_budget(cfg, self.eta, rabi_0, cfg.detuning(), n_levels + 1)?;
        let mut delays = cfg.stark.delays_us.iter().map(|t| us(*t)).collect::<Vec<_>>();
        delays.sort_by(f64::total_cmp);
        let mut levels = Vec::new();
        let mut fringes = Vec::new();
        for n in 0..=n_levels {
            let mut unwrapped = 0.0;
            let mut prev: Option<f64> = None;
            let mut line = Vec::new();
            for (i, d) in delays.iter().enumerate() {
                let seed = cfg.run.seed.wrapping_add(((n as u64) << 24) + ((i as u64) << 12));
                let f = ramsey_contrast(&self.fringe(n, rabi_0, &budget, *d, seed)?)?;
                // the fringe phase moves opposite to the accumulated S-D phase
                let phi = -f.phase_offset;
                unwrapped = match prev {
                    None => phi,
                    Some(p) => unwrapped + wrap(phi - p),
                };
                prev = Some(phi);
                line.push((*d, unwrapped, f.phase_err));
                fringes.push(FringeRecord {
                    n,
                    delay: *d,
                    phase_offset: f.phase_offset,
                    unwrapped,
                    phase_err: f.phase_err,
                    contrast: f.contrast,
                });
            }
            let fit = fit_stark_slope(&line)?;
            levels.push(StarkLevel {
                n,
                rate: fit.slope,
                // exact populations: residual scatter is rounding, not noise
                rate_err: if cfg.stark.exact { 0.0 } else { fit.slope_err },
            });
        }
        Ok((budget, levels, fringes))
    }
}

fn excited_population(s: &StateVector) -> f64 {
    s.amplitudes
        .iter()
        .enumerate()
        .filter(|(i, _)| s.space.excitation_count(*i) > 0)
        .map(|(_, a)| a.norm_sqr())
        .sum()
}

fn slope_of(levels: &[StarkLevel]) -> Result<LineFit> {
    let pts: Vec<Point> = levels.iter().map(|l| (l.n as f64, l.rate, l.rate_err)).collect();
    fit_stark_slope(&pts)
}

/// Ramsey phase rate versus Fock state with the dispersive beam in the gap,
/// and the straight-line fit over n. With `stark.target_slope_khz` set,
/// Omega0 is first iterated as `Omega0 <- Omega0 sqrt(target / slope)`.
pub fn stark_scan(cfg: &ExperimentConfig, threads: usize) -> Result<StarkResult> {
    let modes = single_ion_modes(cfg)?;
    // one level of headroom above the highest scanned Fock state
    let space = single_ion_space(cfg, &modes, cfg.space.n_max + 1)?;
    let eta = modes.eta[0][cfg.gate.mode].abs();
    let run = StarkRun {
        cfg,
        space,
        modes,
        eta,
        threads,
    };
    let mut rabi_0 = cfg.gate_rabi();
    let mut calibration = Vec::new();
    if let Some(target) = cfg.stark.target_slope_khz.map(khz) {
        for _ in 0..cfg.stark.calibration_rounds {
            let (_, levels, _) = run.measure(rabi_0)?;
            let slope = slope_of(&levels)?.slope;
            calibration.push(CalibrationStep { rabi_0, slope });
            if !(slope > 0.0) {
                return Err(Error::InvalidParameter(
                    "calibration needs a positive Stark slope".into(),
                ));
            }
            rabi_0 *= (target / slope).sqrt();
        }
    }
    let (budget, levels, fringes) = run.measure(rabi_0)?;
    let line = slope_of(&levels)?;
    let pts: Vec<Point> = levels.iter().map(|l| (l.n as f64, l.rate, l.rate_err)).collect();
    let quadratic = fit_polynomial(&pts, 2.min(pts.len() - 1))?;
    let max_linear_residual = line.residuals.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
    Ok(StarkResult {
        rabi_0,
        detuning: cfg.detuning(),
        eta,
        budget,
        levels,
        fringes,
        line,
        quadratic,
        max_linear_residual,
        closed_form_slope: 2.0 * light_shift_unit(eta, rabi_0, cfg.detuning())?,
        calibration,
    })
}

impl StarkResult {
    pub fn curvature(&self) -> f64 {
        self.quadratic.coefficients.get(2).copied().unwrap_or(0.0)
    }

    pub fn output(&self) -> CommandOutput {
        let mut csv = Csv::new(&["n", "shift_khz", "stderr_khz", "fit_khz"]);
        for l in &self.levels {
            let fit = self.line.intercept + self.line.slope * l.n as f64;
            csv.row(&[
                l.n.to_string(),
                num(to_khz(l.rate)),
                num(to_khz(l.rate_err)),
                num(to_khz(fit)),
            ]);
        }
        let mut fr = Csv::new(&[
            "n",
            "delay_us",
            "phase_rad",
            "unwrapped_rad",
            "phase_err_rad",
            "contrast",
        ]);
        for f in &self.fringes {
            fr.row(&[
                f.n.to_string(),
                num(to_us(f.delay)),
                num(f.phase_offset),
                num(f.unwrapped),
                num(f.phase_err),
                num(f.contrast),
            ]);
        }
        let results = serde_json::json!({
            "slope_khz": to_khz(self.line.slope),
            "slope_err_khz": to_khz(self.line.slope_err),
            "intercept_khz": to_khz(self.line.intercept),
            "intercept_err_khz": to_khz(self.line.intercept_err),
            "curvature_khz": to_khz(self.curvature()),
            "max_linear_residual_khz": to_khz(self.max_linear_residual),
            "closed_form_slope_khz": to_khz(self.closed_form_slope),
            "rabi_khz": to_khz(self.rabi_0),
            "detuning_khz": to_khz(self.detuning),
            "eta": self.eta,
            "compensation_khz": to_khz(self.budget.delta_comp),
            "other_shift_khz": to_khz(self.budget.delta_other),
            "calibration": self.calibration.iter().map(|c| serde_json::json!({
                "rabi_khz": to_khz(c.rabi_0), "slope_khz": to_khz(c.slope)
            })).collect::<Vec<_>>(),
        });
        let mut out = CommandOutput::new("stark-scan", results);
        out.files.push(Artifact::new("stark.csv", csv.finish()));
        out.files.push(Artifact::new("stark_fringes.csv", fr.finish()));
        out
    }
}

// ---------------------------------------------------------- truth table

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruthResult {
    pub table: TruthTable,
    pub rabi_0: f64,
    pub detuning: f64,
    pub t0: f64,
    pub phi_time: f64,
    pub sequence_duration: f64,
    pub noise: Option<NoiseModel>,
}

pub fn truth_table_experiment(cfg: &ExperimentConfig, threads: usize) -> Result<TruthResult> {
    let g = gate_setup(cfg)?;
    let noise = noise_for(cfg, g.phi_time)?;
    let readout = match cfg.readout.mode {
        ReadoutKind::Fast => TruthReadout::Fast,
        ReadoutKind::Flop => TruthReadout::Flop {
            rabi_0: cfg.flop_rabi(g.eta),
            taus: cfg.flop_taus(),
        },
    };
    let channel = Channel {
        space: &g.space,
        modes: &g.modes,
        sequence: &g.sequence,
        budget: g.budget,
        noise: noise.as_ref(),
    };
    let table = truth_table(
        &channel,
        &readout,
        cfg.run.shots,
        cfg.run.repetitions,
        cfg.run.seed,
        threads,
    )?;
    Ok(TruthResult {
        table,
        rabi_0: g.rabi_0,
        detuning: g.detuning,
        t0: g.t0,
        phi_time: g.phi_time,
        sequence_duration: g.sequence.total_duration(),
        noise,
    })
}

impl TruthResult {
    pub fn output(&self) -> CommandOutput {
        let results = serde_json::json!({
            "probabilities": self.table.probabilities,
            "stderr": self.table.stderr,
            "bold": self.table.bold(),
            "leakage": self.table.leakage,
            "mean_leakage": self.table.leakage.iter().sum::<f64>() / 4.0,
            "readout": self.table.readout,
            "shots": self.table.shots,
            "repetitions": self.table.repetitions,
            "rabi_khz": to_khz(self.rabi_0),
            "detuning_khz": to_khz(self.detuning),
            "t0_us": to_us(self.t0),
            "phi_time_us": to_us(self.phi_time),
            "total_duration_us": to_us(self.sequence_duration),
            "detuning_sigma_khz": self.noise.as_ref().map(|n| to_khz(n.detuning_sigma)),
        });
        let mut out = CommandOutput::new("truth-table", results);
        out.files.push(Artifact::new("truth_table.csv", self.table.to_csv()));
        out
    }
}

// ------------------------------------------------------------ rabi flop

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopResult {
    /// `(tau, P_D, stderr)` per basis input of the gate.
    pub traces: Vec<Vec<Point>>,
    /// First-pass single-sine fit per trace (none for flat traces).
    pub sine: Vec<Option<SineFit>>,
    /// W01 from the |S,0> trace, W12 from the |D,1> trace.
    pub omega01: f64,
    pub omega01_err: f64,
    pub omega12: f64,
    pub omega12_err: f64,
    /// `W12 / W01` with W01 from the |S,0> and from the |S,1> trace.
    pub ratio_to_s0: (f64, f64),
    pub ratio_to_s1: (f64, f64),
    /// Four-population fits with the first-pass frequencies held fixed.
    pub fits: Vec<FitResult>,
    pub readout_rabi: f64,
}

fn ratio(num: &SineFit, den: &SineFit) -> (f64, f64) {
    let r = num.omega / den.omega;
    (
        r,
        r * ((num.omega_err / num.omega).powi(2) + (den.omega_err / den.omega).powi(2)).sqrt(),
    )
}

/// Blue-sideband flops after the gate for each basis input. Frequencies
/// come from pure sine fits (W01 from the |S,0> input, W12 from the |D,1>
/// input, whose output flops on the n=1 to 2 sideband); the populations
/// from the four-population model with those frequencies fixed, or with
/// `W12 = sqrt2 W01` when `flop.lock_sqrt2` is set.
pub fn rabi_flop(cfg: &ExperimentConfig, threads: usize) -> Result<FlopResult> {
    let g = gate_setup(cfg)?;
    let noise = noise_for(cfg, g.phi_time)?;
    let channel = Channel {
        space: &g.space,
        modes: &g.modes,
        sequence: &g.sequence,
        budget: g.budget,
        noise: noise.as_ref(),
    };
    let rabi = cfg.flop_rabi(g.eta);
    let taus = cfg.flop_taus();
    let traces = (0..4)
        .map(|r| {
            flop_scan(
                &channel,
                r,
                rabi,
                &taus,
                cfg.run.shots,
                cfg.run.seed.wrapping_add((r as u64) << 20),
                threads,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let sine: Vec<Option<SineFit>> = traces.iter().map(|t| fit_sine(t).ok()).collect();
    let need = |k: usize| {
        sine[k]
            .clone()
            .ok_or_else(|| Error::SingularDesign(format!("no oscillation in the |{}> flop trace", INPUT_NAMES[k])))
    };
    let (a, c, d) = (need(0)?, need(2)?, need(3)?);
    let frequencies = if cfg.flop.lock_sqrt2 {
        (a.omega, SQRT_2 * a.omega)
    } else {
        (a.omega, d.omega)
    };
    let fits = traces
        .iter()
        .map(|t| {
            fit_flop(
                t,
                FlopOptions {
                    lock_sqrt2: false,
                    fixed_frequencies: Some(frequencies),
                    omega01_hint: None,
                },
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FlopResult {
        omega01: a.omega,
        omega01_err: a.omega_err,
        omega12: d.omega,
        omega12_err: d.omega_err,
        ratio_to_s0: ratio(&d, &a),
        ratio_to_s1: ratio(&d, &c),
        traces,
        sine,
        fits,
        readout_rabi: rabi,
    })
}

const INPUT_NAMES: [&str; 4] = ["S0", "D0", "S1", "D1"];

fn fit_json(f: &FitResult) -> serde_json::Value {
    let (ratio, ratio_err) = f.frequency_ratio();
    serde_json::json!({
        "a_S0": f.a_s0, "a_D0": f.a_d0, "a_S1": f.a_s1, "a_D1": f.a_d1,
        "omega01_khz": to_khz(f.omega01), "omega12_khz": to_khz(f.omega12),
        "stderr": FLOP_PARAMETERS.iter().zip(f.stderr()).map(|(k, e)| {
            let v = if k.starts_with("omega") { to_khz(e) } else { e };
            ((*k).to_string(), serde_json::json!(v))
        }).collect::<serde_json::Map<_, _>>(),
        "covariance": f.covariance,
        "frequency_ratio": ratio,
        "frequency_ratio_err": ratio_err,
        "chi2": f.chi2, "rss": f.rss, "dof": f.dof,
        "iterations": f.iterations,
        "converged": f.converged,
        "rank_deficient": f.rank_deficient,
        "lock_sqrt2": f.options.lock_sqrt2,
        "message": f.message,
    })
}

impl FlopResult {
    pub fn output(&self) -> CommandOutput {
        let mut fits = Csv::new(&[
            "input",
            "a_S0",
            "a_D0",
            "a_S1",
            "a_D1",
            "sine_omega_khz",
            "sine_omega_err_khz",
        ]);
        let mut json_fits = serde_json::Map::new();
        for (k, (name, f)) in INPUT_NAMES.iter().zip(&self.fits).enumerate() {
            let c = f.coefficients();
            let (w, e) = self.sine[k]
                .as_ref()
                .map_or((f64::NAN, f64::NAN), |s| (s.omega, s.omega_err));
            fits.row(&[
                name.to_string(),
                num(c[0]),
                num(c[1]),
                num(c[2]),
                num(c[3]),
                num(to_khz(w)),
                num(to_khz(e)),
            ]);
            json_fits.insert(name.to_string(), fit_json(f));
        }
        let results = serde_json::json!({
            "omega01_khz": to_khz(self.omega01),
            "omega01_err_khz": to_khz(self.omega01_err),
            "omega12_khz": to_khz(self.omega12),
            "omega12_err_khz": to_khz(self.omega12_err),
            "ratio_d1_s0": self.ratio_to_s0.0,
            "ratio_d1_s0_err": self.ratio_to_s0.1,
            "ratio_d1_s1": self.ratio_to_s1.0,
            "ratio_d1_s1_err": self.ratio_to_s1.1,
            "fits": json_fits,
            "readout_rabi_khz": to_khz(self.readout_rabi),
        });
        let mut out = CommandOutput::new("rabi-flop", results);
        out.ok = self.fits.iter().all(|f| f.converged);
        for (name, t) in INPUT_NAMES.iter().zip(&self.traces) {
            out.files.push(Artifact::new(format!("flop_{name}.csv"), points_csv(t)));
        }
        out.files.push(Artifact::new("flop_fits.csv", fits.finish()));
        out
    }
}

fn points_csv(t: &[Point]) -> String {
    let mut csv = Csv::new(&["tau_us", "p_d", "stderr"]);
    for p in t {
        csv.row(&[num(to_us(p.0)), num(p.1), num(p.2)]);
    }
    csv.finish()
}

// ------------------------------------------------------------------ ghz

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GhzPoint {
    pub phi_time: f64,
    pub p_all_s: f64,
    pub p_all_d: f64,
    /// Population outside both target components.
    pub epsilon: f64,
    pub fidelity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeInfo {
    pub mode: usize,
    pub role: String,
    pub axis: String,
    /// In units of the axial frequency.
    pub frequency: f64,
    pub frequency_khz: f64,
    pub eta: Vec<f64>,
    pub n_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingPoint {
    pub ion_count: usize,
    pub eta_bus: f64,
    pub entangle_time: f64,
    pub best: GhzPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GhzResult {
    pub ion_count: usize,
    pub eta_bus: f64,
    pub rabi_0: f64,
    pub detuning: f64,
    pub dimension: usize,
    pub r2_phase: f64,
    pub entangle_time: f64,
    pub modes: Vec<ModeInfo>,
    pub scan: Vec<GhzPoint>,
    pub best: GhzPoint,
    pub at_entangle_time: GhzPoint,
    pub extra: Vec<GhzPoint>,
    pub scaling: Vec<ScalingPoint>,
    pub warnings: Vec<String>,
}

struct GhzSim {
    space: SpaceSpec,
    r1: CompiledSequence,
    r2: CompiledSequence,
    bsb: Propagator,
    frame: Vec<f64>,
    initial: StateVector,
    all_s: usize,
    all_d: usize,
}

impl GhzSim {
    fn new(cfg: &ExperimentConfig, ion_count: usize) -> Result<(Self, ModeSet, Vec<usize>)> {
        let h = &cfg.ghz;
        let crystal = IonCrystal::new(ion_count, cfg.axial_frequency(), cfg.crystal.eta_single)?;
        let mut modes = normal_modes(&crystal)?;
        let chosen = bus_and_spectators(&modes, h.spectator_modes);
        if chosen.len() < h.spectator_modes + 1 {
            return Err(Error::Config(format!(
                "{} ions have only {} spectator modes",
                ion_count,
                chosen.len() - 1
            )));
        }
        if let Some(e) = h.eta_bus {
            for row in modes.eta.iter_mut() {
                row[0] = e * row[0].signum();
            }
        }
        let slots = chosen
            .iter()
            .enumerate()
            .map(|(k, m)| ModeSlot {
                mode: *m,
                n_max: if k == 0 { h.bus_n_max } else { h.spectator_n_max },
            })
            .collect();
        let space = SpaceSpec::with_cap(ion_count, slots, cfg.space.dimension_cap)?;
        let carrier = khz(h.carrier_rabi_khz);
        let t = FRAC_PI_2 / carrier;
        let none = ShiftBudget::default();
        let r1 = SequenceSpec::new(
            vec![Element::Pulse(PulseEvent::carrier(carrier, h.r1_phase_rad, t))],
            carrier,
        );
        let r2 = SequenceSpec::new(
            vec![Element::Pulse(PulseEvent::carrier(
                carrier,
                ghz_r2_phase(ion_count, h.r1_phase_rad),
                t,
            ))],
            carrier,
        );
        let pulse = PulseEvent::blue_sideband(0, khz(h.rabi_khz), khz(h.detuning_khz), 0.0, 0.0);
        let ham = build_hamiltonian(&space, &modes, &pulse, &none)?;
        let zeros = vec![0; chosen.len()];
        let sim = GhzSim {
            r1: CompiledSequence::new(&space, &modes, &r1, &none, 0.0)?,
            r2: CompiledSequence::new(&space, &modes, &r2, &none, 0.0)?,
            bsb: Propagator::new(&ham.operator)?,
            frame: ham.frame,
            initial: prepare_levels(&space, &vec![Level::S; ion_count], &zeros)?,
            all_s: space.index_of(&vec![Level::S; ion_count], &zeros)?,
            all_d: space.index_of(&vec![Level::D; ion_count], &zeros)?,
            space,
        };
        Ok((sim, modes, chosen))
    }

    fn point(&self, after_r1: &StateVector, t: f64) -> Result<GhzPoint> {
        let mut s = after_r1.clone();
        self.bsb.apply(&mut s.amplitudes, t);
        s.amplitudes
            .iter_mut()
            .zip(&self.frame)
            .for_each(|(a, f)| *a *= Complex64::from_polar(1.0, f * t));
        let (s, _) = self.r2.run(&s)?;
        let a = s.amplitudes[self.all_s];
        let d = s.amplitudes[self.all_d];
        Ok(GhzPoint {
            phi_time: t,
            p_all_s: a.norm_sqr(),
            p_all_d: d.norm_sqr(),
            epsilon: (1.0 - a.norm_sqr() - d.norm_sqr()).max(0.0),
            fidelity: ghz_fidelity(a.norm_sqr(), d.norm_sqr(), a.norm() * d.norm()),
        })
    }

    fn scan(&self, times: &[f64]) -> Result<Vec<GhzPoint>> {
        let (after_r1, _) = self.r1.run(&self.initial)?;
        times.iter().map(|t| self.point(&after_r1, *t)).collect()
    }
}

/// Scan point with the highest GHZ fidelity. Population sums alone would
/// pick trivial points such as t = 0 for odd N, where R2' undoes R1.
fn best_of(points: &[GhzPoint]) -> GhzPoint {
    *points
        .iter()
        .max_by(|a, b| a.fidelity.total_cmp(&b.fidelity))
        .expect("non-empty scan")
}

fn scan_times(cfg: &ExperimentConfig, extra: &[f64]) -> Vec<f64> {
    let h = &cfg.ghz;
    let steps = ((h.scan_stop_us - h.scan_start_us) / h.scan_step_us + 1e-9).floor() as usize;
    let mut t: Vec<f64> = (0..=steps)
        .map(|k| us(h.scan_start_us + h.scan_step_us * k as f64))
        .collect();
    t.extend(h.extra_points_us.iter().map(|x| us(*x)));
    t.extend_from_slice(extra);
    t.sort_by(f64::total_cmp);
    t.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    t
}

/// Uniformly illuminated N-ion entangling sequence over a scan of the
/// dispersive-pulse duration, with the bus and closest spectator modes.
pub fn ghz(cfg: &ExperimentConfig, _threads: usize) -> Result<GhzResult> {
    let n = cfg.crystal.ion_count;
    if n < 2 {
        return Err(Error::Config(
            "the entangling experiment needs crystal.ion_count >= 2".into(),
        ));
    }
    let h = &cfg.ghz;
    let (sim, modes, chosen) = GhzSim::new(cfg, n)?;
    let mut warnings = Vec::new();
    if sim.space.dimension() > GHZ_DIMENSION_GUARD {
        warnings.push(format!(
            "Hilbert dimension {} exceeds {}; expect long run times",
            sim.space.dimension(),
            GHZ_DIMENSION_GUARD
        ));
    }
    let eta_bus = modes.eta[0][0].abs();
    let (rabi, det) = (khz(h.rabi_khz), khz(h.detuning_khz));
    let t_ent = entangle_time(eta_bus, rabi, det)?;
    let times = scan_times(cfg, &[t_ent]);
    let scan = sim.scan(&times)?;
    let pick = |t: f64| {
        *scan
            .iter()
            .find(|p| (p.phi_time - t).abs() < 1e-12)
            .expect("time is in scan")
    };
    let extra = h.extra_points_us.iter().map(|x| pick(us(*x))).collect();
    let info = chosen
        .iter()
        .enumerate()
        .map(|(k, m)| ModeInfo {
            mode: *m,
            role: if k == 0 { "bus".into() } else { "spectator".into() },
            axis: "axial".into(),
            frequency: modes.frequencies[*m],
            frequency_khz: to_khz(modes.angular_frequency(*m)),
            eta: modes.eta.iter().map(|row| row[*m]).collect(),
            n_max: sim.space.modes[k].n_max,
        })
        .collect();
    let mut scaling = Vec::new();
    if h.scaling {
        for k in 2..=n {
            let (s, m, _) = GhzSim::new(cfg, k)?;
            let eta = m.eta[0][0].abs();
            let te = entangle_time(eta, rabi, det)?;
            let t: Vec<f64> = (0..=120).map(|i| te * 1.5 * i as f64 / 120.0).collect();
            scaling.push(ScalingPoint {
                ion_count: k,
                eta_bus: eta,
                entangle_time: te,
                best: best_of(&s.scan(&t)?),
            });
        }
    }
    Ok(GhzResult {
        ion_count: n,
        eta_bus,
        rabi_0: rabi,
        detuning: det,
        dimension: sim.space.dimension(),
        r2_phase: ghz_r2_phase(n, h.r1_phase_rad),
        entangle_time: t_ent,
        modes: info,
        best: best_of(&scan),
        at_entangle_time: pick(t_ent),
        scan,
        extra,
        scaling,
        warnings,
    })
}

fn ghz_point_json(p: &GhzPoint) -> serde_json::Value {
    serde_json::json!({
        "phi_time_us": to_us(p.phi_time),
        "p_all_s": p.p_all_s,
        "p_all_d": p.p_all_d,
        "epsilon": p.epsilon,
        "fidelity": p.fidelity,
    })
}

impl GhzResult {
    pub fn output(&self) -> CommandOutput {
        let mut csv = Csv::new(&["phi_time_us", "p_all_s", "p_all_d", "epsilon", "fidelity"]);
        for p in &self.scan {
            csv.row(&[
                num(to_us(p.phi_time)),
                num(p.p_all_s),
                num(p.p_all_d),
                num(p.epsilon),
                num(p.fidelity),
            ]);
        }
        let results = serde_json::json!({
            "ion_count": self.ion_count,
            "eta_bus": self.eta_bus,
            "rabi_khz": to_khz(self.rabi_0),
            "detuning_khz": to_khz(self.detuning),
            "dimension": self.dimension,
            "r2_phase_rad": self.r2_phase,
            "entangle_time_us": to_us(self.entangle_time),
            "modes": self.modes,
            "best": ghz_point_json(&self.best),
            "at_entangle_time": ghz_point_json(&self.at_entangle_time),
            "extra_points": self.extra.iter().map(ghz_point_json).collect::<Vec<_>>(),
            "scaling": self.scaling.iter().map(|s| serde_json::json!({
                "ion_count": s.ion_count,
                "eta_bus": s.eta_bus,
                "entangle_time_us": to_us(s.entangle_time),
                "best": ghz_point_json(&s.best),
            })).collect::<Vec<_>>(),
        });
        let mut out = CommandOutput::new("ghz", results);
        out.warnings = self.warnings.clone();
        out.files.push(Artifact::new("ghz_scan.csv", csv.finish()));
        if !self.scaling.is_empty() {
            let mut s = Csv::new(&[
                "ion_count",
                "eta_bus",
                "entangle_time_us",
                "best_time_us",
                "best_fidelity",
            ]);
            for p in &self.scaling {
                s.row(&[
                    p.ion_count.to_string(),
                    num(p.eta_bus),
                    num(to_us(p.entangle_time)),
                    num(to_us(p.best.phi_time)),
                    num(p.best.fidelity),
                ]);
            }
            out.files.push(Artifact::new("ghz_scaling.csv", s.finish()));
        }
        out
    }
}

// ----------------------------------------------------------------- echo

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EchoResult {
    pub detuning_sigma: f64,
    pub total_delay: f64,
    pub plain: Vec<Point>,
    pub echo: Vec<Point>,
    pub plain_contrast: f64,
    pub plain_contrast_err: f64,
    pub echo_contrast: f64,
    pub echo_contrast_err: f64,
    /// `exp(-sigma^2 T^2 / 2)`.
    pub expected_plain_contrast: f64,
}

/// Plain Ramsey and symmetric spin echo over the same total free evolution,
/// under quasi-static detuning noise.
pub fn spin_echo(cfg: &ExperimentConfig, threads: usize) -> Result<EchoResult> {
    let e = &cfg.echo;
    let sigma = cfg.echo_sigma()?;
    let total = us(e.total_delay_us);
    let carrier = khz(e.carrier_rabi_khz);
    let space = SpaceSpec::single_ion(1)?;
    let modes = normal_modes(&IonCrystal::new(1, cfg.axial_frequency(), cfg.crystal.eta_single)?)?;
    let noise = NoiseModel {
        detuning_sigma: sigma,
        dephasing_enabled: true,
        ..NoiseModel::default()
    };
    let prep = Preparation {
        levels: vec![Level::S],
        phonons: vec![0],
    };
    let half = FRAC_PI_2 / carrier;
    let fringe = |echo: bool, seed: u64| -> Result<Vec<Point>> {
        let p = e.phase_points;
        (0..p)
            .map(|k| {
                let phase = TAU * k as f64 / (p - 1) as f64;
                let mut el = vec![Element::Pulse(PulseEvent::carrier(carrier, PI, half))];
                if echo {
                    el.push(Element::Delay(total / 2.0));
                    el.push(Element::EchoPi {
                        phase: e.echo_phase_rad,
                    });
                    el.push(Element::Delay(total / 2.0));
                } else {
                    el.push(Element::Delay(total));
                }
                el.push(Element::Pulse(PulseEvent::carrier(carrier, phase, half)));
                let seq = SequenceSpec::new(el, carrier);
                let st = monte_carlo(
                    &space,
                    &modes,
                    &seq,
                    &prep,
                    &ShiftBudget::default(),
                    Some(&noise),
                    cfg.run.shots,
                    seed.wrapping_add((k as u64) << 16),
                    threads,
                    Readout::default(),
                )?;
                Ok((phase, st.frequency("D"), st.stderr("D").max(0.5 / cfg.run.shots as f64)))
            })
            .collect()
    };
    let plain = fringe(false, cfg.run.seed)?;
    let echo = fringe(true, cfg.run.seed.wrapping_add(1 << 40))?;
    let fp = ramsey_contrast(&plain)?;
    let fe = ramsey_contrast(&echo)?;
    Ok(EchoResult {
        detuning_sigma: sigma,
        total_delay: total,
        plain_contrast: fp.contrast,
        plain_contrast_err: fp.contrast_err,
        echo_contrast: fe.contrast,
        echo_contrast_err: fe.contrast_err,
        expected_plain_contrast: (-(sigma * total).powi(2) / 2.0).exp(),
        plain,
        echo,
    })
}

impl EchoResult {
    pub fn output(&self) -> CommandOutput {
        let mut csv = Csv::new(&["sequence", "phase_rad", "p_d", "stderr"]);
        for (name, pts) in [("ramsey", &self.plain), ("echo", &self.echo)] {
            for p in pts {
                csv.row(&[name.to_string(), num(p.0), num(p.1), num(p.2)]);
            }
        }
        let results = serde_json::json!({
            "detuning_sigma_khz": to_khz(self.detuning_sigma),
            "total_delay_us": to_us(self.total_delay),
            "ramsey_contrast": self.plain_contrast,
            "ramsey_contrast_err": self.plain_contrast_err,
            "expected_ramsey_contrast": self.expected_plain_contrast,
            "echo_contrast": self.echo_contrast,
            "echo_contrast_err": self.echo_contrast_err,
        });
        let mut out = CommandOutput::new("echo", results);
        out.files.push(Artifact::new("echo.csv", csv.finish()));
        out
    }
}

// ------------------------------------------------------------------ fit

/// Model selected by `iontrap fit --model`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FitModel {
    /// Four-population flop, free W12.
    Flop,
    /// Four-population flop with W12 = sqrt2 W01.
    FlopLocked,
    /// Single `offset + amplitude sin^2(W t)`.
    Sine,
    /// Straight line over Fock states.
    Stark,
    /// Fringe versus analysis phase.
    Ramsey,
}

/// Parse a three-column CSV with a header. Column units follow the header
/// suffix: `_us` is converted to s, `_khz` to rad/s.
pub fn read_points(text: &str) -> Result<Vec<Point>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "empty file".into(),
    })?;
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    if names.len() < 3 {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected at least 3 columns, found {}", names.len()),
        });
    }
    let scale = |name: &str| {
        if name.ends_with("_us") {
            1e-6
        } else if name.ends_with("_khz") {
            TAU * 1e3
        } else {
            1.0
        }
    };
    let s: Vec<f64> = names[..3].iter().map(|n| scale(n)).collect();
    let mut out = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != names.len() {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected {} fields, found {}", names.len(), fields.len()),
            });
        }
        let mut v = [0.0; 3];
        for k in 0..3 {
            v[k] = fields[k].parse::<f64>().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("column '{}': cannot parse '{}'", names[k], fields[k]),
            })? * s[k];
        }
        if v[2] < 0.0 || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Parse {
                line: i + 1,
                message: "values must be finite and stderr >= 0".into(),
            });
        }
        out.push((v[0], v[1], v[2]));
    }
    if out.is_empty() {
        return Err(Error::Parse {
            line: 2,
            message: "no data rows".into(),
        });
    }
    Ok(out)
}

/// Fit a CSV file. `omega01_hint` (rad/s) selects the flop branch.
pub fn fit_file(path: &Path, model: FitModel, omega01_hint: Option<f64>) -> Result<CommandOutput> {
    let text = std::fs::read_to_string(path)?;
    let data = read_points(&text)?;
    fit_points(&data, model, omega01_hint)
}

pub fn fit_points(data: &[Point], model: FitModel, omega01_hint: Option<f64>) -> Result<CommandOutput> {
    let mut curve = Csv::new(&["x", "fit"]);
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let grid = |k: usize| lo + (hi - lo) * k as f64 / 200.0;
    let mut out = match model {
        FitModel::Flop | FitModel::FlopLocked => {
            let f = fit_flop(
                data,
                FlopOptions {
                    lock_sqrt2: model == FitModel::FlopLocked,
                    fixed_frequencies: None,
                    omega01_hint,
                },
            )?;
            for k in 0..=200 {
                curve.row(&[num(to_us(grid(k))), num(f.eval(grid(k)))]);
            }
            let mut o = CommandOutput::new("fit", serde_json::json!({ "model": model, "fit": fit_json(&f) }));
            o.ok = f.converged;
            o
        }
        FitModel::Sine => {
            let f = fit_sine(data)?;
            for k in 0..=200 {
                let t = grid(k);
                curve.row(&[num(to_us(t)), num(f.offset + f.amplitude * (f.omega * t).sin().powi(2))]);
            }
            let mut o = CommandOutput::new(
                "fit",
                serde_json::json!({
                    "model": model, "offset": f.offset, "amplitude": f.amplitude,
                    "omega_khz": to_khz(f.omega), "omega_err_khz": to_khz(f.omega_err),
                    "chi2": f.chi2, "converged": f.converged,
                }),
            );
            o.ok = f.converged;
            o
        }
        FitModel::Stark => {
            let f = fit_stark_slope(data)?;
            for k in 0..=200 {
                curve.row(&[num(grid(k)), num(to_khz(f.intercept + f.slope * grid(k)))]);
            }
            CommandOutput::new(
                "fit",
                serde_json::json!({
                    "model": model,
                    "slope_khz": to_khz(f.slope), "slope_err_khz": to_khz(f.slope_err),
                    "intercept_khz": to_khz(f.intercept), "intercept_err_khz": to_khz(f.intercept_err),
                    "chi2": f.chi2, "converged": true,
                }),
            )
        }
        FitModel::Ramsey => {
            let f = ramsey_contrast(data)?;
            for k in 0..=200 {
                let ph = grid(k);
                curve.row(&[
                    num(ph),
                    num(f.baseline + 0.5 * f.contrast * (ph + f.phase_offset).cos()),
                ]);
            }
            let mut o = CommandOutput::new("fit", serde_json::json!({ "model": model, "fringe": f }));
            o.ok = f.converged;
            o
        }
    };
    out.files.push(Artifact::new("fit_curve.csv", curve.finish()));
    Ok(out)
}

// ---------------------------------------------------------------- modes

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModesResult {
    pub positions: Vec<f64>,
    pub modes: ModeSet,
}

pub fn modes_table(cfg: &ExperimentConfig) -> Result<ModesResult> {
    let crystal = IonCrystal::new(cfg.crystal.ion_count, cfg.axial_frequency(), cfg.crystal.eta_single)?;
    Ok(ModesResult {
        positions: equilibrium_positions(crystal.ion_count)?,
        modes: normal_modes(&crystal)?,
    })
}

impl ModesResult {
    pub fn modes_csv(&self) -> String {
        let n = self.positions.len();
        let mut header = vec!["mode".to_string(), "frequency".into(), "frequency_khz".into()];
        header.extend((0..n).map(|j| format!("eta_ion{j}")));
        let refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let mut csv = Csv::new(&refs);
        for m in 0..self.modes.mode_count() {
            let mut row = vec![
                m.to_string(),
                num(self.modes.frequencies[m]),
                num(to_khz(self.modes.angular_frequency(m))),
            ];
            row.extend((0..n).map(|j| num(self.modes.eta[j][m])));
            csv.row(&row);
        }
        csv.finish()
    }

    pub fn positions_csv(&self) -> String {
        let mut csv = Csv::new(&["ion", "position"]);
        for (j, x) in self.positions.iter().enumerate() {
            csv.row(&[j.to_string(), num(*x)]);
        }
        csv.finish()
    }

    pub fn output(&self) -> CommandOutput {
        let mut out = CommandOutput::new(
            "modes",
            serde_json::json!({
                "ion_count": self.positions.len(),
                "positions": self.positions,
                "frequencies": self.modes.frequencies,
                "axis": "axial",
            }),
        );
        out.files.push(Artifact::new("positions.csv", self.positions_csv()));
        out.files.push(Artifact::new("modes.csv", self.modes_csv()));
        out
    }
}

/// Config-driven commands by their command-line name.
pub const COMMANDS: [&str; 6] = ["modes", "stark-scan", "truth-table", "rabi-flop", "ghz", "echo"];

/// Run the config-driven command `name` (see [`COMMANDS`]).
pub fn run_experiment(name: &str, cfg: &ExperimentConfig, threads: usize) -> Result<CommandOutput> {
    cfg.validate()?;
    Ok(match name {
        "modes" => modes_table(cfg)?.output(),
        "stark-scan" => stark_scan(cfg, threads)?.output(),
        "truth-table" => truth_table_experiment(cfg, threads)?.output(),
        "rabi-flop" => rabi_flop(cfg, threads)?.output(),
        "ghz" => ghz(cfg, threads)?.output(),
        "echo" => spin_echo(cfg, threads)?.output(),
        other => {
            return Err(Error::InvalidParameter(format!(
                "unknown command {other:?}, expected one of {}",
                COMMANDS.join(", ")
            )))
        }
    })
}
