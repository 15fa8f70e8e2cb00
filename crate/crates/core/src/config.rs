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

//! Experiment configuration.
//!
//! Files are TOML with one table per concern. Every physical quantity
//! carries its unit in the key name (`_khz` for cyclic frequencies, `_us`
//! for times, `_rad` for phases); unknown keys are rejected. Frequencies are
//! converted to rad/s and times to seconds by the accessor methods here, so
//! the rest of the crate never sees cyclic units.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::evolve::{calibrate_sigma, NoiseModel, PrepErrorModel};
use crate::hamiltonian::SlopeConvention;
use crate::hilbert::DEFAULT_DIMENSION_CAP;
use crate::units::{khz, us};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub shots: usize,
    pub repetitions: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 1,
            shots: 100,
            repetitions: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrystalSection {
    pub ion_count: usize,
    pub axial_frequency_khz: f64,
    pub eta_single: f64,
}

impl Default for CrystalSection {
    fn default() -> Self {
        CrystalSection {
            ion_count: 1,
            axial_frequency_khz: 1712.0,
            eta_single: 0.068,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpaceSection {
    /// Truncation of the addressed mode.
    pub n_max: usize,
    pub dimension_cap: usize,
}

impl Default for SpaceSection {
    fn default() -> Self {
        SpaceSection {
            n_max: 3,
            dimension_cap: DEFAULT_DIMENSION_CAP,
        }
    }
}

/// The dispersive (detuned blue-sideband) beam and the Ramsey pulses around
/// it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateSection {
    /// Carrier Rabi frequency of the dispersive beam. Exclusive with
    /// `light_shift_khz`.
    pub rabi_khz: Option<f64>,
    /// Per-level light shift `eta^2 Omega0^2 / 4 Delta` to set Omega0 from.
    pub light_shift_khz: Option<f64>,
    pub detuning_khz: f64,
    /// Duration of the dispersive pulse; defaults to `phi_time_factor * t0`.
    pub phi_time_us: Option<f64>,
    pub phi_time_factor: f64,
    pub carrier_rabi_khz: f64,
    pub slope_convention: SlopeConvention,
    pub mode: usize,
}

impl Default for GateSection {
    fn default() -> Self {
        GateSection {
            rabi_khz: None,
            light_shift_khz: Some(1.355),
            detuning_khz: 60.0,
            phi_time_us: None,
            phi_time_factor: 1.0,
            carrier_rabi_khz: 500.0,
            slope_convention: SlopeConvention::PerLevel,
            mode: 0,
        }
    }
}

/// Motional-state-independent light shifts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftSection {
    pub compensate: bool,
    /// Lumped shift from other dipole transitions and Zeeman carriers.
    pub other_khz: f64,
}

impl Default for ShiftSection {
    fn default() -> Self {
        ShiftSection {
            compensate: true,
            other_khz: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrepErrorKind {
    Ladder,
    Mixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub enabled: bool,
    pub dephasing: bool,
    pub preparation: bool,
    /// Ramsey contrast loss over the dispersive pulse the quasi-static
    /// detuning is calibrated to.
    pub contrast_loss: f64,
    /// Overrides the calibration.
    pub detuning_sigma_khz: Option<f64>,
    /// Preparation fidelity of Fock state n at index n.
    pub prep_fidelity: Vec<f64>,
    pub prep_error: PrepErrorKind,
    pub mixture_lower_n: f64,
    pub mixture_flip: f64,
    pub mixture_lower_n_flip: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection {
            enabled: false,
            dephasing: true,
            preparation: true,
            contrast_loss: 0.06,
            detuning_sigma_khz: None,
            prep_fidelity: vec![0.98, 0.96, 0.94, 0.92],
            prep_error: PrepErrorKind::Ladder,
            mixture_lower_n: 0.5,
            mixture_flip: 0.5,
            mixture_lower_n_flip: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutKind {
    Fast,
    Flop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReadoutSection {
    pub mode: ReadoutKind,
}

impl Default for ReadoutSection {
    fn default() -> Self {
        ReadoutSection {
            mode: ReadoutKind::Fast,
        }
    }
}

/// Resonant blue-sideband flop used to read out the motional state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlopSection {
    /// Carrier Rabi frequency of the readout beam. Exclusive with
    /// `omega01_khz`.
    pub rabi_khz: Option<f64>,
    /// Fitted flop frequency W01 of `sin^2(W01 tau)` to set the beam from.
    pub omega01_khz: Option<f64>,
    pub tau_step_us: f64,
    pub points: usize,
    pub lock_sqrt2: bool,
}

impl Default for FlopSection {
    fn default() -> Self {
        FlopSection {
            rabi_khz: None,
            omega01_khz: Some(11.9),
            tau_step_us: 4.0,
            points: 50,
            lock_sqrt2: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StarkSection {
    pub delays_us: Vec<f64>,
    pub phase_points: usize,
    /// Read the fringes from exact populations instead of sampled shots.
    pub exact: bool,
    /// Calibrate Omega0 so the fitted slope hits this value.
    pub target_slope_khz: Option<f64>,
    pub calibration_rounds: usize,
}

impl Default for StarkSection {
    fn default() -> Self {
        StarkSection {
            delays_us: (0..=8).map(|k| 25.0 * k as f64).collect(),
            phase_points: 8,
            exact: true,
            target_slope_khz: None,
            calibration_rounds: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GhzSection {
    pub rabi_khz: f64,
    pub detuning_khz: f64,
    /// Overrides the bus-mode Lamb-Dicke factor from the mode solver.
    pub eta_bus: Option<f64>,
    pub carrier_rabi_khz: f64,
    pub r1_phase_rad: f64,
    pub spectator_modes: usize,
    pub bus_n_max: usize,
    pub spectator_n_max: usize,
    pub scan_start_us: f64,
    pub scan_stop_us: f64,
    pub scan_step_us: f64,
    /// Extra scan points, always included.
    pub extra_points_us: Vec<f64>,
    /// Also scan N = 2 .. ion_count for the time-vs-N relation.
    pub scaling: bool,
}

impl Default for GhzSection {
    fn default() -> Self {
        GhzSection {
            rabi_khz: 230.0,
            detuning_khz: 60.0,
            eta_bus: None,
            carrier_rabi_khz: 500.0,
            r1_phase_rad: std::f64::consts::PI,
            spectator_modes: 2,
            bus_n_max: 2,
            spectator_n_max: 2,
            scan_start_us: 0.0,
            scan_stop_us: 1500.0,
            scan_step_us: 25.0,
            extra_points_us: vec![900.0],
            scaling: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EchoSection {
    pub total_delay_us: f64,
    /// Plain Ramsey contrast the quasi-static detuning is calibrated to.
    pub plain_contrast: f64,
    /// Overrides the calibration.
    pub detuning_sigma_khz: Option<f64>,
    pub phase_points: usize,
    pub carrier_rabi_khz: f64,
    pub echo_phase_rad: f64,
}

impl Default for EchoSection {
    fn default() -> Self {
        EchoSection {
            total_delay_us: 2000.0,
            plain_contrast: 0.4,
            detuning_sigma_khz: None,
            phase_points: 16,
            carrier_rabi_khz: 500.0,
            echo_phase_rad: 0.0,
        }
    }
}

/// A complete experiment configuration. Every table is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub crystal: CrystalSection,
    pub space: SpaceSection,
    pub gate: GateSection,
    pub shift: ShiftSection,
    pub noise: NoiseSection,
    pub readout: ReadoutSection,
    pub flop: FlopSection,
    pub stark: StarkSection,
    pub ghz: GhzSection,
    pub echo: EchoSection,
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{key} must be > 0, got {v}")))
    }
}

fn non_negative(key: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{key} must be >= 0, got {v}")))
    }
}

fn exclusive(section: &str, a: (&str, Option<f64>), b: (&str, Option<f64>)) -> Result<f64> {
    match (a.1, b.1) {
        (Some(_), Some(_)) => Err(Error::Config(format!(
            "{section}.{} and {section}.{} are mutually exclusive",
            a.0, b.0
        ))),
        (None, None) => Err(Error::Config(format!(
            "set one of {section}.{} or {section}.{}",
            a.0, b.0
        ))),
        (Some(x), None) => {
            positive(&format!("{section}.{}", a.0), x)?;
            Ok(x)
        }
        (None, Some(y)) => {
            positive(&format!("{section}.{}", b.0), y)?;
            Ok(y)
        }
    }
}

impl ExperimentConfig {
    /// Parse TOML text; diagnostics carry line and column.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a TOML file, or the `config` object of a JSON run summary.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg = if path.extension().is_some_and(|e| e == "json") {
            let v: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let inner = v.get("config").cloned().unwrap_or(v);
            serde_json::from_value::<ExperimentConfig>(inner)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.shots == 0 {
            return Err(Error::Config("run.shots must be >= 1".into()));
        }
        if self.run.repetitions == 0 {
            return Err(Error::Config("run.repetitions must be >= 1".into()));
        }
        if self.crystal.ion_count == 0 {
            return Err(Error::Config("crystal.ion_count must be >= 1".into()));
        }
        positive("crystal.axial_frequency_khz", self.crystal.axial_frequency_khz)?;
        if !(self.crystal.eta_single > 0.0 && self.crystal.eta_single < 1.0) {
            return Err(Error::Config(format!(
                "crystal.eta_single must lie in (0, 1), got {}",
                self.crystal.eta_single
            )));
        }
        if self.space.n_max == 0 {
            return Err(Error::Config("space.n_max must be >= 1".into()));
        }
        let g = &self.gate;
        exclusive("gate", ("rabi_khz", g.rabi_khz), ("light_shift_khz", g.light_shift_khz))?;
        positive("gate.detuning_khz", g.detuning_khz.abs())?;
        if let Some(t) = g.phi_time_us {
            non_negative("gate.phi_time_us", t)?;
        }
        non_negative("gate.phi_time_factor", g.phi_time_factor)?;
        positive("gate.carrier_rabi_khz", g.carrier_rabi_khz)?;
        if !self.shift.other_khz.is_finite() {
            return Err(Error::Config("shift.other_khz must be finite".into()));
        }
        let n = &self.noise;
        if !(0.0..1.0).contains(&n.contrast_loss) {
            return Err(Error::Config(format!(
                "noise.contrast_loss must lie in [0, 1), got {}",
                n.contrast_loss
            )));
        }
        if let Some(s) = n.detuning_sigma_khz {
            non_negative("noise.detuning_sigma_khz", s)?;
        }
        if n.prep_fidelity.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("noise.prep_fidelity entries must lie in [0, 1]".into()));
        }
        for (k, v) in [
            ("mixture_lower_n", n.mixture_lower_n),
            ("mixture_flip", n.mixture_flip),
            ("mixture_lower_n_flip", n.mixture_lower_n_flip),
        ] {
            non_negative(&format!("noise.{k}"), v)?;
        }
        let f = &self.flop;
        exclusive("flop", ("rabi_khz", f.rabi_khz), ("omega01_khz", f.omega01_khz))?;
        positive("flop.tau_step_us", f.tau_step_us)?;
        if f.points < 8 {
            return Err(Error::Config(format!("flop.points must be >= 8, got {}", f.points)));
        }
        let s = &self.stark;
        if s.delays_us.len() < 2 {
            return Err(Error::Config("stark.delays_us needs at least two delays".into()));
        }
        for t in &s.delays_us {
            non_negative("stark.delays_us", *t)?;
        }
        if s.phase_points < 3 {
            return Err(Error::Config("stark.phase_points must be >= 3".into()));
        }
        if let Some(t) = s.target_slope_khz {
            positive("stark.target_slope_khz", t)?;
        }
        let h = &self.ghz;
        positive("ghz.rabi_khz", h.rabi_khz)?;
        positive("ghz.detuning_khz", h.detuning_khz.abs())?;
        if let Some(e) = h.eta_bus {
            positive("ghz.eta_bus", e)?;
        }
        positive("ghz.carrier_rabi_khz", h.carrier_rabi_khz)?;
        if h.bus_n_max == 0 {
            return Err(Error::Config("ghz.bus_n_max must be >= 1".into()));
        }
        if h.spectator_modes > 0 && h.spectator_n_max == 0 {
            return Err(Error::Config("ghz.spectator_n_max must be >= 1".into()));
        }
        non_negative("ghz.scan_start_us", h.scan_start_us)?;
        positive("ghz.scan_step_us", h.scan_step_us)?;
        if h.scan_stop_us < h.scan_start_us {
            return Err(Error::Config("ghz.scan_stop_us must be >= ghz.scan_start_us".into()));
        }
        for t in &h.extra_points_us {
            non_negative("ghz.extra_points_us", *t)?;
        }
        let e = &self.echo;
        positive("echo.total_delay_us", e.total_delay_us)?;
        if !(e.plain_contrast > 0.0 && e.plain_contrast <= 1.0) {
            return Err(Error::Config("echo.plain_contrast must lie in (0, 1]".into()));
        }
        if let Some(s) = e.detuning_sigma_khz {
            non_negative("echo.detuning_sigma_khz", s)?;
        }
        if e.phase_points < 3 {
            return Err(Error::Config("echo.phase_points must be >= 3".into()));
        }
        positive("echo.carrier_rabi_khz", e.carrier_rabi_khz)?;
        Ok(())
    }

    pub fn axial_frequency(&self) -> f64 {
        khz(self.crystal.axial_frequency_khz)
    }

    pub fn detuning(&self) -> f64 {
        khz(self.gate.detuning_khz)
    }

    /// Carrier Rabi frequency of the dispersive beam, rad/s.
    pub fn gate_rabi(&self) -> f64 {
        match (self.gate.rabi_khz, self.gate.light_shift_khz) {
            (Some(r), _) => khz(r),
            (None, Some(k)) => (4.0 * self.detuning().abs() * khz(k)).sqrt() / self.crystal.eta_single,
            (None, None) => 0.0,
        }
    }

    pub fn carrier_rabi(&self) -> f64 {
        khz(self.gate.carrier_rabi_khz)
    }

    pub fn shift_other(&self) -> f64 {
        khz(self.shift.other_khz)
    }

    /// Carrier Rabi frequency of the readout flop beam, rad/s, for a mode
    /// with Lamb-Dicke factor `eta`. The fitted `sin^2(W tau)` frequency is
    /// half the sideband Rabi frequency.
    pub fn flop_rabi(&self, eta: f64) -> f64 {
        match (self.flop.rabi_khz, self.flop.omega01_khz) {
            (Some(r), _) => khz(r),
            (None, Some(w)) => 2.0 * khz(w) / eta,
            (None, None) => 0.0,
        }
    }

    pub fn flop_taus(&self) -> Vec<f64> {
        (0..self.flop.points)
            .map(|k| us(self.flop.tau_step_us * k as f64))
            .collect()
    }

    /// Noise model for a gate whose dispersive pulse lasts `phi_time`.
    pub fn noise_model(&self, phi_time: f64) -> Result<NoiseModel> {
        let n = &self.noise;
        let sigma = match n.detuning_sigma_khz {
            Some(s) => khz(s),
            None if n.contrast_loss == 0.0 || phi_time == 0.0 => 0.0,
            None => calibrate_sigma(n.contrast_loss, phi_time)?,
        };
        let prep_error = match n.prep_error {
            PrepErrorKind::Ladder => PrepErrorModel::Ladder,
            PrepErrorKind::Mixture => PrepErrorModel::Mixture {
                lower_n: n.mixture_lower_n,
                flip: n.mixture_flip,
                lower_n_flip: n.mixture_lower_n_flip,
            },
        };
        let model = NoiseModel {
            detuning_sigma: sigma,
            prep_fidelity: n.prep_fidelity.iter().copied().enumerate().collect(),
            prep_error,
            ramsey_contrast_loss: n.contrast_loss,
            dephasing_enabled: n.dephasing,
            prep_enabled: n.preparation,
        };
        model.validate()?;
        Ok(model)
    }

    /// Quasi-static detuning for the echo experiment, rad/s.
    pub fn echo_sigma(&self) -> Result<f64> {
        let e = &self.echo;
        match e.detuning_sigma_khz {
            Some(s) => Ok(khz(s)),
            None if e.plain_contrast >= 1.0 => Ok(0.0),
            None => calibrate_sigma(1.0 - e.plain_contrast, us(e.total_delay_us)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn empty_file_is_default() {
        let c = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.run.shots, 100);
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let err = ExperimentConfig::from_toml_str("[gate]\ndetuning_khz = 60.0\ndetuning = 1.0\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("unknown field"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn unknown_section_rejected() {
        assert!(ExperimentConfig::from_toml_str("[gates]\nmode = 0\n").is_err());
    }

    #[test]
    fn exclusive_keys() {
        let err = ExperimentConfig::from_toml_str("[gate]\nrabi_khz = 200.0\n").unwrap_err();
        assert!(err.to_string().contains("mutually exclusive"));
        let c = ExperimentConfig::from_toml_str("[gate]\nrabi_khz = 200.0\nlight_shift_khz = -1.0\n");
        assert!(c.is_err());
    }

    #[test]
    fn validation_names_key() {
        let err = ExperimentConfig::from_toml_str("[crystal]\neta_single = 1.5\n").unwrap_err();
        assert!(err.to_string().contains("crystal.eta_single"));
        let err = ExperimentConfig::from_toml_str("[flop]\npoints = 3\n").unwrap_err();
        assert!(err.to_string().contains("flop.points"));
    }

    #[test]
    fn unit_conversion() {
        let c = ExperimentConfig::from_toml_str(
            "[gate]\nlight_shift_khz = 1.355\ndetuning_khz = 60.0\n[crystal]\neta_single = 0.068\n",
        )
        .unwrap();
        let kappa = (0.068 * c.gate_rabi()).powi(2) / (4.0 * c.detuning());
        assert_abs_diff_eq!(kappa, khz(1.355), epsilon = 1e-9);
        assert_abs_diff_eq!(c.flop_rabi(0.068) * 0.068 / 2.0, khz(11.9), epsilon = 1e-9);
        assert_eq!(c.flop_taus().len(), 50);
        assert_abs_diff_eq!(c.flop_taus()[1], 4e-6, epsilon = 1e-18);
    }

    #[test]
    fn round_trip_through_toml_and_json() {
        let mut c = ExperimentConfig::default();
        c.noise.enabled = true;
        c.gate.phi_time_factor = 1.08;
        let back = ExperimentConfig::from_toml_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("summary.json");
        std::fs::write(&p, serde_json::json!({ "config": c }).to_string()).unwrap();
        assert_eq!(ExperimentConfig::load(&p).unwrap(), c);
    }

    #[test]
    fn noise_calibration() {
        let c = ExperimentConfig::default();
        let n = c.noise_model(200e-6).unwrap();
        assert_abs_diff_eq!(
            (-(n.detuning_sigma * 200e-6).powi(2) / 2.0).exp(),
            0.94,
            epsilon = 1e-12
        );
        assert_eq!(n.prep_fidelity.get(&1), Some(&0.96));
        let s = c.echo_sigma().unwrap();
        assert_abs_diff_eq!((-(s * 2e-3).powi(2) / 2.0).exp(), 0.4, epsilon = 1e-12);
    }
}
