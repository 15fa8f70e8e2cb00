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

use std::path::Path;

use iontrap::config::ExperimentConfig;
use iontrap::experiments::{ghz, rabi_flop, run_experiment, stark_scan, truth_table_experiment};
use iontrap::units::{khz, to_khz};

fn config(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)).unwrap()
}

fn fixed_rabi_stark(rabi_khz: f64, compensate: bool) -> ExperimentConfig {
    let mut cfg = config("stark.toml");
    cfg.gate.light_shift_khz = None;
    cfg.gate.rabi_khz = Some(rabi_khz);
    cfg.stark.target_slope_khz = None;
    cfg.shift.compensate = compensate;
    cfg
}

#[test]
fn halving_rabi_quarters_the_slope() {
    let full = stark_scan(&fixed_rabi_stark(200.0, true), 1).unwrap();
    let half = stark_scan(&fixed_rabi_stark(100.0, true), 1).unwrap();
    let ratio = half.line.slope / full.line.slope;
    assert!((ratio - 0.25).abs() < 0.01, "{ratio}");
    // weak drive approaches the dispersive closed form
    assert!((half.line.slope / half.closed_form_slope - 1.0).abs() < 0.02);
}

#[test]
fn compensation_removes_the_offset() {
    let on = stark_scan(&fixed_rabi_stark(200.0, true), 1).unwrap();
    let off = stark_scan(&fixed_rabi_stark(200.0, false), 1).unwrap();
    assert!(to_khz(on.line.intercept).abs() < 0.1, "{}", to_khz(on.line.intercept));
    // without the compensation beam every level carries the common shift
    assert!(to_khz(off.line.intercept).abs() > 0.5, "{}", to_khz(off.line.intercept));
    assert!((off.line.slope / on.line.slope - 1.0).abs() < 0.05);
}

#[test]
fn calibration_converges_to_the_target() {
    let r = stark_scan(&config("stark.toml"), 1).unwrap();
    assert!((to_khz(r.line.slope) / 2.71 - 1.0).abs() < 0.01);
    assert!(r.calibration.len() == 4);
    let last = r.calibration.last().unwrap();
    assert!((to_khz(last.slope) / 2.71 - 1.0).abs() < 0.01);
}

#[test]
fn gate_time_optimum_follows_the_full_dynamics() {
    // the full-dynamics shift is ~6% below the dispersive closed form, so
    // the best time sits at ~1.06 t0 rather than at t0
    let bold = |factor: f64| {
        let mut cfg = config("truth_table.toml");
        cfg.noise.enabled = false;
        cfg.gate.phi_time_factor = factor;
        truth_table_experiment(&cfg, 1).unwrap().table.bold()
    };
    let best = bold(1.06);
    assert!(best.iter().all(|b| *b > 0.99), "{best:?}");
    let nominal = bold(1.0);
    assert!(nominal[2] < best[2] && nominal[3] < best[3], "{nominal:?}");
    let late = bold(1.3);
    assert!(late[2] < 0.9 && late[3] < 0.9, "{late:?}");
}

#[test]
fn ghz_at_zero_time_returns_to_all_s_for_odd_n() {
    let mut cfg = config("ghz.toml");
    cfg.ghz.scan_start_us = 0.0;
    cfg.ghz.scan_stop_us = 0.0;
    cfg.ghz.extra_points_us.clear();
    let r = ghz(&cfg, 1).unwrap();
    let first = r.scan.iter().find(|p| p.phi_time == 0.0).unwrap();
    assert!(first.p_all_s > 1.0 - 1e-9, "{first:?}");
    // a product state is half-way to the GHZ target at best
    assert!(first.fidelity < 0.51);
}

#[test]
fn ghz_best_point_is_near_the_entangling_time() {
    let r = ghz(&config("ghz.toml"), 1).unwrap();
    assert!((r.best.phi_time / r.entangle_time - 1.0).abs() < 0.05);
    assert!(r.best.fidelity > 0.95);
    assert_eq!(r.dimension, 32 * 27);
}

#[test]
fn flop_ratio_is_sqrt2_without_noise() {
    let mut cfg = config("rabi_flop.toml");
    cfg.noise.enabled = false;
    let r = rabi_flop(&cfg, 1).unwrap();
    let (v, e) = r.ratio_to_s0;
    assert!((v - std::f64::consts::SQRT_2).abs() < 3.0 * e, "{v} +- {e}");
    assert!((r.omega01 / khz(11.9) - 1.0).abs() < 0.01);
}

#[test]
fn unknown_command_is_rejected() {
    let err = run_experiment("teleport", &ExperimentConfig::default(), 1).unwrap_err();
    assert!(err.to_string().contains("teleport"));
}
