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

//! Fits for simulated measurement records.
//!
//! * [`fit_flop`]: the four-population blue-sideband flop model
//!   `P_D = a_S0 sin^2(W01 t) + a_D0 + a_S1 sin^2(W12 t) + a_D1 cos^2(W01 t)`.
//!   Note the model uses `sin^2(W t)`, so a fitted `W` is half the
//!   Hamiltonian Rabi frequency of the flop.
//! * [`fit_sine`]: single `offset + amplitude sin^2(W t)` first-pass fit.
//! * [`fit_stark_slope`] / [`fit_polynomial`]: weighted linear least squares.
//! * [`ramsey_contrast`]: fringe contrast and phase from a phase scan.
//!
//! Data are `(x, y, stderr)` triples. A zero stderr is replaced by the
//! smallest positive stderr in the set; if all are zero the fit is
//! unweighted and uncertainties are scaled by the residual variance.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector, SVD};
use serde::{Deserialize, Serialize};

use crate::lm::{minimize, LmOptions};
use crate::{Error, Result};

/// One measured point: abscissa, value, standard error.
pub type Point = (f64, f64, f64);

/// Per-point sigmas and whether they are genuine (weighted fit).
fn sigmas(data: &[Point]) -> (Vec<f64>, bool) {
    let floor = data
        .iter()
        .map(|p| p.2)
        .filter(|s| *s > 0.0 && s.is_finite())
        .fold(f64::INFINITY, f64::min);
    if floor.is_infinite() {
        return (vec![1.0; data.len()], false);
    }
    (data.iter().map(|p| if p.2 > 0.0 { p.2 } else { floor }).collect(), true)
}

fn check_finite(data: &[Point]) -> Result<()> {
    if data
        .iter()
        .any(|p| !p.0.is_finite() || !p.1.is_finite() || !p.2.is_finite() || p.2 < 0.0)
    {
        return Err(Error::InvalidParameter(
            "data contain non-finite values or negative stderr".into(),
        ));
    }
    Ok(())
}

/// Pseudo-inverse of a symmetric positive semi-definite matrix and whether
/// it was rank deficient.
fn pinv(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let svd = SVD::new(m.clone(), true, true);
    let smax = svd.singular_values.max();
    let tol = 1e-12 * smax.max(1e-300);
    let deficient = svd.singular_values.iter().any(|s| *s <= tol);
    let p = svd
        .pseudo_inverse(tol)
        .unwrap_or_else(|_| DMatrix::zeros(m.ncols(), m.nrows()));
    (p, deficient)
}

/// Names of the entries of [`FitResult::values`], in order.
pub const FLOP_PARAMETERS: [&str; 6] = ["a_S0", "a_D0", "a_S1", "a_D1", "omega01", "omega12"];

/// Options for [`fit_flop`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopOptions {
    /// Constrain `W12 = sqrt(2) W01`.
    pub lock_sqrt2: bool,
    /// Keep `(W01, W12)` fixed, e.g. from a first-pass [`fit_sine`].
    pub fixed_frequencies: Option<(f64, f64)>,
    /// Start `W01` (and `W12 = sqrt(2) W01`) from a calibrated value
    /// instead of the spectrum. Data dominated by a single frequency can be
    /// explained equally well by `S0` flopping at `W01` or `S1` flopping at
    /// `W12`; the hint selects the physical branch.
    pub omega01_hint: Option<f64>,
}

/// Result of [`fit_flop`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub a_s0: f64,
    pub a_d0: f64,
    pub a_s1: f64,
    pub a_d1: f64,
    /// rad/s, in the `sin^2(W t)` convention.
    pub omega01: f64,
    pub omega12: f64,
    /// 6x6 covariance in the order of [`FLOP_PARAMETERS`].
    pub covariance: Vec<Vec<f64>>,
    /// Weighted sum of squared residuals.
    pub chi2: f64,
    /// Unweighted residual sum of squares.
    pub rss: f64,
    pub dof: usize,
    pub iterations: usize,
    pub converged: bool,
    pub rank_deficient: bool,
    pub options: FlopOptions,
    pub message: String,
}

/// The flop model for coefficients `a = (S0, D0, S1, D1)`.
pub fn flop_model(a: [f64; 4], omega01: f64, omega12: f64, tau: f64) -> f64 {
    let s01 = (omega01 * tau).sin().powi(2);
    let s12 = (omega12 * tau).sin().powi(2);
    a[0] * s01 + a[1] + a[2] * s12 + a[3] * (1.0 - s01)
}

impl FitResult {
    pub fn coefficients(&self) -> [f64; 4] {
        [self.a_s0, self.a_d0, self.a_s1, self.a_d1]
    }

    pub fn values(&self) -> [f64; 6] {
        [self.a_s0, self.a_d0, self.a_s1, self.a_d1, self.omega01, self.omega12]
    }

    pub fn stderr(&self) -> [f64; 6] {
        let mut out = [0.0; 6];
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.covariance[k][k].max(0.0).sqrt();
        }
        out
    }

    pub fn eval(&self, tau: f64) -> f64 {
        flop_model(self.coefficients(), self.omega01, self.omega12, tau)
    }

    /// `W12 / W01` with its first-order uncertainty.
    pub fn frequency_ratio(&self) -> (f64, f64) {
        let r = self.omega12 / self.omega01;
        let c = &self.covariance;
        let var = r
            * r
            * (c[5][5] / self.omega12.powi(2) + c[4][4] / self.omega01.powi(2)
                - 2.0 * c[4][5] / (self.omega01 * self.omega12));
        (r, var.max(0.0).sqrt())
    }
}

fn softmax(z: &[f64]) -> [f64; 4] {
    let m = z.iter().fold(0.0_f64, |m, v| m.max(*v));
    let e = [(z[0] - m).exp(), (z[1] - m).exp(), (z[2] - m).exp(), (-m).exp()];
    let s: f64 = e.iter().sum();
    [e[0] / s, e[1] / s, e[2] / s, e[3] / s]
}

fn inverse_softmax(a: [f64; 4]) -> [f64; 3] {
    let c = a.map(|x| x.clamp(1e-4, 1.0));
    [(c[0] / c[3]).ln(), (c[1] / c[3]).ln(), (c[2] / c[3]).ln()]
}

#[derive(Clone, Copy)]
enum FreqMode {
    Free,
    Locked,
    Fixed(f64, f64),
}

struct FlopProblem<'a> {
    data: &'a [Point],
    sigma: &'a [f64],
    scale: f64,
    mode: FreqMode,
}

impl FlopProblem<'_> {
    fn unpack(&self, x: &[f64]) -> ([f64; 4], f64, f64) {
        let a = softmax(&x[..3]);
        match self.mode {
            FreqMode::Fixed(w1, w2) => (a, w1, w2),
            FreqMode::Locked => (a, x[3] * self.scale, SQRT_2 * x[3] * self.scale),
            FreqMode::Free => (a, x[3] * self.scale, x[4] * self.scale),
        }
    }

    fn n_params(&self) -> usize {
        match self.mode {
            FreqMode::Fixed(..) => 3,
            FreqMode::Locked => 4,
            FreqMode::Free => 5,
        }
    }

    fn eval(&self, x: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let (a, w1, w2) = self.unpack(x);
        let n = self.data.len();
        let mut r = DVector::zeros(n);
        let mut j = DMatrix::zeros(n, self.n_params());
        for (i, &(t, y, _)) in self.data.iter().enumerate() {
            let s01 = (w1 * t).sin().powi(2);
            let s12 = (w2 * t).sin().powi(2);
            let g = [s01, 1.0, s12, 1.0 - s01];
            let p = a[0] * g[0] + a[1] + a[2] * g[2] + a[3] * g[3];
            let w = 1.0 / self.sigma[i];
            r[i] = (p - y) * w;
            for k in 0..3 {
                j[(i, k)] = a[k] * (g[k] - p) * w;
            }
            let d01 = t * (2.0 * w1 * t).sin();
            let d12 = t * (2.0 * w2 * t).sin();
            match self.mode {
                FreqMode::Fixed(..) => {}
                FreqMode::Locked => {
                    j[(i, 3)] = self.scale * ((a[0] - a[3]) * d01 + a[2] * SQRT_2 * d12) * w;
                }
                FreqMode::Free => {
                    j[(i, 3)] = self.scale * (a[0] - a[3]) * d01 * w;
                    j[(i, 4)] = self.scale * a[2] * d12 * w;
                }
            }
        }
        (r, j)
    }

    /// Linear least squares for the coefficients at fixed frequencies,
    /// used as a starting point.
    fn linear_start(&self, w1: f64, w2: f64) -> [f64; 4] {
        let n = self.data.len();
        let mut m = DMatrix::zeros(n, 3);
        let mut rhs = DVector::zeros(n);
        for (i, &(t, y, _)) in self.data.iter().enumerate() {
            let s01 = (w1 * t).sin().powi(2);
            let s12 = (w2 * t).sin().powi(2);
            let c01 = 1.0 - s01;
            let w = 1.0 / self.sigma[i];
            m[(i, 0)] = (s01 - c01) * w;
            m[(i, 1)] = (1.0 - c01) * w;
            m[(i, 2)] = (s12 - c01) * w;
            rhs[i] = (y - c01) * w;
        }
        let (p, _) = pinv(&(m.transpose() * &m));
        let b = p * (m.transpose() * rhs);
        let mut a = [b[0], b[1], b[2], 1.0 - b[0] - b[1] - b[2]];
        a.iter_mut().for_each(|x| *x = x.clamp(1e-3, 1.0));
        let s: f64 = a.iter().sum();
        a.map(|x| x / s)
    }
}

/// Angular-frequency power spectrum `|sum (y - mean) e^{-i v x}|^2` of
/// possibly non-uniformly sampled data, on a grid up to the Nyquist
/// frequency of the median spacing.
pub fn periodogram(data: &[Point]) -> Vec<(f64, f64)> {
    if data.len() < 3 {
        return Vec::new();
    }
    let mean = data.iter().map(|p| p.1).sum::<f64>() / data.len() as f64;
    let mut xs: Vec<f64> = data.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    let span = xs[xs.len() - 1] - xs[0];
    if span <= 0.0 {
        return Vec::new();
    }
    let mut gaps: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).filter(|g| *g > 0.0).collect();
    gaps.sort_by(f64::total_cmp);
    let median = gaps[gaps.len() / 2];
    let nu_max = PI / median;
    let dnu = 2.0 * PI / (span * 10.0);
    let count = (nu_max / dnu).ceil() as usize;
    (1..=count)
        .map(|k| {
            let nu = k as f64 * dnu;
            (nu, power(data, mean, nu))
        })
        .collect()
}

/// Local maxima of the periodogram, strongest first, at least 10% of the
/// strongest.
fn spectral_peaks(data: &[Point], count: usize) -> Vec<f64> {
    let spec = periodogram(data);
    let mut peaks: Vec<(f64, f64)> = spec
        .windows(3)
        .filter(|w| w[1].1 > w[0].1 && w[1].1 >= w[2].1)
        .map(|w| w[1])
        .collect();
    if let (Some(first), Some(last)) = (spec.first(), spec.get(1)) {
        if first.1 > last.1 {
            peaks.push(*first);
        }
    }
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.total_cmp(&b.0)));
    let top = peaks.first().map_or(0.0, |p| p.1);
    let dnu = if spec.len() > 1 { spec[1].0 - spec[0].0 } else { 0.0 };
    peaks
        .into_iter()
        .filter(|p| p.1 >= 0.1 * top)
        .take(count)
        .map(|p| refine_peak(data, p.0 - dnu, p.0 + dnu))
        .collect()
}

fn power(data: &[Point], mean: f64, nu: f64) -> f64 {
    let (mut re, mut im) = (0.0, 0.0);
    for &(x, y, _) in data {
        re += (y - mean) * (nu * x).cos();
        im -= (y - mean) * (nu * x).sin();
    }
    re * re + im * im
}

/// Golden-section search for the power maximum inside one grid cell.
fn refine_peak(data: &[Point], mut a: f64, mut b: f64) -> f64 {
    let mean = data.iter().map(|p| p.1).sum::<f64>() / data.len() as f64;
    a = a.max(0.0);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..60 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if power(data, mean, c) > power(data, mean, d) {
            b = d;
        } else {
            a = c;
        }
    }
    0.5 * (a + b)
}

fn constant_result(c: f64, data: &[Point], options: FlopOptions) -> FitResult {
    let c = c.clamp(0.0, 1.0);
    FitResult {
        a_s0: 1.0 - c,
        a_d0: c,
        a_s1: 0.0,
        a_d1: 0.0,
        omega01: 0.0,
        omega12: 0.0,
        covariance: vec![vec![0.0; 6]; 6],
        chi2: 0.0,
        rss: data.iter().map(|p| (p.1 - c).powi(2)).sum(),
        dof: data.len().saturating_sub(1),
        iterations: 0,
        converged: true,
        rank_deficient: true,
        options,
        message: "constant data: frequencies undetermined".into(),
    }
}

/// Shot count behind binomial standard errors, if every interior point
/// satisfies `stderr^2 = p (1 - p) / N` for a common `N`.
pub fn binomial_shots(data: &[Point]) -> Option<f64> {
    let ns: Vec<f64> = data
        .iter()
        .filter(|p| p.1 > 0.0 && p.1 < 1.0 && p.2 > 0.0)
        .map(|p| p.1 * (1.0 - p.1) / (p.2 * p.2))
        .collect();
    if ns.len() < 3 {
        return None;
    }
    let mut sorted = ns.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let consistent = ns.iter().all(|n| (n / median - 1.0).abs() < 1e-3);
    (consistent && median >= 1.0).then_some(median.round())
}

/// Fit the four-population flop model.
///
/// When the standard errors are binomial (see [`binomial_shots`]) the fit
/// is iteratively reweighted with the model variance `P (1 - P) / N`
/// instead of the observed one, which would give points measured at 0 or
/// 1 an unduly large weight.
pub fn fit_flop(data: &[Point], options: FlopOptions) -> Result<FitResult> {
    check_finite(data)?;
    if data.len() < 8 {
        return Err(Error::InvalidParameter(format!(
            "flop fit needs at least 8 points, got {}",
            data.len()
        )));
    }
    let (lo, hi) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        (lo.min(p.1), hi.max(p.1))
    });
    if hi - lo <= 1e-12 {
        let c = data.iter().map(|p| p.1).sum::<f64>() / data.len() as f64;
        return Ok(constant_result(c, data, options));
    }
    let (sigma, weighted) = sigmas(data);

    let seeds: Vec<(f64, f64)> = match (options.fixed_frequencies, options.omega01_hint) {
        (Some(w), _) => vec![w],
        (None, Some(h)) => vec![(h, SQRT_2 * h)],
        (None, None) => {
            let mut s = Vec::new();
            for nu in spectral_peaks(data, 3) {
                s.push((nu / 2.0, nu / SQRT_2));
                s.push((nu / (2.0 * SQRT_2), nu / 2.0));
            }
            if s.is_empty() {
                return Err(Error::SingularDesign("no spectral peak in flop data".into()));
            }
            s
        }
    };
    let mut seeds = seeds;
    if options.fixed_frequencies.is_none() && !options.lock_sqrt2 {
        // the unlocked fit also starts from the locked optimum
        let locked = fit_flop(
            data,
            FlopOptions {
                lock_sqrt2: true,
                ..options
            },
        )?;
        if locked.omega01 > 0.0 {
            seeds.insert(0, (locked.omega01, locked.omega12));
        }
    }
    let mut fit = fit_flop_seeded(data, &sigma, weighted, options, &seeds);
    if let Some(n) = binomial_shots(data) {
        for _ in 0..3 {
            let model_sigma: Vec<f64> = data
                .iter()
                .map(|p| {
                    let q = fit.eval(p.0).clamp(0.5 / n, 1.0 - 0.5 / n);
                    (q * (1.0 - q) / n).sqrt()
                })
                .collect();
            let seed = [(fit.omega01, fit.omega12)];
            let seeds = if options.fixed_frequencies.is_some() {
                &seeds[..]
            } else {
                &seed[..]
            };
            fit = fit_flop_seeded(data, &model_sigma, true, options, seeds);
        }
    }
    let span = data.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max)
        - data.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    if fit.omega01 * span < PI {
        fit.message.push_str("; data span less than one W01 period");
    }
    Ok(fit)
}

fn fit_flop_seeded(
    data: &[Point],
    sigma: &[f64],
    weighted: bool,
    options: FlopOptions,
    seeds: &[(f64, f64)],
) -> FitResult {
    let mode = match options.fixed_frequencies {
        Some((w1, w2)) => FreqMode::Fixed(w1, w2),
        None if options.lock_sqrt2 => FreqMode::Locked,
        None => FreqMode::Free,
    };
    let mut best: Option<FitResult> = None;
    for &(w_start, w2_seed) in seeds {
        let problem = FlopProblem {
            data,
            sigma,
            scale: w_start,
            mode,
        };
        let z = inverse_softmax(problem.linear_start(w_start, w2_seed));
        let mut x0 = z.to_vec();
        match mode {
            FreqMode::Fixed(..) => {}
            FreqMode::Locked => x0.push(1.0),
            FreqMode::Free => x0.extend([1.0, w2_seed / w_start]),
        }
        let out = minimize(|x| problem.eval(x), &x0, LmOptions::default());
        let (a, w1, w2) = problem.unpack(&out.params);
        let (w1, w2) = (w1.abs(), w2.abs());
        let (covariance, deficient) =
            flop_covariance(data, sigma, weighted, a, w1, w2, mode, out.chi2, problem.n_params());
        let fit = FitResult {
            a_s0: a[0],
            a_d0: a[1],
            a_s1: a[2],
            a_d1: a[3],
            omega01: w1,
            omega12: w2,
            covariance,
            chi2: out.chi2,
            rss: data.iter().map(|p| (flop_model(a, w1, w2, p.0) - p.1).powi(2)).sum(),
            dof: data.len().saturating_sub(problem.n_params()),
            iterations: out.iterations,
            converged: out.converged,
            rank_deficient: deficient,
            options,
            message: out.message,
        };
        let better = match &best {
            None => true,
            Some(b) => {
                let tie = (fit.chi2 - b.chi2).abs() <= 1e-9 * b.chi2.max(1e-300);
                if tie {
                    fit.omega01 < b.omega01
                } else {
                    fit.chi2 < b.chi2
                }
            }
        };
        if better {
            best = Some(fit);
        }
    }
    best.expect("at least one seed")
}

#[allow(clippy::too_many_arguments)]
fn flop_covariance(
    data: &[Point],
    sigma: &[f64],
    weighted: bool,
    a: [f64; 4],
    w1: f64,
    w2: f64,
    mode: FreqMode,
    chi2: f64,
    n_params: usize,
) -> (Vec<Vec<f64>>, bool) {
    // free parameters: a_S0, a_D0, a_S1, then W01 and W12 as applicable;
    // a_D1 = 1 - sum is eliminated
    let k = match mode {
        FreqMode::Fixed(..) => 3,
        FreqMode::Locked => 4,
        FreqMode::Free => 5,
    };
    let n = data.len();
    let mut j = DMatrix::zeros(n, k);
    for (i, &(t, _, _)) in data.iter().enumerate() {
        let s01 = (w1 * t).sin().powi(2);
        let s12 = (w2 * t).sin().powi(2);
        let c01 = 1.0 - s01;
        let w = 1.0 / sigma[i];
        j[(i, 0)] = (s01 - c01) * w;
        j[(i, 1)] = (1.0 - c01) * w;
        j[(i, 2)] = (s12 - c01) * w;
        let d01 = t * (2.0 * w1 * t).sin();
        let d12 = t * (2.0 * w2 * t).sin();
        match mode {
            FreqMode::Fixed(..) => {}
            FreqMode::Locked => j[(i, 3)] = ((a[0] - a[3]) * d01 + a[2] * SQRT_2 * d12) * w,
            FreqMode::Free => {
                j[(i, 3)] = (a[0] - a[3]) * d01 * w;
                j[(i, 4)] = a[2] * d12 * w;
            }
        }
    }
    let (mut c, deficient) = pinv(&(j.transpose() * &j));
    if !weighted {
        let dof = n.saturating_sub(n_params).max(1);
        c *= chi2 / dof as f64;
    }
    // map to the six reported quantities
    let mut t = DMatrix::zeros(6, k);
    t[(0, 0)] = 1.0;
    t[(1, 1)] = 1.0;
    t[(2, 2)] = 1.0;
    t[(3, 0)] = -1.0;
    t[(3, 1)] = -1.0;
    t[(3, 2)] = -1.0;
    match mode {
        FreqMode::Fixed(..) => {}
        FreqMode::Locked => {
            t[(4, 3)] = 1.0;
            t[(5, 3)] = SQRT_2;
        }
        FreqMode::Free => {
            t[(4, 3)] = 1.0;
            t[(5, 4)] = 1.0;
        }
    }
    let full = &t * c * t.transpose();
    let rows = (0..6).map(|r| (0..6).map(|q| full[(r, q)]).collect()).collect();
    (rows, deficient)
}

/// Result of [`fit_sine`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SineFit {
    pub offset: f64,
    pub amplitude: f64,
    /// rad/s, in the `sin^2(W t)` convention.
    pub omega: f64,
    pub omega_err: f64,
    pub chi2: f64,
    pub converged: bool,
}

/// Fit `offset + amplitude sin^2(W t)`.
pub fn fit_sine(data: &[Point]) -> Result<SineFit> {
    check_finite(data)?;
    if data.len() < 4 {
        return Err(Error::InvalidParameter("sine fit needs at least 4 points".into()));
    }
    let (sigma, weighted) = sigmas(data);
    let peaks = spectral_peaks(data, 3);
    if peaks.is_empty() {
        return Err(Error::SingularDesign("no spectral peak in data".into()));
    }
    let mut best: Option<SineFit> = None;
    for nu in peaks {
        let scale = nu / 2.0;
        let model = |x: &[f64]| {
            let n = data.len();
            let mut r = DVector::zeros(n);
            let mut j = DMatrix::zeros(n, 3);
            for (i, &(t, y, _)) in data.iter().enumerate() {
                let w = x[2] * scale;
                let s = (w * t).sin().powi(2);
                let inv = 1.0 / sigma[i];
                r[i] = (x[0] + x[1] * s - y) * inv;
                j[(i, 0)] = inv;
                j[(i, 1)] = s * inv;
                j[(i, 2)] = x[1] * t * (2.0 * w * t).sin() * scale * inv;
            }
            (r, j)
        };
        let ys: Vec<f64> = data.iter().map(|p| p.1).collect();
        let (lo, hi) = ys
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), y| (l.min(*y), h.max(*y)));
        let first = data.iter().min_by(|a, b| a.0.total_cmp(&b.0)).map_or(lo, |p| p.1);
        let (off, amp) = if (first - lo).abs() <= (first - hi).abs() {
            (lo, hi - lo)
        } else {
            (hi, lo - hi)
        };
        let out = minimize(model, &[off, amp, 1.0], LmOptions::default());
        let (_, j) = model(&out.params);
        let (mut c, _) = pinv(&(j.transpose() * &j));
        if !weighted {
            c *= out.chi2 / (data.len().saturating_sub(3).max(1)) as f64;
        }
        let fit = SineFit {
            offset: out.params[0],
            amplitude: out.params[1],
            omega: (out.params[2] * scale).abs(),
            omega_err: c[(2, 2)].max(0.0).sqrt() * scale,
            chi2: out.chi2,
            converged: out.converged,
        };
        if best.as_ref().is_none_or(|b| fit.chi2 < b.chi2 * (1.0 - 1e-9)) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one peak"))
}

/// Weighted least-squares polynomial; coefficients lowest order first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyFit {
    pub coefficients: Vec<f64>,
    pub stderr: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub chi2: f64,
    pub residuals: Vec<f64>,
}

/// Weighted polynomial least squares of the given degree.
pub fn fit_polynomial(data: &[Point], degree: usize) -> Result<PolyFit> {
    check_finite(data)?;
    let mut xs: Vec<f64> = data.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() <= degree {
        return Err(Error::SingularDesign(format!(
            "{} distinct abscissae cannot determine a degree-{} polynomial",
            xs.len(),
            degree
        )));
    }
    let (sigma, weighted) = sigmas(data);
    let n = data.len();
    let k = degree + 1;
    let mut m = DMatrix::zeros(n, k);
    let mut rhs = DVector::zeros(n);
    for (i, &(x, y, _)) in data.iter().enumerate() {
        let w = 1.0 / sigma[i];
        for d in 0..k {
            m[(i, d)] = x.powi(d as i32) * w;
        }
        rhs[i] = y * w;
    }
    let normal = m.transpose() * &m;
    let inv = normal
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::SingularDesign("normal equations are singular".into()))?;
    let coef = &inv * (m.transpose() * &rhs);
    let residuals: Vec<f64> = data
        .iter()
        .map(|&(x, y, _)| y - (0..k).map(|d| coef[d] * x.powi(d as i32)).sum::<f64>())
        .collect();
    let chi2: f64 = residuals.iter().zip(&sigma).map(|(r, s)| (r / s).powi(2)).sum();
    let mut cov = inv;
    if !weighted {
        let dof = n.saturating_sub(k);
        cov *= if dof > 0 { chi2 / dof as f64 } else { 0.0 };
    }
    Ok(PolyFit {
        coefficients: coef.iter().copied().collect(),
        stderr: (0..k).map(|d| cov[(d, d)].max(0.0).sqrt()).collect(),
        covariance: (0..k).map(|r| (0..k).map(|c| cov[(r, c)]).collect()).collect(),
        chi2,
        residuals,
    })
}

/// Result of [`fit_stark_slope`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    /// rad/s per phonon.
    pub slope: f64,
    pub intercept: f64,
    pub slope_err: f64,
    pub intercept_err: f64,
    pub chi2: f64,
    pub residuals: Vec<f64>,
}

/// Straight line through `(n, shift, stderr)` points.
pub fn fit_stark_slope(data: &[Point]) -> Result<LineFit> {
    let p = fit_polynomial(data, 1)?;
    Ok(LineFit {
        intercept: p.coefficients[0],
        slope: p.coefficients[1],
        intercept_err: p.stderr[0],
        slope_err: p.stderr[1],
        chi2: p.chi2,
        residuals: p.residuals,
    })
}

/// Result of [`ramsey_contrast`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fringe {
    /// Peak-to-peak fringe amplitude, clamped to [0, 1].
    pub contrast: f64,
    pub contrast_err: f64,
    /// `phi0` in `P = baseline + contrast/2 cos(phase + phi0)`, in (-pi, pi].
    pub phase_offset: f64,
    pub phase_err: f64,
    pub baseline: f64,
    pub chi2: f64,
    pub converged: bool,
}

/// Fringe fit over a scan of the analysis-pulse phase. The phases must
/// sample the circle well enough to separate `cos` and `sin`.
pub fn ramsey_contrast(data: &[Point]) -> Result<Fringe> {
    check_finite(data)?;
    if data.len() < 3 {
        return Err(Error::InvalidParameter("fringe fit needs at least 3 points".into()));
    }
    let (sigma, weighted) = sigmas(data);
    let n = data.len();
    let mut m = DMatrix::zeros(n, 3);
    let mut rhs = DVector::zeros(n);
    for (i, &(ph, y, _)) in data.iter().enumerate() {
        let w = 1.0 / sigma[i];
        m[(i, 0)] = w;
        m[(i, 1)] = ph.cos() * w;
        m[(i, 2)] = ph.sin() * w;
        rhs[i] = y * w;
    }
    let normal = m.transpose() * &m;
    let svd = SVD::new(normal.clone(), false, false);
    let cond = svd.singular_values.max() / svd.singular_values.min().max(1e-300);
    if cond > 1e10 {
        return Err(Error::SingularDesign("phases do not cover the circle".into()));
    }
    let inv = normal
        .try_inverse()
        .ok_or_else(|| Error::SingularDesign("singular fringe design".into()))?;
    let c = &inv * (m.transpose() * &rhs);
    let (a0, a, b) = (c[0], c[1], c[2]);
    let resid = &m * &c - &rhs;
    let chi2 = resid.norm_squared();
    let mut cov = inv;
    if !weighted {
        let dof = n.saturating_sub(3);
        cov *= if dof > 0 { chi2 / dof as f64 } else { 0.0 };
    }
    let r = (a * a + b * b).sqrt();
    let (var_r, var_phi) = if r > 0.0 {
        let (da, db) = (a / r, b / r);
        let vr = da * da * cov[(1, 1)] + db * db * cov[(2, 2)] + 2.0 * da * db * cov[(1, 2)];
        let (pa, pb) = (b / (r * r), -a / (r * r));
        let vp = pa * pa * cov[(1, 1)] + pb * pb * cov[(2, 2)] + 2.0 * pa * pb * cov[(1, 2)];
        (vr, vp)
    } else {
        (cov[(1, 1)].max(cov[(2, 2)]), PI * PI)
    };
    Ok(Fringe {
        contrast: (2.0 * r).clamp(0.0, 1.0),
        contrast_err: 2.0 * var_r.max(0.0).sqrt(),
        phase_offset: (-b).atan2(a),
        phase_err: var_phi.max(0.0).sqrt(),
        baseline: a0,
        chi2,
        converged: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolve::shot_rng;
    use crate::units::khz;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::{Binomial, Distribution};

    fn taus(n: usize, span: f64) -> Vec<f64> {
        (0..n).map(|k| span * k as f64 / (n - 1) as f64).collect()
    }

    fn synth(a: [f64; 4], w1: f64, w2: f64, shots: u64, seed: u64, n: usize) -> Vec<Point> {
        let mut rng = shot_rng(seed, 0);
        taus(n, 200e-6)
            .into_iter()
            .map(|t| {
                let p = flop_model(a, w1, w2, t).clamp(0.0, 1.0);
                if shots == 0 {
                    return (t, p, 0.0);
                }
                let k = Binomial::new(shots, p).unwrap().sample(&mut rng);
                let ph = k as f64 / shots as f64;
                (t, ph, (ph * (1.0 - ph) / shots as f64).sqrt())
            })
            .collect()
    }

    #[test]
    fn noiseless_recovery_is_exact() {
        let w1 = khz(11.9);
        for (a, lock) in [
            ([0.15, 0.05, 0.72, 0.08], false),
            ([0.6, 0.2, 0.15, 0.05], true),
            ([0.25, 0.3, 0.3, 0.15], false),
        ] {
            let data = synth(a, w1, SQRT_2 * w1, 0, 0, 50);
            let f = fit_flop(
                &data,
                FlopOptions {
                    lock_sqrt2: lock,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(f.converged, "{}", f.message);
            let got = f.values();
            let want = [a[0], a[1], a[2], a[3], w1, SQRT_2 * w1];
            for k in 0..6 {
                assert!(
                    (got[k] - want[k]).abs() <= 1e-6 * want[k].abs(),
                    "{} {} {}",
                    FLOP_PARAMETERS[k],
                    got[k],
                    want[k]
                );
            }
            assert_abs_diff_eq!(f.coefficients().iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn degenerate_coefficients_flag_rank_deficiency() {
        let w1 = khz(11.9);
        let data = synth([0.1, 0.05, 0.75, 0.1], w1, SQRT_2 * w1, 0, 0, 50);
        let f = fit_flop(&data, FlopOptions::default()).unwrap();
        assert!(f.rank_deficient);
        assert_abs_diff_eq!(f.omega12, SQRT_2 * w1, epsilon = 1e-6 * w1);
    }

    #[test]
    fn single_frequency_data_needs_the_hint() {
        // S0 flopping at W and S1 flopping at W fit equally well; the hint
        // selects the branch
        let w1 = khz(11.9);
        let data: Vec<Point> = taus(50, 200e-6)
            .into_iter()
            .map(|t| (t, (SQRT_2 * w1 * t).sin().powi(2), 0.0))
            .collect();
        let f = fit_flop(
            &data,
            FlopOptions {
                omega01_hint: Some(w1),
                ..Default::default()
            },
        )
        .unwrap();
        assert_abs_diff_eq!(f.a_s1, 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(f.omega12 / (SQRT_2 * w1), 1.0, epsilon = 1e-6);
        let f = fit_flop(
            &data,
            FlopOptions {
                omega01_hint: Some(SQRT_2 * w1),
                ..Default::default()
            },
        )
        .unwrap();
        assert_abs_diff_eq!(f.a_s0, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn constant_data_is_rank_deficient() {
        let data: Vec<Point> = taus(20, 1e-4).into_iter().map(|t| (t, 1.0, 0.0)).collect();
        let f = fit_flop(&data, FlopOptions::default()).unwrap();
        assert!(f.rank_deficient);
        assert_eq!(f.a_d0, 1.0);
        assert_eq!(f.omega01, 0.0);
        assert!(fit_flop(&data[..5], FlopOptions::default()).is_err());
    }

    #[test]
    fn noisy_recovery_within_two_sigma() {
        let w1 = khz(11.9);
        // a_S0 = a_D1 makes the W01 terms constant, so W01 is only
        // identifiable through the locked ratio
        let a = [0.1, 0.0, 0.8, 0.1];
        let want = [a[0], a[1], a[2], a[3], w1, SQRT_2 * w1];
        let mut inside = [0usize; 6];
        for seed in 0..60 {
            let data = synth(a, w1, SQRT_2 * w1, 100, 1000 + seed, 50);
            let f = fit_flop(
                &data,
                FlopOptions {
                    lock_sqrt2: true,
                    omega01_hint: Some(w1),
                    ..Default::default()
                },
            )
            .unwrap();
            let (v, e) = (f.values(), f.stderr());
            for k in 0..6 {
                if (v[k] - want[k]).abs() <= 2.0 * e[k] {
                    inside[k] += 1;
                }
                assert!(
                    (v[k] - want[k]).abs() <= 5.0 * e[k] + 1e-12,
                    "{} {} {}",
                    FLOP_PARAMETERS[k],
                    v[k],
                    e[k]
                );
            }
            assert!(f.coefficients().iter().all(|x| (0.0..=1.0).contains(x)));
        }
        // 2 sigma holds 95% of the time; allow binomial scatter over 60 trials
        assert!(inside.iter().all(|c| *c >= 52), "{inside:?}");
    }

    #[test]
    fn fixed_frequencies_are_kept() {
        let w1 = khz(11.9);
        let data = synth([0.3, 0.2, 0.4, 0.1], w1, SQRT_2 * w1, 0, 0, 30);
        let f = fit_flop(
            &data,
            FlopOptions {
                fixed_frequencies: Some((w1, SQRT_2 * w1)),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(f.omega01, w1);
        assert_abs_diff_eq!(f.a_s1, 0.4, epsilon = 1e-8);
        assert_eq!(f.stderr()[4], 0.0);
    }

    #[test]
    fn sine_fit_first_pass() {
        let w = khz(16.95);
        let data: Vec<Point> = taus(40, 150e-6)
            .into_iter()
            .map(|t| (t, 0.05 + 0.9 * (w * t).sin().powi(2), 0.0))
            .collect();
        let f = fit_sine(&data).unwrap();
        assert_abs_diff_eq!(f.omega / w, 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(f.amplitude, 0.9, epsilon = 1e-8);
    }

    #[test]
    fn bootstrap_spread_matches_covariance() {
        let w1 = khz(11.9);
        let a = [0.15, 0.05, 0.72, 0.08];
        let data = synth(a, w1, SQRT_2 * w1, 100, 11, 50);
        let opts = FlopOptions::default();
        let f = fit_flop(&data, opts).unwrap();
        let e = f.stderr();
        let mut rng = shot_rng(99, 0);
        let mut samples: Vec<[f64; 6]> = Vec::new();
        for _ in 0..200 {
            let resampled: Vec<Point> = data
                .iter()
                .map(|&(t, _, _)| {
                    let p = f.eval(t).clamp(0.0, 1.0);
                    let k = Binomial::new(100, p).unwrap().sample(&mut rng);
                    let ph = k as f64 / 100.0;
                    (t, ph, (ph * (1.0 - ph) / 100.0).sqrt())
                })
                .collect();
            samples.push(fit_flop(&resampled, opts).unwrap().values());
        }
        for k in 0..6 {
            let mean = samples.iter().map(|s| s[k]).sum::<f64>() / 200.0;
            let sd = (samples.iter().map(|s| (s[k] - mean).powi(2)).sum::<f64>() / 199.0).sqrt();
            let ratio = sd / e[k];
            assert!(
                (0.5..=2.0).contains(&ratio),
                "{} bootstrap {} vs {}",
                FLOP_PARAMETERS[k],
                sd,
                e[k]
            );
        }
    }

    #[test]
    fn stark_slope_exact_line() {
        let s = khz(2.71);
        let data: Vec<Point> = (0..4).map(|n| (n as f64, s * n as f64, 0.0)).collect();
        let f = fit_stark_slope(&data).unwrap();
        assert_abs_diff_eq!(f.slope / s, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.intercept, 0.0, epsilon = 1e-9);
        assert!(f.residuals.iter().all(|r| r.abs() <= 1e-10 * s * 3.0));
    }

    #[test]
    fn stark_intercept_within_one_sigma() {
        let s = khz(2.71);
        let b = khz(0.3);
        let mut rng = shot_rng(4, 0);
        let mut hits = 0;
        for _ in 0..200 {
            let data: Vec<Point> = (0..4)
                .map(|n| {
                    let noise: f64 = rng.random_range(-1.0..1.0) * khz(0.1) * 3f64.sqrt();
                    (n as f64, b + s * n as f64 + noise, khz(0.1))
                })
                .collect();
            let f = fit_stark_slope(&data).unwrap();
            if (f.intercept - b).abs() <= f.intercept_err {
                hits += 1;
            }
        }
        assert!((110..=160).contains(&hits), "{hits}");
    }

    #[test]
    fn stark_two_points_and_singular() {
        let f = fit_stark_slope(&[(1.0, 3.0, 0.0), (3.0, 7.0, 0.0)]).unwrap();
        assert_abs_diff_eq!(f.slope, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.intercept, 1.0, epsilon = 1e-12);
        assert!(matches!(
            fit_stark_slope(&[(1.0, 3.0, 0.1), (1.0, 4.0, 0.1)]),
            Err(Error::SingularDesign(_))
        ));
    }

    #[test]
    fn fringe_contrast() {
        let phases: Vec<f64> = (0..8).map(|k| k as f64 * PI / 4.0).collect();
        let full: Vec<Point> = phases.iter().map(|&p| (p, 0.5 + 0.5 * (p + 0.7).cos(), 0.0)).collect();
        let f = ramsey_contrast(&full).unwrap();
        assert_abs_diff_eq!(f.contrast, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.phase_offset, 0.7, epsilon = 1e-12);
        let flat: Vec<Point> = phases.iter().map(|&p| (p, 0.5, 0.0)).collect();
        assert_abs_diff_eq!(ramsey_contrast(&flat).unwrap().contrast, 0.0, epsilon = 1e-12);
        let same: Vec<Point> = (0..5).map(|_| (0.3, 0.5, 0.0)).collect();
        assert!(ramsey_contrast(&same).is_err());
    }

    #[test]
    fn periodogram_peak() {
        let w = khz(12.0);
        let data: Vec<Point> = taus(60, 300e-6)
            .into_iter()
            .map(|t| (t, (w * t).sin().powi(2), 0.0))
            .collect();
        let peaks = spectral_peaks(&data, 1);
        assert!((peaks[0] / (2.0 * w) - 1.0).abs() < 0.05);
    }
}
