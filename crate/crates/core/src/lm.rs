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

//! Damped least squares (Levenberg-Marquardt) on weighted residuals.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub(crate) struct LmOptions {
    pub max_iterations: usize,
    pub step_tolerance: f64,
    pub initial_damping: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            max_iterations: 500,
            step_tolerance: 1e-10,
            initial_damping: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LmOutcome {
    pub params: Vec<f64>,
    pub chi2: f64,
    pub iterations: usize,
    pub converged: bool,
    pub message: String,
}

fn chi2(r: &DVector<f64>) -> f64 {
    r.norm_squared()
}

/// Minimise `|r(x)|^2`. `model` returns the residual vector and its
/// Jacobian (rows = residuals, columns = parameters).
pub(crate) fn minimize<F>(model: F, x0: &[f64], opts: LmOptions) -> LmOutcome
where
    F: Fn(&[f64]) -> (DVector<f64>, DMatrix<f64>),
{
    let mut x = x0.to_vec();
    let (mut r, mut j) = model(&x);
    let mut cost = chi2(&r);
    let mut lambda = opts.initial_damping;
    let mut stalls = 0;
    for it in 1..=opts.max_iterations {
        let jt = j.transpose();
        let jtj = &jt * &j;
        let g = &jt * &r;
        let mut accepted = false;
        let mut small_step = false;
        while lambda < 1e20 {
            let mut a = jtj.clone();
            for k in 0..a.nrows() {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-300);
            }
            let Some(step) = a.lu().solve(&(-&g)) else {
                lambda *= 2.0;
                continue;
            };
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let (rt, jtr) = model(&trial);
            let ct = chi2(&rt);
            let xnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            small_step = step.norm() <= opts.step_tolerance * (xnorm + opts.step_tolerance);
            if ct.is_finite() && ct <= cost {
                let improvement = cost - ct;
                x = trial;
                r = rt;
                j = jtr;
                lambda = (lambda * 0.5).max(1e-15);
                if improvement <= 1e-15 * cost.max(1e-300) {
                    stalls += 1;
                } else {
                    stalls = 0;
                }
                cost = ct;
                accepted = true;
                break;
            }
            small_step = false;
            lambda *= 2.0;
        }
        if small_step || stalls >= 3 || cost == 0.0 {
            return LmOutcome {
                params: x,
                chi2: cost,
                iterations: it,
                converged: true,
                message: "converged".into(),
            };
        }
        if !accepted {
            return LmOutcome {
                params: x,
                chi2: cost,
                iterations: it,
                converged: true,
                message: "no further decrease possible".into(),
            };
        }
    }
    LmOutcome {
        params: x,
        chi2: cost,
        iterations: opts.max_iterations,
        converged: false,
        message: format!("iteration cap {} reached", opts.max_iterations),
    }
}
