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

//! Exact propagation of piecewise-constant pulse schedules and the Monte
//! Carlo noise layer.
//!
//! Operators produced by [`crate::hamiltonian`] are block diagonal: a
//! sideband pulse only connects states along one excitation ladder. The
//! [`Propagator`] finds the connected blocks and diagonalises each one, so
//! `exp(-iHt)` is exactly unitary and cheap to re-evaluate for many `t`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::hamiltonian::{build_hamiltonian_with_offset, Operator, PulseEvent, ShiftBudget};
use crate::hilbert::{measure, prepare_levels, Level, SpaceSpec, StateVector};
use crate::modes::ModeSet;
use crate::{Error, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone)]
struct Block {
    indices: Vec<usize>,
    values: Vec<f64>,
    vectors: DMatrix<Complex64>,
}

/// Spectral decomposition of a Hermitian operator, block by block.
#[derive(Debug, Clone)]
pub struct Propagator {
    dim: usize,
    blocks: Vec<Block>,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

impl Propagator {
    pub fn new(op: &Operator) -> Result<Self> {
        let dim = op.dim;
        let mut parent: Vec<usize> = (0..dim).collect();
        for &(r, c, _) in &op.upper {
            let (a, b) = (find(&mut parent, r), find(&mut parent, c));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..dim {
            let root = find(&mut parent, i);
            groups.entry(root).or_default().push(i);
        }
        let mut local = vec![0usize; dim];
        let mut block_of = vec![0usize; dim];
        let mut mats: Vec<DMatrix<Complex64>> = Vec::with_capacity(groups.len());
        let mut index_lists = Vec::with_capacity(groups.len());
        for (b, (_, idx)) in groups.into_iter().enumerate() {
            let mut m = DMatrix::from_element(idx.len(), idx.len(), ZERO);
            for (k, &i) in idx.iter().enumerate() {
                local[i] = k;
                block_of[i] = b;
                m[(k, k)] = Complex64::new(op.diag[i], 0.0);
            }
            mats.push(m);
            index_lists.push(idx);
        }
        for &(r, c, v) in &op.upper {
            let m = &mut mats[block_of[r]];
            m[(local[r], local[c])] += v;
            m[(local[c], local[r])] += v.conj();
        }
        let blocks = mats
            .into_iter()
            .zip(index_lists)
            .map(|(m, indices)| {
                if indices.len() == 1 {
                    Block {
                        values: vec![m[(0, 0)].re],
                        vectors: DMatrix::from_element(1, 1, Complex64::new(1.0, 0.0)),
                        indices,
                    }
                } else {
                    let eig = SymmetricEigen::new(m);
                    Block {
                        values: eig.eigenvalues.iter().copied().collect(),
                        vectors: eig.eigenvectors,
                        indices,
                    }
                }
            })
            .collect();
        Ok(Propagator { dim, blocks })
    }

    /// Largest connected block.
    pub fn max_block(&self) -> usize {
        self.blocks.iter().map(|b| b.indices.len()).max().unwrap_or(0)
    }

    /// Eigenvalues of all blocks, unsorted.
    pub fn eigenvalues(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.values.iter().copied()).collect()
    }

    /// Block unitaries of `exp(-iHt)`.
    pub fn at(&self, t: f64) -> Unitary {
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let phases = DVector::from_iterator(
                    b.values.len(),
                    b.values.iter().map(|l| Complex64::from_polar(1.0, -l * t)),
                );
                let mut scaled = b.vectors.clone();
                for (k, mut col) in scaled.column_iter_mut().enumerate() {
                    col *= phases[k];
                }
                (b.indices.clone(), &scaled * b.vectors.adjoint())
            })
            .collect();
        Unitary { dim: self.dim, blocks }
    }

    /// `exp(-iHt) psi` in place.
    pub fn apply(&self, psi: &mut [Complex64], t: f64) {
        for b in &self.blocks {
            if b.indices.len() == 1 {
                psi[b.indices[0]] *= Complex64::from_polar(1.0, -b.values[0] * t);
                continue;
            }
            let x = DVector::from_iterator(b.indices.len(), b.indices.iter().map(|&i| psi[i]));
            let mut y = b.vectors.adjoint() * x;
            for (k, l) in b.values.iter().enumerate() {
                y[k] *= Complex64::from_polar(1.0, -l * t);
            }
            let z = &b.vectors * y;
            for (k, &i) in b.indices.iter().enumerate() {
                psi[i] = z[k];
            }
        }
    }
}

/// A block-diagonal unitary for a fixed duration.
#[derive(Debug, Clone)]
pub struct Unitary {
    dim: usize,
    blocks: Vec<(Vec<usize>, DMatrix<Complex64>)>,
}

impl Unitary {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn apply(&self, psi: &mut [Complex64]) {
        for (idx, u) in &self.blocks {
            if idx.len() == 1 {
                psi[idx[0]] *= u[(0, 0)];
                continue;
            }
            let x = DVector::from_iterator(idx.len(), idx.iter().map(|&i| psi[i]));
            let y = u * x;
            for (k, &i) in idx.iter().enumerate() {
                psi[i] = y[k];
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<Complex64> {
        let mut m = DMatrix::from_element(self.dim, self.dim, ZERO);
        for (idx, u) in &self.blocks {
            for (a, &i) in idx.iter().enumerate() {
                for (b, &j) in idx.iter().enumerate() {
                    m[(i, j)] = u[(a, b)];
                }
            }
        }
        m
    }
}

fn check_duration(t: f64) -> Result<()> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::InvalidParameter(format!("duration must be >= 0, got {t}")));
    }
    Ok(())
}

/// `exp(-i H t) state`.
pub fn propagate(h: &Operator, state: &StateVector, duration: f64) -> Result<StateVector> {
    check_duration(duration)?;
    if h.dim != state.amplitudes.len() {
        return Err(Error::DimensionMismatch(h.dim, state.amplitudes.len()));
    }
    let mut out = state.clone();
    if duration > 0.0 {
        Propagator::new(h)?.apply(&mut out.amplitudes, duration);
    }
    Ok(out)
}

/// [`propagate`] for a dense matrix; rejects non-Hermitian input.
pub fn propagate_dense(h: &DMatrix<Complex64>, state: &StateVector, duration: f64) -> Result<StateVector> {
    propagate(&Operator::from_dense(h)?, state, duration)
}

/// One element of a pulse schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Element {
    Pulse(PulseEvent),
    /// Pulse without the light-shift budget, e.g. a resonant readout flop.
    Probe(PulseEvent),
    /// Free evolution, s.
    Delay(f64),
    /// Resonant carrier pi pulse with the given phase.
    EchoPi {
        phase: f64,
    },
    /// Marker without dynamics.
    Barrier(String),
}

/// An ordered pulse schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub elements: Vec<Element>,
    /// Carrier Rabi frequency used for `EchoPi`, rad/s.
    pub echo_rabi: f64,
}

impl SequenceSpec {
    pub fn new(elements: Vec<Element>, echo_rabi: f64) -> Self {
        SequenceSpec { elements, echo_rabi }
    }

    pub fn element_duration(&self, e: &Element) -> f64 {
        match e {
            Element::Pulse(p) | Element::Probe(p) => p.duration,
            Element::Delay(t) => *t,
            Element::EchoPi { .. } => PI / self.echo_rabi,
            Element::Barrier(_) => 0.0,
        }
    }

    pub fn total_duration(&self) -> f64 {
        self.elements.iter().map(|e| self.element_duration(e)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.elements {
            match e {
                Element::Pulse(p) | Element::Probe(p) => p.validate()?,
                Element::Delay(t) => check_duration(*t)?,
                Element::EchoPi { phase } => {
                    if !(self.echo_rabi > 0.0 && self.echo_rabi.is_finite()) || !phase.is_finite() {
                        return Err(Error::InvalidParameter(
                            "echo pulse needs a positive carrier Rabi frequency".into(),
                        ));
                    }
                }
                Element::Barrier(_) => {}
            }
        }
        if !self.total_duration().is_finite() {
            return Err(Error::InvalidParameter("sequence duration is not finite".into()));
        }
        Ok(())
    }
}

/// What a failed preparation produces instead of the requested state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PrepErrorModel {
    /// Weighted mixture of one phonon too few (one too many for n=0), the
    /// wrong internal state, or both. Weights are normalised on use.
    Mixture { lower_n: f64, flip: f64, lower_n_flip: f64 },
    /// Failure of the last step of the usual preparation ladder
    /// (cooling, blue-sideband pi, carrier pi): `|S,n>` and `|D,n>` with
    /// n >= 1 fall back to the opposite level with n-1, `|S,0>` becomes
    /// `|S,1>` and `|D,0>` stays in `|S,0>`.
    Ladder,
}

impl Default for PrepErrorModel {
    fn default() -> Self {
        PrepErrorModel::Mixture {
            lower_n: 0.5,
            flip: 0.5,
            lower_n_flip: 0.0,
        }
    }
}

/// Error budget applied per shot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Standard deviation of the quasi-static qubit detuning, rad/s.
    pub detuning_sigma: f64,
    /// Success probability of preparing Fock state n (missing keys mean 1).
    pub prep_fidelity: BTreeMap<usize, f64>,
    pub prep_error: PrepErrorModel,
    /// Ramsey contrast loss the dephasing was calibrated to (bookkeeping).
    pub ramsey_contrast_loss: f64,
    pub dephasing_enabled: bool,
    pub prep_enabled: bool,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            detuning_sigma: 0.0,
            prep_fidelity: BTreeMap::new(),
            prep_error: PrepErrorModel::default(),
            ramsey_contrast_loss: 0.0,
            dephasing_enabled: false,
            prep_enabled: false,
        }
    }
}

/// Quasi-static Gaussian detuning that reduces the Ramsey contrast after a
/// free evolution time `delay` by the fraction `loss`:
/// `exp(-sigma^2 delay^2 / 2) = 1 - loss`.
pub fn calibrate_sigma(loss: f64, delay: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&loss) || !(delay > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "need 0 <= loss < 1 and delay > 0 (got {loss}, {delay})"
        )));
    }
    Ok((-2.0 * (1.0 - loss).ln()).sqrt() / delay)
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.detuning_sigma >= 0.0 && self.detuning_sigma.is_finite()) {
            return Err(Error::InvalidParameter("detuning_sigma must be >= 0".into()));
        }
        if self.prep_fidelity.values().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidParameter("prep fidelities must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.ramsey_contrast_loss) {
            return Err(Error::InvalidParameter(
                "ramsey_contrast_loss must lie in [0, 1]".into(),
            ));
        }
        if let PrepErrorModel::Mixture {
            lower_n,
            flip,
            lower_n_flip,
        } = self.prep_error
        {
            let w = [lower_n, flip, lower_n_flip];
            if w.iter().any(|x| !(*x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::InvalidParameter(
                    "prep mixture weights must be >= 0 and not all zero".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn sample_offset<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if !self.dephasing_enabled || self.detuning_sigma == 0.0 {
            return 0.0;
        }
        Normal::new(0.0, self.detuning_sigma)
            .expect("validated sigma")
            .sample(rng)
    }

    /// Sample the actually prepared basis state for a requested one. The
    /// error acts on the first mode slot and on every ion's level.
    pub fn sample_preparation<R: Rng + ?Sized>(&self, prep: &Preparation, rng: &mut R) -> Preparation {
        if !self.prep_enabled {
            return prep.clone();
        }
        let n = prep.phonons.first().copied().unwrap_or(0);
        let f = self.prep_fidelity.get(&n).copied().unwrap_or(1.0);
        if rng.random::<f64>() < f {
            return prep.clone();
        }
        let mut out = prep.clone();
        let flip = |levels: &mut Vec<Level>| levels.iter_mut().for_each(|l| *l = l.flipped());
        let shift = |ph: &mut Vec<usize>| {
            if let Some(first) = ph.first_mut() {
                *first = if *first == 0 { 1 } else { *first - 1 };
            }
        };
        match self.prep_error {
            PrepErrorModel::Mixture {
                lower_n,
                flip: w_flip,
                lower_n_flip,
            } => {
                let u = rng.random::<f64>() * (lower_n + w_flip + lower_n_flip);
                if u < lower_n {
                    shift(&mut out.phonons);
                } else if u < lower_n + w_flip {
                    flip(&mut out.levels);
                } else {
                    shift(&mut out.phonons);
                    flip(&mut out.levels);
                }
            }
            PrepErrorModel::Ladder => {
                if n >= 1 {
                    shift(&mut out.phonons);
                    flip(&mut out.levels);
                } else if out.levels.iter().all(|l| *l == Level::S) {
                    shift(&mut out.phonons);
                } else {
                    out.levels.iter_mut().for_each(|l| *l = Level::S);
                }
            }
        }
        out
    }
}

/// A requested basis-state preparation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preparation {
    pub levels: Vec<Level>,
    pub phonons: Vec<usize>,
}

impl Preparation {
    pub fn new(levels: &str, phonons: &[usize]) -> Result<Self> {
        Ok(Preparation {
            levels: crate::hilbert::parse_levels(levels)?,
            phonons: phonons.to_vec(),
        })
    }

    pub fn state(&self, space: &SpaceSpec) -> Result<StateVector> {
        prepare_levels(space, &self.levels, &self.phonons)
    }
}

#[derive(Debug, Clone)]
struct Step {
    unitary: Unitary,
    frame_phase: Option<Vec<Complex64>>,
    ladder_edges: Vec<usize>,
    label: String,
}

/// A schedule turned into per-element unitaries for one qubit offset.
#[derive(Debug, Clone)]
pub struct CompiledSequence {
    steps: Vec<Step>,
    dim: usize,
}

/// Diagnostics gathered while running a schedule.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub warnings: Vec<String>,
    /// Largest population found on truncation-edge states while a
    /// sideband pulse was active.
    pub edge_population: f64,
    /// Largest deviation of the norm from 1 after any element.
    pub norm_error: f64,
}

const EDGE_WARNING: f64 = 1e-3;

impl CompiledSequence {
    pub fn new(
        space: &SpaceSpec,
        modes: &ModeSet,
        seq: &SequenceSpec,
        budget: &ShiftBudget,
        qubit_offset: f64,
    ) -> Result<Self> {
        seq.validate()?;
        let dim = space.dimension();
        let mut steps = Vec::new();
        for (k, e) in seq.elements.iter().enumerate() {
            let none = ShiftBudget::default();
            let (pulse, label, budget) = match e {
                Element::Barrier(_) => continue,
                Element::Pulse(p) => (*p, format!("#{k} {:?}", p.coupling), budget),
                Element::Probe(p) => (*p, format!("#{k} probe {:?}", p.coupling), &none),
                Element::EchoPi { phase } => (
                    PulseEvent::carrier(seq.echo_rabi, *phase, PI / seq.echo_rabi),
                    format!("#{k} echo"),
                    budget,
                ),
                Element::Delay(t) => {
                    let mut op = Operator::zeros(dim);
                    for (i, d) in op.diag.iter_mut().enumerate() {
                        *d = qubit_offset * space.excitation_count(i) as f64;
                    }
                    steps.push(Step {
                        unitary: Propagator::new(&op)?.at(*t),
                        frame_phase: None,
                        ladder_edges: Vec::new(),
                        label: format!("#{k} delay"),
                    });
                    continue;
                }
            };
            let h = build_hamiltonian_with_offset(space, modes, &pulse, budget, qubit_offset)?;
            let t = pulse.duration;
            let frame_phase = if h.frame.iter().all(|f| *f == 0.0) {
                None
            } else {
                Some(h.frame.iter().map(|f| Complex64::from_polar(1.0, f * t)).collect())
            };
            steps.push(Step {
                unitary: Propagator::new(&h.operator)?.at(t),
                frame_phase,
                ladder_edges: h.ladder_edges,
                label,
            });
        }
        Ok(CompiledSequence { steps, dim })
    }

    pub fn run(&self, initial: &StateVector) -> Result<(StateVector, RunReport)> {
        if initial.amplitudes.len() != self.dim {
            return Err(Error::DimensionMismatch(self.dim, initial.amplitudes.len()));
        }
        let mut state = initial.clone();
        let mut report = RunReport::default();
        for step in &self.steps {
            let edge_before: f64 = step.ladder_edges.iter().map(|&i| state.amplitudes[i].norm_sqr()).sum();
            step.unitary.apply(&mut state.amplitudes);
            if let Some(ph) = &step.frame_phase {
                state.amplitudes.iter_mut().zip(ph).for_each(|(a, p)| *a *= p);
            }
            let edge_after: f64 = step.ladder_edges.iter().map(|&i| state.amplitudes[i].norm_sqr()).sum();
            let edge = edge_before.max(edge_after);
            report.edge_population = report.edge_population.max(edge);
            if edge > EDGE_WARNING {
                report.warnings.push(format!(
                    "{}: population {:.3e} on truncation-edge states; raise n_max",
                    step.label, edge
                ));
            }
            report.norm_error = report.norm_error.max((state.norm() - 1.0).abs());
        }
        Ok((state, report))
    }
}

/// Run a schedule with a fixed quasi-static qubit offset (rad/s).
pub fn run_sequence_with_offset(
    space: &SpaceSpec,
    modes: &ModeSet,
    seq: &SequenceSpec,
    initial: &StateVector,
    budget: &ShiftBudget,
    qubit_offset: f64,
) -> Result<(StateVector, RunReport)> {
    CompiledSequence::new(space, modes, seq, budget, qubit_offset)?.run(initial)
}

/// Run a schedule. With a noise model and an RNG one quasi-static offset is
/// drawn and applied to every element; without, the run is deterministic.
/// Preparation errors are drawn by [`monte_carlo`], which owns the
/// preparation recipe.
pub fn run_sequence<R: Rng + ?Sized>(
    space: &SpaceSpec,
    modes: &ModeSet,
    seq: &SequenceSpec,
    initial: &StateVector,
    budget: &ShiftBudget,
    noise: Option<&NoiseModel>,
    rng: Option<&mut R>,
) -> Result<StateVector> {
    let offset = match (noise, rng) {
        (Some(n), Some(r)) => {
            n.validate()?;
            n.sample_offset(r)
        }
        _ => 0.0,
    };
    Ok(run_sequence_with_offset(space, modes, seq, initial, budget, offset)?.0)
}

/// RNG stream of shot `index` under `seed`.
pub fn shot_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Readout options for [`monte_carlo`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Readout {
    /// Also project the phonon numbers (simulator-only readout).
    pub project_phonons: bool,
}

/// Result of one Monte Carlo shot.
#[derive(Debug, Clone, PartialEq)]
pub struct Shot {
    pub outcome: String,
    pub prepared: Preparation,
    pub offset: f64,
    pub leakage: f64,
    pub edge_population: f64,
}

/// Empirical outcome statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McStats {
    pub shots: usize,
    pub seed: u64,
    pub counts: BTreeMap<String, usize>,
    /// Mean population outside occupations {0, 1} of every mode.
    pub mean_leakage: f64,
    pub max_edge_population: f64,
    pub prep_errors: usize,
    pub total_duration: f64,
    pub warnings: Vec<String>,
}

impl McStats {
    pub fn frequency(&self, outcome: &str) -> f64 {
        *self.counts.get(outcome).unwrap_or(&0) as f64 / self.shots as f64
    }

    pub fn stderr(&self, outcome: &str) -> f64 {
        let p = self.frequency(outcome);
        (p * (1.0 - p) / self.shots as f64).sqrt()
    }

    /// `outcome,count,frequency,stderr`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("outcome,count,frequency,stderr\n");
        for (k, c) in &self.counts {
            s.push_str(&format!("{},{},{:.6},{:.6}\n", k, c, self.frequency(k), self.stderr(k)));
        }
        s
    }
}

/// Population outside the computational subspace (any mode with n >= 2).
pub fn leakage(state: &StateVector) -> f64 {
    let space = &state.space;
    state
        .amplitudes
        .iter()
        .enumerate()
        .filter(|(i, _)| space.occupations(*i).iter().any(|n| *n >= 2))
        .map(|(_, a)| a.norm_sqr())
        .sum()
}

/// Thread pool with `threads` workers (0 means rayon's default).
pub fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))
}

/// Independent shots of `seq`, each with its own preparation error,
/// quasi-static offset and projective measurement. Shot `k` draws from
/// stream `k` of `seed`, so results do not depend on `threads`.
#[allow(clippy::too_many_arguments)]
pub fn monte_carlo(
    space: &SpaceSpec,
    modes: &ModeSet,
    seq: &SequenceSpec,
    prep: &Preparation,
    budget: &ShiftBudget,
    noise: Option<&NoiseModel>,
    shots: usize,
    seed: u64,
    threads: usize,
    readout: Readout,
) -> Result<McStats> {
    let results = run_shots(space, modes, seq, prep, budget, noise, shots, seed, threads, readout)?;
    let mut counts = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut stats = McStats {
        shots,
        seed,
        counts: BTreeMap::new(),
        mean_leakage: 0.0,
        max_edge_population: 0.0,
        prep_errors: 0,
        total_duration: seq.total_duration(),
        warnings: Vec::new(),
    };
    for s in &results {
        *counts.entry(s.outcome.clone()).or_insert(0) += 1;
        stats.mean_leakage += s.leakage / shots as f64;
        stats.max_edge_population = stats.max_edge_population.max(s.edge_population);
        if s.prepared != *prep {
            stats.prep_errors += 1;
        }
    }
    if stats.max_edge_population > EDGE_WARNING {
        warnings.push(format!(
            "population up to {:.3e} reached truncation-edge states",
            stats.max_edge_population
        ));
    }
    stats.counts = counts;
    stats.warnings = warnings;
    Ok(stats)
}

/// The individual shots behind [`monte_carlo`], in shot order.
#[allow(clippy::too_many_arguments)]
pub fn run_shots(
    space: &SpaceSpec,
    modes: &ModeSet,
    seq: &SequenceSpec,
    prep: &Preparation,
    budget: &ShiftBudget,
    noise: Option<&NoiseModel>,
    shots: usize,
    seed: u64,
    threads: usize,
    readout: Readout,
) -> Result<Vec<Shot>> {
    if shots == 0 {
        return Err(Error::InvalidParameter("shots must be >= 1".into()));
    }
    if let Some(n) = noise {
        n.validate()?;
    }
    prep.state(space)?;
    let dephasing = noise.is_some_and(|n| n.dephasing_enabled && n.detuning_sigma > 0.0);
    let shared = if dephasing {
        None
    } else {
        Some(CompiledSequence::new(space, modes, seq, budget, 0.0)?)
    };
    let one = |k: usize| -> Result<Shot> {
        let mut rng = shot_rng(seed, k as u64);
        let prepared = match noise {
            Some(n) => n.sample_preparation(prep, &mut rng),
            None => prep.clone(),
        };
        let offset = noise.map_or(0.0, |n| n.sample_offset(&mut rng));
        let initial = prepared.state(space)?;
        let (state, report) = match &shared {
            Some(c) => c.run(&initial)?,
            None => CompiledSequence::new(space, modes, seq, budget, offset)?.run(&initial)?,
        };
        let outcome = measure(&state, &mut rng, readout.project_phonons);
        Ok(Shot {
            outcome: outcome.label(),
            leakage: leakage(&state),
            edge_population: report.edge_population,
            prepared,
            offset,
        })
    };
    thread_pool(threads)?.install(|| (0..shots).into_par_iter().map(one).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::{build_hamiltonian, Coupling};
    use crate::hilbert::{fidelity, prepare, ModeSlot};
    use crate::modes::{normal_modes, IonCrystal};
    use crate::units::{khz, us};
    use approx::assert_abs_diff_eq;

    fn one_ion() -> (SpaceSpec, ModeSet) {
        let m = normal_modes(&IonCrystal::new(1, khz(1712.0), 0.068).unwrap()).unwrap();
        (SpaceSpec::single_ion(3).unwrap(), m)
    }

    fn p_d(s: &StateVector) -> f64 {
        (0..s.amplitudes.len())
            .filter(|&i| s.space.is_excited(i, 0))
            .map(|i| s.amplitudes[i].norm_sqr())
            .sum()
    }

    #[test]
    fn resonant_carrier_rabi() {
        let (sp, m) = one_ion();
        let om = khz(50.0);
        let h = build_hamiltonian(&sp, &m, &PulseEvent::carrier(om, 0.0, 0.0), &ShiftBudget::default()).unwrap();
        let s0 = prepare(&sp, "S", &[0]).unwrap();
        for k in 0..20 {
            let t = k as f64 * 1.3e-6;
            let s = propagate(&h.operator, &s0, t).unwrap();
            assert_abs_diff_eq!(p_d(&s), (om * t / 2.0).sin().powi(2), epsilon = 1e-12);
            assert!((s.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_duration_is_identity() {
        let (sp, m) = one_ion();
        let h = build_hamiltonian(
            &sp,
            &m,
            &PulseEvent::blue_sideband(0, khz(100.0), khz(10.0), 0.4, 1.0),
            &ShiftBudget::default(),
        )
        .unwrap();
        let s0 = prepare(&sp, "S", &[1]).unwrap();
        assert_eq!(propagate(&h.operator, &s0, 0.0).unwrap(), s0);
        assert!(propagate(&h.operator, &s0, -1.0).is_err());
    }

    #[test]
    fn rejects_non_hermitian_dense_input() {
        let (sp, _) = one_ion();
        let mut h = DMatrix::from_element(8, 8, ZERO);
        h[(0, 1)] = Complex64::new(1.0, 0.0);
        let s0 = prepare(&sp, "S", &[0]).unwrap();
        assert!(matches!(propagate_dense(&h, &s0, 1.0), Err(Error::NotHermitian(_))));
    }

    #[test]
    fn detuned_rabi_oracle() {
        let (sp, m) = one_ion();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s0 = prepare(&sp, "S", &[0]).unwrap();
        for _ in 0..50 {
            let om = khz(rng.random_range(1.0..200.0));
            let det = khz(rng.random_range(-300.0..300.0));
            let t = rng.random_range(0.0..200e-6);
            let p = PulseEvent {
                coupling: Coupling::Carrier,
                rabi_0: om,
                detuning: det,
                phase: 0.0,
                duration: t,
            };
            let h = build_hamiltonian(&sp, &m, &p, &ShiftBudget::default()).unwrap();
            let s = propagate(&h.operator, &s0, t).unwrap();
            let w = (om * om + det * det).sqrt();
            let expect = om * om / (w * w) * (w * t / 2.0).sin().powi(2);
            assert_abs_diff_eq!(p_d(&s), expect, epsilon = 1e-9);
        }
    }

    #[test]
    fn composition() {
        let sp = SpaceSpec::new(2, vec![ModeSlot { mode: 0, n_max: 3 }, ModeSlot { mode: 1, n_max: 2 }]).unwrap();
        let m = normal_modes(&IonCrystal::new(2, khz(1712.0), 0.068).unwrap()).unwrap();
        let p = PulseEvent::blue_sideband(0, khz(300.0), khz(20.0), 0.3, 0.0);
        let h = build_hamiltonian(
            &sp,
            &m,
            &p,
            &ShiftBudget {
                delta_other: 0.0,
                delta_comp: khz(1.0),
            },
        )
        .unwrap();
        let s0 = prepare(&sp, "SS", &[1, 0]).unwrap();
        let (t1, t2) = (37e-6, 81e-6);
        let a = propagate(&h.operator, &s0, t1 + t2).unwrap();
        let b = propagate(&h.operator, &propagate(&h.operator, &s0, t1).unwrap(), t2).unwrap();
        for (x, y) in a.amplitudes.iter().zip(&b.amplitudes) {
            assert!((x - y).norm() < 1e-11);
        }
        assert!((a.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unitary_matches_apply() {
        let (sp, m) = one_ion();
        let p = PulseEvent::blue_sideband(0, khz(200.0), khz(5.0), 1.0, 0.0);
        let h = build_hamiltonian(&sp, &m, &p, &ShiftBudget::default()).unwrap();
        let prop = Propagator::new(&h.operator).unwrap();
        let u = prop.at(33e-6).to_dense();
        let id = &u * u.adjoint();
        for i in 0..8 {
            for j in 0..8 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((id[(i, j)] - Complex64::new(e, 0.0)).norm() < 1e-12);
            }
        }
        assert_eq!(prop.max_block(), 2);
    }

    fn ramsey(om: f64, delay: f64) -> SequenceSpec {
        let t = PI / 2.0 / om;
        SequenceSpec::new(
            vec![
                Element::Pulse(PulseEvent::carrier(om, PI, t)),
                Element::Delay(delay),
                Element::Pulse(PulseEvent::carrier(om, 0.0, t)),
            ],
            om,
        )
    }

    #[test]
    fn ramsey_pair_undoes_itself() {
        let (sp, m) = one_ion();
        let s0 = prepare(&sp, "S", &[0]).unwrap();
        let (s, _) =
            run_sequence_with_offset(&sp, &m, &ramsey(khz(100.0), 0.0), &s0, &ShiftBudget::default(), 0.0).unwrap();
        assert_abs_diff_eq!(fidelity(&s, &s0).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ramsey_fringe_oracle() {
        let (sp, m) = one_ion();
        let s0 = prepare(&sp, "S", &[0]).unwrap();
        let om = khz(1.0e5);
        let delay = us(100.0);
        for k in 0..12 {
            let d = khz(0.43 * k as f64);
            let (s, _) =
                run_sequence_with_offset(&sp, &m, &ramsey(om, delay), &s0, &ShiftBudget::default(), d).unwrap();
            assert_abs_diff_eq!(p_d(&s), (d * delay / 2.0).sin().powi(2), epsilon = 1e-4);
        }
    }

    #[test]
    fn echo_refocuses_static_offset() {
        let (sp, m) = one_ion();
        let s0 = prepare(&sp, "S", &[0]).unwrap();
        let om = khz(1.0e5);
        let t = PI / 2.0 / om;
        let seq = SequenceSpec::new(
            vec![
                Element::Pulse(PulseEvent::carrier(om, PI, t)),
                Element::Delay(1e-3),
                Element::EchoPi { phase: 0.0 },
                Element::Delay(1e-3),
                Element::Pulse(PulseEvent::carrier(om, PI, t)),
            ],
            om,
        );
        let (ref_state, _) = run_sequence_with_offset(&sp, &m, &seq, &s0, &ShiftBudget::default(), 0.0).unwrap();
        for d in [khz(0.1), khz(0.77), khz(-2.3)] {
            let (s, _) = run_sequence_with_offset(&sp, &m, &seq, &s0, &ShiftBudget::default(), d).unwrap();
            assert_abs_diff_eq!(p_d(&s), p_d(&ref_state), epsilon = 1e-4);
        }
        assert_abs_diff_eq!(seq.total_duration(), 2e-3 + 2.0 * PI / om, epsilon = 1e-15);
    }

    #[test]
    fn calibrated_sigma_gives_requested_contrast() {
        let sigma = calibrate_sigma(0.06, us(200.0)).unwrap();
        assert_abs_diff_eq!((-(sigma * us(200.0)).powi(2) / 2.0).exp(), 0.94, epsilon = 1e-14);
        assert!(calibrate_sigma(1.0, 1.0).is_err());
    }

    #[test]
    fn monte_carlo_binomial_and_deterministic() {
        let (sp, m) = one_ion();
        let om = khz(100.0);
        let seq = SequenceSpec::new(vec![Element::Pulse(PulseEvent::carrier(om, PI, PI / 2.0 / om))], om);
        let prep = Preparation::new("S", &[0]).unwrap();
        let run = |threads| {
            monte_carlo(
                &sp,
                &m,
                &seq,
                &prep,
                &ShiftBudget::default(),
                None,
                100,
                42,
                threads,
                Readout::default(),
            )
            .unwrap()
        };
        let a = run(1);
        assert!((a.frequency("D") - 0.5).abs() <= 3.0 * 0.05);
        assert_eq!(a.counts.values().sum::<usize>(), 100);
        for k in [2, 4, 7] {
            assert_eq!(run(k), a);
        }
        assert_eq!(a.to_csv(), run(3).to_csv());
    }

    #[test]
    fn noisy_monte_carlo_is_thread_independent() {
        let (sp, m) = one_ion();
        let seq = ramsey(khz(100.0), us(500.0));
        let prep = Preparation::new("S", &[1]).unwrap();
        let mut noise = NoiseModel {
            detuning_sigma: khz(0.5),
            dephasing_enabled: true,
            prep_enabled: true,
            ..NoiseModel::default()
        };
        noise.prep_fidelity.insert(1, 0.8);
        let run = |threads| {
            monte_carlo(
                &sp,
                &m,
                &seq,
                &prep,
                &ShiftBudget::default(),
                Some(&noise),
                200,
                9,
                threads,
                Readout { project_phonons: true },
            )
            .unwrap()
        };
        let a = run(1);
        assert_eq!(a, run(5));
        assert!(a.prep_errors > 10 && a.prep_errors < 80);
    }

    #[test]
    fn ladder_prep_errors() {
        let noise = NoiseModel {
            prep_enabled: true,
            prep_fidelity: (0..4).map(|n| (n, 0.0)).collect(),
            prep_error: PrepErrorModel::Ladder,
            ..NoiseModel::default()
        };
        let mut rng = shot_rng(1, 0);
        let cases = [
            ("S", 1, "D", 0),
            ("D", 1, "S", 0),
            ("S", 0, "S", 1),
            ("D", 0, "S", 0),
            ("S", 3, "D", 2),
        ];
        for (l, n, l2, n2) in cases {
            let got = noise.sample_preparation(&Preparation::new(l, &[n]).unwrap(), &mut rng);
            assert_eq!(got, Preparation::new(l2, &[n2]).unwrap());
        }
    }

    #[test]
    fn mixture_prep_errors() {
        let noise = NoiseModel {
            prep_enabled: true,
            prep_fidelity: [(1, 0.0)].into_iter().collect(),
            ..NoiseModel::default()
        };
        let prep = Preparation::new("S", &[1]).unwrap();
        let mut lower = 0;
        for k in 0..2000 {
            let got = noise.sample_preparation(&prep, &mut shot_rng(3, k));
            if got == Preparation::new("S", &[0]).unwrap() {
                lower += 1;
            } else {
                assert_eq!(got, Preparation::new("D", &[1]).unwrap());
            }
        }
        assert!((lower as f64 / 2000.0 - 0.5).abs() < 4.0 / 2000f64.sqrt());
    }
}
