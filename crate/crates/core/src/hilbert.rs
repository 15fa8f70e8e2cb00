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

//! Composite state space of two-level ions and truncated harmonic modes.
//!
//! Basis ordering is fixed: the internal string is the major index (ion 0
//! most significant, `S = 0`, `D = 1`), followed by the mode occupations in
//! `mode_list` order with the last mode varying fastest. For one ion and one
//! mode with `n_max = 3` the order is `S0 S1 S2 S3 D0 D1 D2 D3`.

use std::fmt::Write as _;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default cap on the total Hilbert space dimension.
pub const DEFAULT_DIMENSION_CAP: usize = 100_000;

/// Internal level of one ion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    S,
    D,
}

impl Level {
    pub fn flipped(self) -> Level {
        match self {
            Level::S => Level::D,
            Level::D => Level::S,
        }
    }

    fn bit(self) -> usize {
        match self {
            Level::S => 0,
            Level::D => 1,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Level::S => 'S',
            Level::D => 'D',
        }
    }
}

/// Parse an internal-state string such as `"SDS"`.
pub fn parse_levels(s: &str) -> Result<Vec<Level>> {
    s.chars()
        .map(|c| match c {
            'S' | 's' => Ok(Level::S),
            'D' | 'd' => Ok(Level::D),
            other => Err(Error::InvalidParameter(format!(
                "internal state '{s}' contains '{other}', expected S or D"
            ))),
        })
        .collect()
}

/// One truncated mode of the space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ModeSlot {
    /// Index into the [`crate::modes::ModeSet`].
    pub mode: usize,
    pub n_max: usize,
}

/// Description of the composite space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SpaceSpec {
    pub ion_count: usize,
    pub modes: Vec<ModeSlot>,
    dimension: usize,
}

impl SpaceSpec {
    pub fn new(ion_count: usize, modes: Vec<ModeSlot>) -> Result<Self> {
        Self::with_cap(ion_count, modes, DEFAULT_DIMENSION_CAP)
    }

    pub fn with_cap(ion_count: usize, modes: Vec<ModeSlot>, cap: usize) -> Result<Self> {
        if ion_count == 0 || ion_count > 20 {
            return Err(Error::InvalidParameter(format!(
                "ion_count must be in 1..=20, got {ion_count}"
            )));
        }
        let mut dimension: usize = 1 << ion_count;
        for slot in &modes {
            if slot.n_max == 0 {
                return Err(Error::InvalidParameter(format!("mode {} needs n_max >= 1", slot.mode)));
            }
            dimension = dimension.checked_mul(slot.n_max + 1).ok_or(Error::DimensionTooLarge {
                dimension: usize::MAX,
                cap,
            })?;
        }
        if dimension > cap {
            return Err(Error::DimensionTooLarge { dimension, cap });
        }
        let mut seen = modes.iter().map(|s| s.mode).collect::<Vec<_>>();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidParameter("mode listed twice".into()));
        }
        Ok(SpaceSpec {
            ion_count,
            modes,
            dimension,
        })
    }

    /// One ion and a single mode (mode 0).
    pub fn single_ion(n_max: usize) -> Result<Self> {
        Self::new(1, vec![ModeSlot { mode: 0, n_max }])
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Number of motional basis states per internal configuration.
    pub fn motional_dimension(&self) -> usize {
        self.dimension >> self.ion_count
    }

    /// Position of `mode` inside the mode list.
    pub fn slot_of(&self, mode: usize) -> Option<usize> {
        self.modes.iter().position(|s| s.mode == mode)
    }

    /// Internal bit pattern of index `i`; bit `ion_count-1-j` is ion `j`.
    pub fn internal_bits(&self, index: usize) -> usize {
        index / self.motional_dimension()
    }

    /// True if ion `j` is in D at basis index `index`.
    pub fn is_excited(&self, index: usize, ion: usize) -> bool {
        (self.internal_bits(index) >> (self.ion_count - 1 - ion)) & 1 == 1
    }

    /// Number of ions in D at basis index `index`.
    pub fn excitation_count(&self, index: usize) -> usize {
        self.internal_bits(index).count_ones() as usize
    }

    /// Occupation of mode slot `slot` at basis index `index`.
    pub fn occupation(&self, index: usize, slot: usize) -> usize {
        let mut stride = 1;
        for s in self.modes[slot + 1..].iter() {
            stride *= s.n_max + 1;
        }
        (index / stride) % (self.modes[slot].n_max + 1)
    }

    /// Occupations of all slots.
    pub fn occupations(&self, index: usize) -> Vec<usize> {
        let mut rem = index % self.motional_dimension();
        let mut occ = vec![0; self.modes.len()];
        for (k, slot) in self.modes.iter().enumerate().rev() {
            occ[k] = rem % (slot.n_max + 1);
            rem /= slot.n_max + 1;
        }
        occ
    }

    pub fn levels(&self, index: usize) -> Vec<Level> {
        (0..self.ion_count)
            .map(|j| if self.is_excited(index, j) { Level::D } else { Level::S })
            .collect()
    }

    /// Index of a basis state, checking truncations.
    pub fn index_of(&self, levels: &[Level], phonons: &[usize]) -> Result<usize> {
        if levels.len() != self.ion_count {
            return Err(Error::DimensionMismatch(levels.len(), self.ion_count));
        }
        if phonons.len() != self.modes.len() {
            return Err(Error::DimensionMismatch(phonons.len(), self.modes.len()));
        }
        let internal = levels.iter().fold(0usize, |acc, l| (acc << 1) | l.bit());
        let mut motional = 0usize;
        for (slot, &n) in self.modes.iter().zip(phonons) {
            if n > slot.n_max {
                return Err(Error::OccupationOutOfRange {
                    mode: slot.mode,
                    occupation: n,
                    n_max: slot.n_max,
                });
            }
            motional = motional * (slot.n_max + 1) + n;
        }
        Ok(internal * self.motional_dimension() + motional)
    }

    /// Basis label such as `SD,010`.
    pub fn label(&self, index: usize) -> String {
        let mut s: String = self.levels(index).into_iter().map(Level::as_char).collect();
        if !self.modes.is_empty() {
            s.push(',');
            let wide = self.modes.iter().any(|m| m.n_max > 9);
            for (k, n) in self.occupations(index).into_iter().enumerate() {
                if wide && k > 0 {
                    s.push(':');
                }
                let _ = write!(s, "{n}");
            }
        }
        s
    }
}

/// Pure state over a [`SpaceSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub space: SpaceSpec,
    pub amplitudes: Vec<Complex64>,
}

impl StateVector {
    pub fn from_amplitudes(space: SpaceSpec, amplitudes: Vec<Complex64>) -> Result<Self> {
        if amplitudes.len() != space.dimension() {
            return Err(Error::DimensionMismatch(amplitudes.len(), space.dimension()));
        }
        Ok(StateVector { space, amplitudes })
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn normalize(&mut self) {
        let n = self.norm();
        if n > 0.0 {
            self.amplitudes.iter_mut().for_each(|a| *a /= n);
        }
    }

    /// Probabilities of all basis states.
    pub fn probabilities(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|a| a.norm_sqr()).collect()
    }

    pub fn amplitude(&self, levels: &[Level], phonons: &[usize]) -> Result<Complex64> {
        Ok(self.amplitudes[self.space.index_of(levels, phonons)?])
    }

    pub fn probability(&self, levels: &[Level], phonons: &[usize]) -> Result<f64> {
        Ok(self.amplitude(levels, phonons)?.norm_sqr())
    }

    /// Inner product `<self|other>`.
    pub fn inner(&self, other: &StateVector) -> Result<Complex64> {
        if self.space != other.space {
            return Err(Error::DimensionMismatch(
                self.space.dimension(),
                other.space.dimension(),
            ));
        }
        Ok(self
            .amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| a.conj() * b)
            .sum())
    }

    /// CSV dump: header lines record the space, then `label,re,im` for every
    /// amplitude with modulus above 1e-12.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# ions={}", self.space.ion_count);
        let modes: Vec<String> = self
            .space
            .modes
            .iter()
            .map(|m| format!("{}:{}", m.mode, m.n_max))
            .collect();
        let _ = writeln!(out, "# modes={}", modes.join(";"));
        out.push_str("label,re,im\n");
        for (i, a) in self.amplitudes.iter().enumerate() {
            if a.norm() >= 1e-12 {
                let _ = writeln!(out, "{},{:.15e},{:.15e}", self.space.label(i), a.re, a.im);
            }
        }
        out
    }
}

/// Basis state with amplitude one.
pub fn prepare(space: &SpaceSpec, internal: &str, phonons: &[usize]) -> Result<StateVector> {
    let levels = parse_levels(internal)?;
    prepare_levels(space, &levels, phonons)
}

pub fn prepare_levels(space: &SpaceSpec, levels: &[Level], phonons: &[usize]) -> Result<StateVector> {
    let index = space.index_of(levels, phonons)?;
    let mut amplitudes = vec![Complex64::new(0.0, 0.0); space.dimension()];
    amplitudes[index] = Complex64::new(1.0, 0.0);
    Ok(StateVector {
        space: space.clone(),
        amplitudes,
    })
}

/// Which subsystems survive a marginalization.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Marginal {
    pub ions: Vec<usize>,
    /// Mode slots (positions in the mode list).
    pub slots: Vec<usize>,
}

impl Marginal {
    pub fn all(space: &SpaceSpec) -> Self {
        Marginal {
            ions: (0..space.ion_count).collect(),
            slots: (0..space.modes.len()).collect(),
        }
    }

    pub fn internal(space: &SpaceSpec) -> Self {
        Marginal {
            ions: (0..space.ion_count).collect(),
            slots: Vec::new(),
        }
    }
}

/// Marginal probability table; labels follow the basis label convention
/// restricted to the kept subsystems.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Populations {
    pub labels: Vec<String>,
    pub probabilities: Vec<f64>,
}

impl Populations {
    pub fn get(&self, label: &str) -> f64 {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| self.probabilities[i])
            .unwrap_or(0.0)
    }
}

/// Sum `|amplitude|^2` over the subsystems not selected by `marginal`.
pub fn populations(state: &StateVector, marginal: &Marginal) -> Populations {
    let space = &state.space;
    let kept_sizes: Vec<usize> = marginal.slots.iter().map(|&s| space.modes[s].n_max + 1).collect();
    let motional_size: usize = kept_sizes.iter().product();
    let size = (1usize << marginal.ions.len()) * motional_size;

    let key = |i: usize| -> usize {
        let internal = marginal
            .ions
            .iter()
            .fold(0usize, |acc, &j| (acc << 1) | usize::from(space.is_excited(i, j)));
        let motional = marginal
            .slots
            .iter()
            .zip(&kept_sizes)
            .fold(0usize, |acc, (&s, &d)| acc * d + space.occupation(i, s));
        internal * motional_size + motional
    };

    let mut probabilities = vec![0.0; size];
    for (i, a) in state.amplitudes.iter().enumerate() {
        probabilities[key(i)] += a.norm_sqr();
    }
    let labels = (0..size)
        .map(|k| {
            let internal = k / motional_size;
            let mut s: String = (0..marginal.ions.len())
                .map(|b| {
                    if (internal >> (marginal.ions.len() - 1 - b)) & 1 == 1 {
                        'D'
                    } else {
                        'S'
                    }
                })
                .collect();
            if !kept_sizes.is_empty() {
                s.push(',');
                let mut rem = k % motional_size;
                let mut digits = vec![0; kept_sizes.len()];
                for (pos, d) in kept_sizes.iter().enumerate().rev() {
                    digits[pos] = rem % d;
                    rem /= d;
                }
                for n in digits {
                    let _ = write!(s, "{n}");
                }
            }
            s
        })
        .collect();
    Populations { labels, probabilities }
}

/// `|<target|state>|^2`.
pub fn fidelity(state: &StateVector, target: &StateVector) -> Result<f64> {
    Ok(target.inner(state)?.norm_sqr().min(1.0))
}

/// Result of one projective measurement.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Outcome {
    pub levels: Vec<Level>,
    /// Phonon numbers per mode slot, when the motional state was projected too.
    pub phonons: Option<Vec<usize>>,
}

impl Outcome {
    pub fn label(&self) -> String {
        let mut s: String = self.levels.iter().map(|l| l.as_char()).collect();
        if let Some(p) = &self.phonons {
            s.push(',');
            for n in p {
                let _ = write!(s, "{n}");
            }
        }
        s
    }
}

/// Sample a projective measurement from the Born probabilities. With
/// `project_phonons` the mode occupations are recorded as well.
pub fn measure<R: Rng + ?Sized>(state: &StateVector, rng: &mut R, project_phonons: bool) -> Outcome {
    let total: f64 = state.amplitudes.iter().map(|a| a.norm_sqr()).sum();
    let x: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut chosen = state.amplitudes.len() - 1;
    for (i, a) in state.amplitudes.iter().enumerate() {
        acc += a.norm_sqr();
        if x < acc {
            chosen = i;
            break;
        }
    }
    // never land on a zero-probability tail state through rounding
    while state.amplitudes[chosen].norm_sqr() == 0.0 && chosen > 0 {
        chosen -= 1;
    }
    Outcome {
        levels: state.space.levels(chosen),
        phonons: project_phonons.then(|| state.space.occupations(chosen)),
    }
}
