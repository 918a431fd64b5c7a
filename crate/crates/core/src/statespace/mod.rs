//! Truncated joint state spaces and the sparse forward equations behind the
//! exact master-equation oracle and the optimal Bayes filter.
//!
//! A space is built as the closure of a seed set under a chosen subset of
//! channels. Signal counts are capped per voxel at [`Truncation::n_max`];
//! transitions past the cap are routed into a separate leakage term so the
//! lost probability is always accounted for.

mod cme;
mod filter;

pub use cme::{cme_transient_oracle, CmeOutput};
pub use filter::{bayes_filter_optimal, FilterMode, OptimalFilter, OptimalFilterOutput};

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{SimError, StateSpaceError};
use crate::model::{Channel, SystemModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truncation {
    /// Maximum signalling molecules per voxel.
    pub n_max: u32,
    /// Refuse to enumerate more joint states than this.
    pub state_limit: usize,
    /// Largest acceptable probability mass lost past the cap.
    pub leak_tol: f64,
}

impl Default for Truncation {
    fn default() -> Self {
        Self {
            n_max: 100,
            state_limit: 10_000_000,
            leak_tol: 1e-6,
        }
    }
}

/// Enumerated set of joint states with a reverse index.
#[derive(Clone, Debug, Default)]
pub(crate) struct StateSet {
    stride: usize,
    data: Vec<u32>,
    index: FxHashMap<Box<[u32]>, u32>,
}

impl StateSet {
    pub(crate) fn new(stride: usize) -> Self {
        Self {
            stride,
            data: Vec::new(),
            index: FxHashMap::default(),
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.index.len()
    }

    pub(crate) fn state(&self, i: usize) -> &[u32] {
        &self.data[i * self.stride..(i + 1) * self.stride]
    }

    pub(crate) fn find(&self, s: &[u32]) -> Option<usize> {
        self.index.get(s).map(|&i| i as usize)
    }

    /// Inserts `s`, returning its index and whether it was new.
    pub(crate) fn insert(&mut self, s: &[u32]) -> (usize, bool) {
        if let Some(&i) = self.index.get(s) {
            return (i as usize, false);
        }
        let i = self.len();
        self.data.extend_from_slice(s);
        self.index.insert(s.into(), i as u32);
        (i, true)
    }
}

/// Sparse forward operator `dρ/dt = Q ρ` stored by target row, plus the rate
/// at which each state leaks past the truncation.
#[derive(Clone, Debug, Default)]
pub(crate) struct Generator {
    row_ptr: Vec<u32>,
    col: Vec<u32>,
    val: Vec<f64>,
    diag: Vec<f64>,
    leak: Vec<f64>,
}

impl Generator {
    pub(crate) fn dim(&self) -> usize {
        self.diag.len()
    }

    /// `out = Q ρ`; returns the leakage rate `Σ leak_i ρ_i`.
    pub(crate) fn apply(&self, rho: &[f64], out: &mut [f64]) -> f64 {
        let mut leak = 0.0;
        for i in 0..self.diag.len() {
            let mut acc = self.diag[i] * rho[i];
            for e in self.row_ptr[i] as usize..self.row_ptr[i + 1] as usize {
                acc += self.val[e] * rho[self.col[e] as usize];
            }
            out[i] = acc;
            leak += self.leak[i] * rho[i];
        }
        leak
    }
}

/// Role of each channel when building a generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Role {
    /// Moves mass between states.
    Hidden,
    /// Removes mass at its propensity (survival weighting).
    Killing,
    /// Ignored entirely.
    Skip,
}

/// True if every signal coordinate of `s` respects the cap.
pub(crate) fn within_cap(s: &[u32], n_signal: usize, n_max: u32) -> bool {
    s[..n_signal].iter().all(|&c| c <= n_max)
}

/// Applies `delta`, returning `None` if any count would go negative.
pub(crate) fn shifted(s: &[u32], delta: &[(usize, i32)], out: &mut Vec<u32>) -> bool {
    out.clear();
    out.extend_from_slice(s);
    for &(c, d) in delta {
        let v = out[c] as i64 + d as i64;
        if v < 0 {
            return false;
        }
        out[c] = v as u32;
    }
    true
}

/// Closure of `seeds` under the hidden channels that are active at `t`.
pub(crate) fn closure<'a>(
    seeds: impl IntoIterator<Item = &'a [u32]>,
    stride: usize,
    channels: &[Channel],
    roles: &[Role],
    t: f64,
    n_signal: usize,
    trunc: &Truncation,
) -> Result<StateSet, StateSpaceError> {
    let mut set = StateSet::new(stride);
    for s in seeds {
        set.insert(s);
    }
    let mut next = Vec::with_capacity(stride);
    let mut frontier = 0usize;
    while frontier < set.len() {
        let s: Vec<u32> = set.state(frontier).to_vec();
        frontier += 1;
        for (c, ch) in channels.iter().enumerate() {
            if roles[c] != Role::Hidden || !ch.is_active(t) || ch.propensity(&s) <= 0.0 {
                continue;
            }
            if !shifted(&s, &ch.delta, &mut next) || !within_cap(&next, n_signal, trunc.n_max) {
                continue;
            }
            set.insert(&next);
            if set.len() > trunc.state_limit {
                return Err(StateSpaceError::TooLarge {
                    limit: trunc.state_limit,
                });
            }
        }
    }
    Ok(set)
}

/// Builds the forward operator on a closed set.
pub(crate) fn build_generator(
    set: &StateSet,
    channels: &[Channel],
    roles: &[Role],
    t: f64,
    n_signal: usize,
    n_max: u32,
) -> Generator {
    let n = set.len();
    let mut diag = vec![0.0; n];
    let mut leak = vec![0.0; n];
    let mut triplets: Vec<(u32, u32, f64)> = Vec::new();
    let mut next = Vec::with_capacity(set.stride);
    for i in 0..n {
        let s = set.state(i);
        for (c, ch) in channels.iter().enumerate() {
            if roles[c] == Role::Skip || !ch.is_active(t) {
                continue;
            }
            let a = ch.propensity(s);
            if a <= 0.0 {
                continue;
            }
            diag[i] -= a;
            if roles[c] == Role::Killing {
                continue;
            }
            if !shifted(s, &ch.delta, &mut next) {
                continue;
            }
            if !within_cap(&next, n_signal, n_max) {
                leak[i] += a;
                continue;
            }
            match set.find(&next) {
                Some(j) => triplets.push((j as u32, i as u32, a)),
                // Closed sets contain every in-cap successor; anything else is lost mass.
                None => leak[i] += a,
            }
        }
    }
    triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
    let mut row_ptr = vec![0u32; n + 1];
    for &(r, _, _) in &triplets {
        row_ptr[r as usize + 1] += 1;
    }
    for i in 0..n {
        row_ptr[i + 1] += row_ptr[i];
    }
    Generator {
        row_ptr,
        col: triplets.iter().map(|t| t.1).collect(),
        val: triplets.iter().map(|t| t.2).collect(),
        diag,
        leak,
    }
}

/// Breakpoints of symbol `k`: every burst time and emission-window edge,
/// with the bursts that fire there.
pub(crate) fn breakpoints(model: &SystemModel, k: usize) -> Result<Vec<(f64, Vec<(usize, u32)>)>, SimError> {
    let sym = model.symbol(k)?;
    let mut times: Vec<f64> = sym.bursts.iter().map(|b| b.time).collect();
    for c in &sym.channels {
        if let Some((s, e)) = c.window {
            times.extend([s, e].into_iter().filter(|t| t.is_finite() && *t > 0.0));
        }
    }
    times.sort_by(f64::total_cmp);
    times.dedup();
    Ok(times
        .into_iter()
        .map(|t| {
            let b = sym
                .bursts
                .iter()
                .filter(|b| b.time == t)
                .map(|b| (b.coord, b.count))
                .collect();
            (t, b)
        })
        .collect())
}

/// Mean of `f(state)` under the (not necessarily normalized) weights `rho`.
pub(crate) fn expectation(set: &StateSet, rho: &[f64], f: impl Fn(&[u32]) -> f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &r) in rho.iter().enumerate() {
        if r != 0.0 {
            num += r * f(set.state(i));
            den += r;
        }
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// The single channel that increments receiver `p`'s output species.
pub(crate) fn activation_channel(model: &SystemModel, p: usize) -> Result<&Channel, StateSpaceError> {
    let mut found = model.channels().iter().filter(
        |c| matches!(c.kind, crate::model::ChannelKind::Activation { receiver } if receiver == p),
    );
    let first = found.next().ok_or_else(|| {
        StateSpaceError::Unsupported(format!("receiver {p} has no output-incrementing channel"))
    })?;
    if found.next().is_some() {
        return Err(StateSpaceError::Unsupported(format!(
            "receiver {p} has more than one output-incrementing channel"
        )));
    }
    Ok(first)
}

/// Product of the reactant counts of receiver `p`'s activation channel,
/// e.g. `X_p · N_{R,p}` for the activation–deactivation circuit.
pub(crate) fn activation_reactants(model: &SystemModel, p: usize) -> Result<Vec<usize>, StateSpaceError> {
    Ok(activation_channel(model, p)?.reactants.clone())
}

#[cfg(test)]
mod tests;
