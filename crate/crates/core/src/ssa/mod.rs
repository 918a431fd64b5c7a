//! Exact stochastic simulation (Gillespie direct method) of a compiled model.
//!
//! Propensities are cached and refreshed through a channel dependency graph.
//! [`SsaMethod::Direct`] sums and scans the cached array linearly, so it draws
//! exactly the same trajectory as recomputing every propensity each step.
//! [`SsaMethod::SumTree`] selects through a binary sum tree; it is
//! deterministic for a given seed but not bit-compatible with `Direct`.
//!
//! Random numbers: ChaCha8 seeded from the base seed, with the replicate index
//! as the stream id. Each step draws one uniform for the waiting time
//! `τ = -ln(1 - u) / a₀` and, if a channel fires, one uniform for selection.

mod observe;

pub use observe::{
    extract_observations, ChangeCause, EventCause, ObservationRecorder, ObservationStream,
    ObservedEvent, VoxelJump,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::SimError;
use crate::model::{Channel, ChannelKind, SystemModel};

/// Total propensity above which a run is aborted as misconfigured.
pub const PROPENSITY_GUARD: f64 = 1e12;

/// Deterministic per-replicate random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicateSeed {
    pub base: u64,
    pub index: u64,
}

impl ReplicateSeed {
    pub fn new(base: u64, index: u64) -> Self {
        Self { base, index }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.base);
        rng.set_stream(self.index);
        rng
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SsaMethod {
    #[default]
    Direct,
    SumTree,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventSource {
    Channel(u32),
    /// Index into the simulator's schedule points (bursts at one instant).
    Schedule(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEvent {
    pub time: f64,
    pub source: EventSource,
    pub kind: ChannelKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub model_fingerprint: u64,
    pub symbol: usize,
    pub t_end: f64,
    pub seed: ReplicateSeed,
    pub initial: Vec<u32>,
    pub events: Vec<TrajectoryEvent>,
    pub final_state: Vec<u32>,
}

/// Hooks invoked by the simulator. `before_event` sees the state that held
/// on `[previous event, time)`; `after_event` sees the state after the jump.
pub trait Observer {
    fn before_event(&mut self, _time: f64, _counts: &[u32]) {}
    fn after_event(&mut self, _time: f64, _source: EventSource, _counts: &[u32]) {}
    fn finish(&mut self, _t_end: f64, _counts: &[u32]) {}
}

impl Observer for () {}

impl<A: Observer, B: Observer> Observer for (A, B) {
    fn before_event(&mut self, time: f64, counts: &[u32]) {
        self.0.before_event(time, counts);
        self.1.before_event(time, counts);
    }
    fn after_event(&mut self, time: f64, source: EventSource, counts: &[u32]) {
        self.0.after_event(time, source, counts);
        self.1.after_event(time, source, counts);
    }
    fn finish(&mut self, t_end: f64, counts: &[u32]) {
        self.0.finish(t_end, counts);
        self.1.finish(t_end, counts);
    }
}

/// Samples a functional of the state on a uniform grid (right-continuous).
pub struct GridSampler<F: FnMut(&[u32]) -> f64> {
    times: Vec<f64>,
    next: usize,
    f: F,
    pub values: Vec<f64>,
}

impl<F: FnMut(&[u32]) -> f64> GridSampler<F> {
    pub fn new(times: Vec<f64>, f: F) -> Self {
        let n = times.len();
        Self {
            times,
            next: 0,
            f,
            values: Vec::with_capacity(n),
        }
    }

    fn fill_until(&mut self, time: f64, counts: &[u32], inclusive: bool) {
        while self.next < self.times.len()
            && (self.times[self.next] < time || (inclusive && self.times[self.next] <= time))
        {
            let v = (self.f)(counts);
            self.values.push(v);
            self.next += 1;
        }
    }
}

impl<F: FnMut(&[u32]) -> f64> Observer for GridSampler<F> {
    fn before_event(&mut self, time: f64, counts: &[u32]) {
        self.fill_until(time, counts, false);
    }
    fn finish(&mut self, t_end: f64, counts: &[u32]) {
        self.fill_until(t_end, counts, true);
        // Grid points past the horizon hold the final state.
        while self.values.len() < self.times.len() {
            let v = (self.f)(counts);
            self.values.push(v);
            self.next += 1;
        }
    }
}

#[derive(Default)]
struct Recorder {
    events: Vec<(f64, EventSource)>,
}

impl Observer for Recorder {
    fn after_event(&mut self, time: f64, source: EventSource, _counts: &[u32]) {
        self.events.push((time, source));
    }
}

#[derive(Clone, Debug)]
struct SchedulePoint {
    time: f64,
    /// `(coord, count)` injections.
    bursts: Vec<(usize, u32)>,
}

/// Binary sum tree over propensities.
struct SumTree {
    size: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    fn new(n: usize) -> Self {
        let size = n.next_power_of_two().max(1);
        Self {
            size,
            nodes: vec![0.0; 2 * size],
        }
    }

    fn rebuild(&mut self, leaves: &[f64]) {
        self.nodes.iter_mut().for_each(|x| *x = 0.0);
        self.nodes[self.size..self.size + leaves.len()].copy_from_slice(leaves);
        for i in (1..self.size).rev() {
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1];
        }
    }

    fn update(&mut self, leaf: usize, value: f64) {
        let mut i = self.size + leaf;
        self.nodes[i] = value;
        while i > 1 {
            i /= 2;
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1];
        }
    }

    fn total(&self) -> f64 {
        self.nodes[1]
    }

    fn select(&self, mut r: f64) -> usize {
        let mut i = 1;
        while i < self.size {
            let left = self.nodes[2 * i];
            if r < left || self.nodes[2 * i + 1] <= 0.0 {
                i *= 2;
            } else {
                r -= left;
                i = 2 * i + 1;
            }
        }
        i - self.size
    }
}

/// Symbol-specific compiled network, reusable across replicates.
pub struct Simulator<'m> {
    model: &'m SystemModel,
    symbol: usize,
    channels: Vec<Channel>,
    deps: Vec<Vec<u32>>,
    coord_deps: Vec<Vec<u32>>,
    gated: Vec<u32>,
    schedule: Vec<SchedulePoint>,
    method: SsaMethod,
}

impl<'m> Simulator<'m> {
    pub fn new(model: &'m SystemModel, symbol: usize, method: SsaMethod) -> Result<Self, SimError> {
        let channels = model.channels_for(symbol)?;
        let n_coord = model.coord_count();
        let mut coord_deps: Vec<Vec<u32>> = vec![Vec::new(); n_coord];
        for (j, c) in channels.iter().enumerate() {
            for &r in &c.reactants {
                coord_deps[r].push(j as u32);
            }
        }
        let deps = channels
            .iter()
            .map(|c| {
                let mut d: Vec<u32> = c
                    .delta
                    .iter()
                    .flat_map(|&(coord, _)| coord_deps[coord].iter().copied())
                    .collect();
                d.sort_unstable();
                d.dedup();
                d
            })
            .collect();
        let gated: Vec<u32> = channels
            .iter()
            .enumerate()
            .filter(|(_, c)| c.window.is_some())
            .map(|(j, _)| j as u32)
            .collect();

        let sym = model.symbol(symbol)?;
        let mut times: Vec<f64> = sym.bursts.iter().map(|b| b.time).collect();
        for c in &sym.channels {
            if let Some((s, e)) = c.window {
                times.extend([s, e].into_iter().filter(|t| t.is_finite() && *t > 0.0));
            }
        }
        times.sort_by(f64::total_cmp);
        times.dedup();
        let schedule = times
            .into_iter()
            .map(|time| SchedulePoint {
                time,
                bursts: sym
                    .bursts
                    .iter()
                    .filter(|b| b.time == time)
                    .map(|b| (b.coord, b.count))
                    .collect(),
            })
            .collect();

        Ok(Self {
            model,
            symbol,
            channels,
            deps,
            coord_deps,
            gated,
            schedule,
            method,
        })
    }

    pub fn model(&self) -> &SystemModel {
        self.model
    }

    pub fn symbol(&self) -> usize {
        self.symbol
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn kind_of(&self, source: EventSource) -> ChannelKind {
        match source {
            EventSource::Channel(j) => self.channels[j as usize].kind,
            EventSource::Schedule(i) => {
                let coord = self.schedule[i as usize].bursts.first().map_or(0, |b| b.0);
                ChannelKind::Emission { voxel: coord }
            }
        }
    }

    /// Coordinates and signed changes applied by an event.
    pub fn event_delta(&self, source: EventSource) -> Vec<(usize, i32)> {
        match source {
            EventSource::Channel(j) => self.channels[j as usize].delta.clone(),
            EventSource::Schedule(i) => self.schedule[i as usize]
                .bursts
                .iter()
                .map(|&(c, n)| (c, n as i32))
                .collect(),
        }
    }

    /// Runs one replicate, streaming events to `observer`; returns the final state.
    pub fn run_with<O: Observer>(
        &self,
        t_end: f64,
        seed: ReplicateSeed,
        observer: &mut O,
    ) -> Result<Vec<u32>, SimError> {
        if !(t_end > 0.0 && t_end.is_finite()) {
            return Err(SimError::InvalidHorizon(t_end));
        }
        let mut rng = seed.rng();
        let mut counts = self.model.initial_state().to_vec();
        let mut t = 0.0_f64;
        let mut props: Vec<f64> = self
            .channels
            .iter()
            .map(|c| c.propensity_at(&counts, t))
            .collect();
        let mut tree = match self.method {
            SsaMethod::SumTree => {
                let mut tr = SumTree::new(props.len());
                tr.rebuild(&props);
                Some(tr)
            }
            SsaMethod::Direct => None,
        };
        let mut sp = 0usize;

        loop {
            while sp < self.schedule.len() && self.schedule[sp].time <= t {
                let point = &self.schedule[sp];
                t = t.max(point.time);
                if !point.bursts.is_empty() {
                    observer.before_event(t, &counts);
                }
                for &(coord, n) in &point.bursts {
                    counts[coord] += n;
                    for &j in &self.coord_deps[coord] {
                        let j = j as usize;
                        props[j] = self.channels[j].propensity_at(&counts, t);
                        if let Some(tr) = tree.as_mut() {
                            tr.update(j, props[j]);
                        }
                    }
                }
                for &j in &self.gated {
                    let j = j as usize;
                    props[j] = self.channels[j].propensity_at(&counts, t);
                    if let Some(tr) = tree.as_mut() {
                        tr.update(j, props[j]);
                    }
                }
                if !point.bursts.is_empty() {
                    observer.after_event(t, EventSource::Schedule(sp as u32), &counts);
                }
                sp += 1;
            }

            let total = match &tree {
                Some(tr) => tr.total(),
                None => props.iter().sum::<f64>(),
            };
            if !total.is_finite() || total > PROPENSITY_GUARD {
                return Err(SimError::PropensityOverflow { time: t, total });
            }
            let next_sched = self.schedule.get(sp).map_or(f64::INFINITY, |p| p.time);
            if total <= 0.0 {
                if next_sched <= t_end {
                    t = next_sched;
                    continue;
                }
                break;
            }
            let u: f64 = rng.gen();
            let tau = -(1.0 - u).ln() / total;
            let t_next = t + tau;
            if t_next >= next_sched && next_sched <= t_end {
                // Memoryless: restart the clock at the breakpoint.
                t = next_sched;
                continue;
            }
            if t_next > t_end {
                break;
            }
            t = t_next;
            let r = rng.gen::<f64>() * total;
            let j = match &tree {
                Some(tr) => tr.select(r),
                None => select_linear(&props, r),
            };
            observer.before_event(t, &counts);
            let applied = self.channels[j].apply(&mut counts);
            debug_assert!(applied, "selected channel would drive a count negative");
            for &d in &self.deps[j] {
                let d = d as usize;
                props[d] = self.channels[d].propensity_at(&counts, t);
                if let Some(tr) = tree.as_mut() {
                    tr.update(d, props[d]);
                }
            }
            observer.after_event(t, EventSource::Channel(j as u32), &counts);
        }
        observer.finish(t_end, &counts);
        Ok(counts)
    }

    pub fn run(&self, t_end: f64, seed: ReplicateSeed) -> Result<Trajectory, SimError> {
        let mut rec = Recorder::default();
        let final_state = self.run_with(t_end, seed, &mut rec)?;
        Ok(Trajectory {
            model_fingerprint: self.model.fingerprint(),
            symbol: self.symbol,
            t_end,
            seed,
            initial: self.model.initial_state().to_vec(),
            events: rec
                .events
                .into_iter()
                .map(|(time, source)| TrajectoryEvent {
                    time,
                    source,
                    kind: self.kind_of(source),
                })
                .collect(),
            final_state,
        })
    }
}

fn select_linear(props: &[f64], r: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (j, &a) in props.iter().enumerate() {
        if a > 0.0 {
            acc += a;
            last = j;
            if r < acc {
                return j;
            }
        }
    }
    last
}

/// One trajectory of symbol `k` using the direct method.
pub fn simulate(model: &SystemModel, k: usize, t_end: f64, seed: ReplicateSeed) -> Result<Trajectory, SimError> {
    Simulator::new(model, k, SsaMethod::Direct)?.run(t_end, seed)
}

/// Maps `f` over replicate seeds `(base_seed, 0..n_runs)` in parallel; output
/// is ordered by replicate index.
pub fn replicate_map<T, F>(n_runs: usize, base_seed: u64, f: F) -> Result<Vec<T>, SimError>
where
    T: Send,
    F: Fn(ReplicateSeed) -> Result<T, SimError> + Sync,
{
    if n_runs == 0 {
        return Err(SimError::NoReplicates);
    }
    (0..n_runs as u64)
        .into_par_iter()
        .map(|i| f(ReplicateSeed::new(base_seed, i)))
        .collect()
}

pub fn run_ensemble(
    model: &SystemModel,
    k: usize,
    n_runs: usize,
    t_end: f64,
    base_seed: u64,
) -> Result<Vec<Trajectory>, SimError> {
    let sim = Simulator::new(model, k, SsaMethod::Direct)?;
    replicate_map(n_runs, base_seed, |seed| sim.run(t_end, seed))
}

/// Tab-separated event dump: `time  kind  voxels  species  delta`.
pub fn write_trajectory_tsv<W: Write>(
    out: &mut W,
    model: &SystemModel,
    trajectory: &Trajectory,
) -> Result<(), SimError> {
    if trajectory.model_fingerprint != model.fingerprint() {
        return Err(SimError::ModelMismatch);
    }
    let sim = Simulator::new(model, trajectory.symbol, SsaMethod::Direct)?;
    writeln!(out, "# time_s\tkind\tvoxels\tspecies\tdelta")?;
    for ev in &trajectory.events {
        let delta = sim.event_delta(ev.source);
        let grid = model.grid();
        let voxel_of = |c: usize| match model.receiver_of_coord(c) {
            None => grid.voxel(c),
            Some((p, _)) => grid.voxel(model.receiver_voxel(p)),
        };
        let voxels: Vec<String> = delta.iter().map(|&(c, _)| voxel_of(c).to_string()).collect();
        let species: Vec<String> = delta
            .iter()
            .map(|&(c, _)| match model.receiver_of_coord(c) {
                None => "S".to_string(),
                Some((_, j)) => model.circuit().species[j].clone(),
            })
            .collect();
        let deltas: Vec<String> = delta.iter().map(|&(_, d)| format!("{d:+}")).collect();
        writeln!(
            out,
            "{:.9}\t{}\t{}\t{}\t{}",
            ev.time,
            kind_label(&ev.kind),
            voxels.join(","),
            species.join(","),
            deltas.join(",")
        )
        ?;
    }
    Ok(())
}

pub fn kind_label(kind: &ChannelKind) -> &'static str {
    match kind {
        ChannelKind::SignalDiffusion { .. } => "signal-diffusion",
        ChannelKind::BoundaryAbsorb { .. } => "boundary-absorb",
        ChannelKind::Activation { .. } => "activation",
        ChannelKind::Deactivation { .. } => "deactivation",
        ChannelKind::ReceiverDiffusion { .. } => "receiver-diffusion",
        ChannelKind::Emission { .. } => "emission",
        ChannelKind::CircuitOther { .. } => "circuit-other",
    }
}

#[cfg(test)]
mod tests;
