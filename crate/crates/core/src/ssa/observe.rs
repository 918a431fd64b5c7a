//! Observation streams: the output-species counts a receiver actually sees.

use serde::{Deserialize, Serialize};

use super::{EventSource, Observer, Simulator, Trajectory};
use crate::error::SimError;
use crate::model::{ChannelKind, SystemModel};

/// What caused a joint change of the observed output counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventCause {
    Activation(usize),
    Deactivation(usize),
    /// Output species hopped from receiver `from` to receiver `to`.
    Hop { from: usize, to: usize },
    Other,
}

/// Cause of a jump as seen from a single receiver voxel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChangeCause {
    Activation,
    Deactivation,
    /// Arrived from receiver voxel `.0`.
    DiffusionIn(usize),
    /// Left towards receiver voxel `.0`.
    DiffusionOut(usize),
    Other,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservedEvent {
    pub time: f64,
    /// `(receiver, ±n)` for every receiver whose output count changed.
    pub changes: Vec<(usize, i32)>,
    pub cause: EventCause,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelJump {
    pub time: f64,
    pub delta: i32,
    pub cause: ChangeCause,
}

/// Output counts of every receiver voxel over `[0, t_end]`, stored as jumps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationStream {
    pub model_fingerprint: u64,
    pub symbol: usize,
    pub t_end: f64,
    pub initial: Vec<u32>,
    pub events: Vec<ObservedEvent>,
}

impl ObservationStream {
    pub fn receiver_count(&self) -> usize {
        self.initial.len()
    }

    /// Jumps of receiver `p` in time order.
    pub fn voxel_jumps(&self, p: usize) -> Vec<VoxelJump> {
        let mut out = Vec::new();
        for ev in &self.events {
            for &(q, delta) in &ev.changes {
                if q != p {
                    continue;
                }
                let cause = match ev.cause {
                    EventCause::Activation(_) => ChangeCause::Activation,
                    EventCause::Deactivation(_) => ChangeCause::Deactivation,
                    EventCause::Hop { from, to } if to == p => ChangeCause::DiffusionIn(from),
                    EventCause::Hop { to, .. } => ChangeCause::DiffusionOut(to),
                    EventCause::Other => ChangeCause::Other,
                };
                out.push(VoxelJump {
                    time: ev.time,
                    delta,
                    cause,
                });
            }
        }
        out
    }

    /// Output count of receiver `p` at time `t` (right-continuous).
    pub fn count_at(&self, p: usize, t: f64) -> u32 {
        let mut n = self.initial[p] as i64;
        for ev in self.events.iter().take_while(|e| e.time <= t) {
            for &(q, d) in &ev.changes {
                if q == p {
                    n += d as i64;
                }
            }
        }
        n as u32
    }

    pub fn final_counts(&self) -> Vec<u32> {
        let mut n: Vec<i64> = self.initial.iter().map(|&x| x as i64).collect();
        for ev in &self.events {
            for &(q, d) in &ev.changes {
                n[q] += d as i64;
            }
        }
        n.into_iter().map(|x| x as u32).collect()
    }
}

fn classify(model: &SystemModel, kind: ChannelKind, delta: &[(usize, i32)]) -> Option<(Vec<(usize, i32)>, EventCause)> {
    let mut changes: Vec<(usize, i32)> = Vec::new();
    for p in 0..model.receiver_count() {
        let out = model.output_coord(p);
        let d: i32 = delta.iter().filter(|(c, _)| *c == out).map(|(_, n)| n).sum();
        if d != 0 {
            changes.push((p, d));
        }
    }
    if changes.is_empty() {
        return None;
    }
    let cause = match kind {
        ChannelKind::Activation { receiver } => EventCause::Activation(receiver),
        ChannelKind::Deactivation { receiver } => EventCause::Deactivation(receiver),
        ChannelKind::ReceiverDiffusion { from, to, .. } => EventCause::Hop { from, to },
        _ => EventCause::Other,
    };
    Some((changes, cause))
}

fn initial_outputs(model: &SystemModel) -> Vec<u32> {
    (0..model.receiver_count())
        .map(|p| model.initial_state()[model.output_coord(p)])
        .collect()
}

/// Projects a full trajectory onto the receiver outputs.
pub fn extract_observations(trajectory: &Trajectory, model: &SystemModel) -> Result<ObservationStream, SimError> {
    if trajectory.model_fingerprint != model.fingerprint() {
        return Err(SimError::ModelMismatch);
    }
    let sim = Simulator::new(model, trajectory.symbol, super::SsaMethod::Direct)?;
    let events = trajectory
        .events
        .iter()
        .filter_map(|ev| {
            classify(model, ev.kind, &sim.event_delta(ev.source)).map(|(changes, cause)| ObservedEvent {
                time: ev.time,
                changes,
                cause,
            })
        })
        .collect();
    Ok(ObservationStream {
        model_fingerprint: model.fingerprint(),
        symbol: trajectory.symbol,
        t_end: trajectory.t_end,
        initial: initial_outputs(model),
        events,
    })
}

/// Builds the observation stream on the fly, without storing the trajectory.
pub struct ObservationRecorder<'s, 'm> {
    sim: &'s Simulator<'m>,
    events: Vec<ObservedEvent>,
}

impl<'s, 'm> ObservationRecorder<'s, 'm> {
    pub fn new(sim: &'s Simulator<'m>) -> Self {
        Self {
            sim,
            events: Vec::new(),
        }
    }

    pub fn into_stream(self, t_end: f64) -> ObservationStream {
        let model = self.sim.model();
        ObservationStream {
            model_fingerprint: model.fingerprint(),
            symbol: self.sim.symbol(),
            t_end,
            initial: initial_outputs(model),
            events: self.events,
        }
    }
}

impl Observer for ObservationRecorder<'_, '_> {
    fn after_event(&mut self, time: f64, source: EventSource, _counts: &[u32]) {
        let (kind, delta) = match source {
            EventSource::Channel(j) => {
                let c = &self.sim.channels()[j as usize];
                // Only channels touching receiver species can change an output.
                if c.delta.iter().all(|&(coord, _)| coord < self.sim.model().grid().voxel_count()) {
                    return;
                }
                (c.kind, c.delta.clone())
            }
            EventSource::Schedule(_) => return,
        };
        if let Some((changes, cause)) = classify(self.sim.model(), kind, &delta) {
            self.events.push(ObservedEvent { time, changes, cause });
        }
    }
}

impl Simulator<'_> {
    /// Runs one replicate and returns only its observation stream.
    pub fn observe(&self, t_end: f64, seed: super::ReplicateSeed) -> Result<ObservationStream, SimError> {
        let mut rec = ObservationRecorder::new(self);
        self.run_with(t_end, seed, &mut rec)?;
        Ok(rec.into_stream(t_end))
    }
}
