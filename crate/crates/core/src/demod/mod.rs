//! Approximate MAP demodulators, activation-train extraction and the decision
//! rule with bit-error-rate estimation.
//!
//! Every approximate filter has the same shape per symbol `k` and receiver
//! `p`: between events `Z_{k,p}` decays at `c_p · w_p(t) · r_{k,p}(t)`, and at
//! each counted jump of the output species it gains `log r_{k,p}(t⁻)`. The
//! partitioned filter uses `r = α` with `w = M_p − X*_p(t)`; the mixed and
//! generic filters use `r = β` (the mean activation reactant product) with
//! `w = 1`.

use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::DemodError;
use crate::model::SystemModel;
use crate::reference::{ReferenceSet, ReferenceSignal};
use crate::ssa::{EventCause, ObservationStream};
use crate::stats::{wilson, Z95};
use crate::statespace::activation_channel;

/// Reference values are clamped below at this many molecules before logs.
pub const LOG_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DemodKind {
    PartitionedApprox,
    MixedApprox,
    GenericApprox,
    MixedOracle,
    Optimal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpRecord {
    pub time: f64,
    pub voxel: usize,
    /// Increment applied to each `Z_k`.
    pub increments: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemodulatorOutput {
    pub kind: DemodKind,
    pub times: Vec<f64>,
    /// `Z_k` at each report time, `[k][time]`; starts at `log prior_k`.
    pub z: Vec<Vec<f64>>,
    /// Per-voxel accumulators `Z_{k,p}` without the prior, `[k][p][time]`.
    pub z_voxel: Vec<Vec<Vec<f64>>>,
    pub jumps: Vec<JumpRecord>,
    /// Jumps at which a reference value fell below [`LOG_FLOOR`].
    pub clamped: usize,
}

impl DemodulatorOutput {
    pub fn symbol_count(&self) -> usize {
        self.z.len()
    }

    /// Decision at report index `i`.
    pub fn decision_at(&self, i: usize) -> usize {
        let z: Vec<f64> = self.z.iter().map(|zk| zk[i]).collect();
        decide(&z)
    }

    pub fn decisions(&self) -> Vec<usize> {
        (0..self.times.len()).map(|i| self.decision_at(i)).collect()
    }

    /// Wraps optimal-filter log-posteriors in the common output type.
    pub fn from_log_posteriors(times: Vec<f64>, l: Vec<Vec<f64>>) -> Self {
        Self {
            kind: DemodKind::Optimal,
            times,
            z: l,
            z_voxel: Vec::new(),
            jumps: Vec::new(),
            clamped: 0,
        }
    }

    /// Columns `t, Z_0, ..., Z_{K−1}, decision`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let k = self.z.len();
        let mut header = String::from("t_s");
        for j in 0..k {
            header.push_str(&format!(",Z_{j}"));
        }
        writeln!(out, "{header},decision")?;
        for (i, t) in self.times.iter().enumerate() {
            write!(out, "{t:.6}")?;
            for zk in &self.z {
                write!(out, ",{:.9e}", zk[i])?;
            }
            writeln!(out, ",{}", self.decision_at(i))?;
        }
        Ok(())
    }

    /// Columns `t, voxel, dZ_0, ..., dZ_{K−1}`.
    pub fn write_jumps<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut header = String::from("t_s,voxel");
        for j in 0..self.z.len() {
            header.push_str(&format!(",dZ_{j}"));
        }
        writeln!(out, "{header}")?;
        for j in &self.jumps {
            write!(out, "{:.9},{}", j.time, j.voxel)?;
            for d in &j.increments {
                write!(out, ",{d:.9e}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// `argmax_k z_k`, ties to the lowest index.
pub fn decide(z: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = k;
        }
    }
    best
}

/// Drift weight of each receiver.
#[derive(Clone, Debug, PartialEq)]
pub enum DriftWeight {
    /// `M_p − X*_p(t)` (partitioned activation–deactivation).
    FreeReceptors(Vec<f64>),
    /// Constant 1 (the reference already carries the receptor factor).
    Unit,
}

/// An approximate filter ready to run on observation streams.
#[derive(Clone, Debug)]
pub struct ApproxFilter<'r> {
    pub kind: DemodKind,
    /// `refs[k][p]`.
    pub refs: Vec<Vec<&'r ReferenceSignal>>,
    /// Forward propensity constant of each receiver's activation channel.
    pub forward: Vec<f64>,
    pub weight: DriftWeight,
    pub log_prior: Vec<f64>,
}

impl<'r> ApproxFilter<'r> {
    fn check_refs(refs: &[Vec<ReferenceSignal>], k: usize, n_rx: usize) -> Result<(), DemodError> {
        for symbol in 0..k {
            for voxel in 0..n_rx {
                if refs.get(symbol).and_then(|r| r.get(voxel)).is_none() {
                    return Err(DemodError::MissingReference { symbol, voxel });
                }
            }
        }
        Ok(())
    }

    fn base(model: &SystemModel, kind: DemodKind, refs: &'r [Vec<ReferenceSignal>]) -> Result<Self, DemodError> {
        let k = model.symbol_count();
        let n_rx = model.receiver_count();
        Self::check_refs(refs, k, n_rx)?;
        let forward = (0..n_rx)
            .map(|p| activation_channel(model, p).map(|c| c.constant))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            kind,
            refs: (0..k).map(|s| refs[s][..n_rx].iter().collect()).collect(),
            forward,
            weight: DriftWeight::Unit,
            log_prior: model.priors().iter().map(|p| p.ln()).collect(),
        })
    }

    /// Partitioned filter driven by `α`.
    pub fn partitioned(model: &SystemModel, refs: &'r ReferenceSet) -> Result<Self, DemodError> {
        let circuit = model.circuit();
        let n_rx = model.receiver_count();
        for p in 0..n_rx {
            let ch = activation_channel(model, p)?;
            let receptor = model.receiver_coord(p, circuit.receptor);
            let ok = circuit.species.len() == 2
                && ch.reactants.len() == 2
                && ch.reactants.contains(&model.receiver_signal_coord(p))
                && ch.reactants.contains(&receptor);
            if !ok {
                return Err(DemodError::Unsupported(
                    "the partitioned approximation needs a two-state receptor activated by the signal".into(),
                ));
            }
        }
        let mut f = Self::base(model, DemodKind::PartitionedApprox, &refs.alpha)?;
        let init = model.initial_state();
        f.weight = DriftWeight::FreeReceptors((0..n_rx).map(|p| model.receptor_total(init, p) as f64).collect());
        Ok(f)
    }

    /// Mixed filter driven by `β`.
    pub fn mixed(model: &SystemModel, refs: &'r ReferenceSet) -> Result<Self, DemodError> {
        Self::base(model, DemodKind::MixedApprox, &refs.beta)
    }

    /// Generic-circuit filter: `β` is the mean of the activation channel's
    /// reactant product and the forward constant is that channel's constant.
    pub fn generic(model: &SystemModel, refs: &'r ReferenceSet) -> Result<Self, DemodError> {
        Self::base(model, DemodKind::GenericApprox, &refs.beta)
    }

    /// Mixed filter with jumps only at known activation times.
    pub fn mixed_oracle(model: &SystemModel, refs: &'r ReferenceSet) -> Result<Self, DemodError> {
        Self::base(model, DemodKind::MixedOracle, &refs.beta)
    }

    fn horizon(&self, obs: &ObservationStream) -> f64 {
        self.refs
            .iter()
            .flatten()
            .map(|r| r.t_end())
            .fold(obs.t_end, f64::min)
    }

    /// Runs on `obs`, counting every `+1` of each output species as evidence.
    pub fn run(&self, obs: &ObservationStream, report_times: &[f64]) -> Result<DemodulatorOutput, DemodError> {
        let evidence: Vec<Vec<f64>> = (0..obs.receiver_count())
            .map(|p| {
                obs.voxel_jumps(p)
                    .iter()
                    .filter(|j| j.delta > 0)
                    .flat_map(|j| std::iter::repeat_n(j.time, j.delta as usize))
                    .collect()
            })
            .collect();
        self.run_with_evidence(obs, &evidence, report_times)
    }

    /// Runs on `obs` with jumps taken from activation trains.
    pub fn run_with_trains(
        &self,
        obs: &ObservationStream,
        trains: &[ActivationTrain],
        report_times: &[f64],
    ) -> Result<DemodulatorOutput, DemodError> {
        let mut evidence = vec![Vec::new(); obs.receiver_count()];
        for t in trains {
            evidence[t.voxel].extend_from_slice(&t.times);
        }
        self.run_with_evidence(obs, &evidence, report_times)
    }

    fn run_with_evidence(
        &self,
        obs: &ObservationStream,
        evidence: &[Vec<f64>],
        report_times: &[f64],
    ) -> Result<DemodulatorOutput, DemodError> {
        let horizon = self.horizon(obs);
        if let Some(&last) = report_times.last() {
            if last > horizon + 1e-9 {
                return Err(DemodError::DecisionBeyondHorizon { time: last, horizon });
            }
        }
        let k = self.refs.len();
        let n_rx = self.forward.len();
        if obs.receiver_count() != n_rx {
            return Err(DemodError::Unsupported(format!(
                "stream has {} receivers but the filter expects {n_rx}",
                obs.receiver_count()
            )));
        }
        let nt = report_times.len();
        let mut z_voxel = vec![vec![vec![0.0; nt]; n_rx]; k];
        let mut jumps = Vec::new();
        let mut clamped = 0;

        for p in 0..n_rx {
            // Piecewise-constant drift weight as (start time, weight).
            let weights: Vec<(f64, f64)> = match &self.weight {
                DriftWeight::Unit => vec![(0.0, 1.0)],
                DriftWeight::FreeReceptors(m) => {
                    let mut x = obs.initial[p] as f64;
                    let mut w = vec![(0.0, m[p] - x)];
                    for j in obs.voxel_jumps(p) {
                        x += j.delta as f64;
                        w.push((j.time, m[p] - x));
                    }
                    w
                }
            };
            let c = self.forward[p];
            let ev = &evidence[p];
            for (sym, refs) in self.refs.iter().enumerate() {
                let r = refs[p];
                // Drift integral up to time t.
                let drift_to = |t: f64| -> f64 {
                    let mut acc = 0.0;
                    for (i, &(s, w)) in weights.iter().enumerate() {
                        if s >= t {
                            break;
                        }
                        let e = weights.get(i + 1).map_or(t, |n| n.0.min(t));
                        if w != 0.0 && e > s {
                            acc += w * r.integral(s, e);
                        }
                    }
                    c * acc
                };
                let mut jump_sum = 0.0;
                let mut next = 0;
                for (ti, &t) in report_times.iter().enumerate() {
                    while next < ev.len() && ev[next] <= t {
                        jump_sum += r.value_at(ev[next]).max(LOG_FLOOR).ln();
                        next += 1;
                    }
                    z_voxel[sym][p][ti] = jump_sum - drift_to(t);
                }
            }
            let last = report_times.last().copied().unwrap_or(0.0);
            for &t in ev.iter().take_while(|&&t| t <= last) {
                if self.refs.iter().any(|refs| refs[p].value_at(t) < LOG_FLOOR) {
                    clamped += 1;
                }
                jumps.push(JumpRecord {
                    time: t,
                    voxel: p,
                    increments: self
                        .refs
                        .iter()
                        .map(|refs| refs[p].value_at(t).max(LOG_FLOOR).ln())
                        .collect(),
                });
            }
        }
        jumps.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.voxel.cmp(&b.voxel)));
        let z = (0..k)
            .map(|sym| {
                (0..nt)
                    .map(|ti| self.log_prior[sym] + z_voxel[sym].iter().map(|zp| zp[ti]).sum::<f64>())
                    .collect()
            })
            .collect();
        Ok(DemodulatorOutput {
            kind: self.kind,
            times: report_times.to_vec(),
            z,
            z_voxel,
            jumps,
            clamped,
        })
    }
}

pub fn demod_partitioned_approx(
    model: &SystemModel,
    obs: &ObservationStream,
    refs: &ReferenceSet,
    report_times: &[f64],
) -> Result<DemodulatorOutput, DemodError> {
    ApproxFilter::partitioned(model, refs)?.run(obs, report_times)
}

pub fn demod_mixed_approx(
    model: &SystemModel,
    obs: &ObservationStream,
    refs: &ReferenceSet,
    report_times: &[f64],
) -> Result<DemodulatorOutput, DemodError> {
    ApproxFilter::mixed(model, refs)?.run(obs, report_times)
}

pub fn demod_generic_approx(
    model: &SystemModel,
    obs: &ObservationStream,
    refs: &ReferenceSet,
    report_times: &[f64],
) -> Result<DemodulatorOutput, DemodError> {
    ApproxFilter::generic(model, refs)?.run(obs, report_times)
}

pub fn demod_mixed_oracle(
    model: &SystemModel,
    obs: &ObservationStream,
    trains: &[ActivationTrain],
    refs: &ReferenceSet,
    report_times: &[f64],
) -> Result<DemodulatorOutput, DemodError> {
    ApproxFilter::mixed_oracle(model, refs)?.run_with_trains(obs, trains, report_times)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Use the simulator's cause labels.
    Oracle,
    /// A `+1` at `p` is an activation unless a neighbouring receiver drops by
    /// one in the same event.
    Inferred,
}

/// Activation times `A_p` of one receiver voxel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrain {
    pub voxel: usize,
    pub times: Vec<f64>,
}

pub fn extract_activation_trains(
    model: &SystemModel,
    obs: &ObservationStream,
    mode: TrainMode,
) -> Result<Vec<ActivationTrain>, DemodError> {
    let n_rx = model.receiver_count();
    if obs.model_fingerprint != model.fingerprint() {
        return Err(crate::error::SimError::ModelMismatch.into());
    }
    if mode == TrainMode::Inferred && !model.receiver().configuration.is_partitioned() && obs.receiver_count() < n_rx {
        return Err(DemodError::Unsupported(
            "inferring activations in a mixed receiver needs every voxel's history".into(),
        ));
    }
    let neighbours: Vec<Vec<usize>> = (0..n_rx).map(|p| model.receiver_neighbours(p)).collect();
    let mut trains: Vec<ActivationTrain> = (0..n_rx)
        .map(|voxel| ActivationTrain { voxel, times: Vec::new() })
        .collect();
    for ev in &obs.events {
        match mode {
            TrainMode::Oracle => {
                if let EventCause::Activation(p) = ev.cause {
                    trains[p].times.push(ev.time);
                }
            }
            TrainMode::Inferred => {
                for &(p, d) in &ev.changes {
                    if d <= 0 {
                        continue;
                    }
                    let paired = ev
                        .changes
                        .iter()
                        .any(|&(q, dq)| dq < 0 && neighbours[p].contains(&q));
                    if !paired {
                        trains[p].times.extend(std::iter::repeat_n(ev.time, d as usize));
                    }
                }
            }
        }
    }
    Ok(trains)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymbolBer {
    pub errors: usize,
    pub trials: usize,
    pub ber: f64,
    pub ci: (f64, f64),
}

impl SymbolBer {
    fn new(errors: usize, trials: usize) -> Self {
        Self {
            errors,
            trials,
            ber: if trials > 0 { errors as f64 / trials as f64 } else { f64::NAN },
            ci: wilson(errors, trials, Z95),
        }
    }
}

/// Error rate at one decision time, pooled and per transmitted symbol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BerPoint {
    pub time: f64,
    pub pooled: SymbolBer,
    pub per_symbol: Vec<SymbolBer>,
}

/// Streams decisions into error counts without keeping whole outputs.
#[derive(Clone, Debug)]
pub struct BerAccumulator {
    times: Vec<f64>,
    /// `[time][symbol] = (errors, trials)`.
    counts: Vec<Vec<(usize, usize)>>,
}

impl BerAccumulator {
    pub fn new(times: &[f64], symbols: usize) -> Self {
        Self {
            times: times.to_vec(),
            counts: vec![vec![(0, 0); symbols]; times.len()],
        }
    }

    pub fn add(&mut self, truth: usize, decisions: &[usize]) {
        for (row, &d) in self.counts.iter_mut().zip(decisions) {
            row[truth].1 += 1;
            if d != truth {
                row[truth].0 += 1;
            }
        }
    }

    pub fn finish(&self) -> Vec<BerPoint> {
        self.times
            .iter()
            .zip(&self.counts)
            .map(|(&time, row)| {
                let (e, n) = row.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
                BerPoint {
                    time,
                    pooled: SymbolBer::new(e, n),
                    per_symbol: row.iter().map(|&(e, n)| SymbolBer::new(e, n)).collect(),
                }
            })
            .collect()
    }
}

/// Decides every replicate at each of `decision_times` (which must lie on the
/// outputs' report grid) and tallies errors against `truth`.
pub fn decide_and_ber(
    outputs: &[DemodulatorOutput],
    truth: &[usize],
    decision_times: &[f64],
) -> Result<Vec<BerPoint>, DemodError> {
    if outputs.is_empty() {
        return Err(DemodError::NoReplicates);
    }
    if outputs.len() != truth.len() {
        return Err(DemodError::Unsupported("one true symbol per replicate is required".into()));
    }
    let k = outputs[0].symbol_count();
    let mut acc = BerAccumulator::new(decision_times, k);
    for (out, &tx) in outputs.iter().zip(truth) {
        let horizon = out.times.last().copied().unwrap_or(0.0);
        let mut decisions = Vec::with_capacity(decision_times.len());
        for &t in decision_times {
            let i = out.times.iter().position(|&s| (s - t).abs() < 1e-9);
            match i {
                Some(i) => decisions.push(out.decision_at(i)),
                None if t > horizon => return Err(DemodError::DecisionBeyondHorizon { time: t, horizon }),
                None => {
                    return Err(DemodError::Unsupported(format!(
                        "decision time {t} s is not on the report grid"
                    )))
                }
            }
        }
        acc.add(tx, &decisions);
    }
    Ok(acc.finish())
}

#[cfg(test)]
mod tests;
