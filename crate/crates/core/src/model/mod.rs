//! Physical system declaration and its compilation into a flat channel list.
//!
//! Every species is declared once and instantiated per voxel: the signalling
//! molecule `S` lives in every voxel, receiver species only in receiver
//! voxels. A state is a vector of counts indexed by *coordinate*; signal
//! coordinates come first (one per voxel, linear order), followed by the
//! receiver species of each receiver voxel in declaration order.

mod grid;
mod spec;

pub use grid::{Boundary, Face, SpatialGrid, VoxelIndex, DEFAULT_ABSORB_FRACTION};
pub use spec::{
    convert_rate_constant, Circuit, CircuitDef, Configuration, LocalSpecies, MediumSpec,
    ReactionKind, ReactionSpec, ReceiverSpec, SymbolDef, TransmitterSpec,
};

use serde::{Deserialize, Serialize};
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{ModelError, SimError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChannelKind {
    SignalDiffusion { from: usize, to: usize },
    BoundaryAbsorb { voxel: usize, face: Face },
    /// Increments the output species of receiver voxel `receiver`.
    Activation { receiver: usize },
    /// Decrements the output species of receiver voxel `receiver`.
    Deactivation { receiver: usize },
    ReceiverDiffusion { species: usize, from: usize, to: usize },
    Emission { voxel: usize },
    CircuitOther { receiver: usize },
}

/// Mass-action channel: propensity is `constant × Π count(reactant)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub kind: ChannelKind,
    pub constant: f64,
    pub reactants: Vec<usize>,
    pub delta: Vec<(usize, i32)>,
    /// Active only for `start <= t < end` when set.
    pub window: Option<(f64, f64)>,
}

impl Channel {
    #[inline]
    pub fn propensity(&self, counts: &[u32]) -> f64 {
        let mut a = self.constant;
        for &r in &self.reactants {
            a *= counts[r] as f64;
        }
        a
    }

    #[inline]
    pub fn is_active(&self, t: f64) -> bool {
        match self.window {
            None => true,
            Some((s, e)) => t >= s && t < e,
        }
    }

    pub fn propensity_at(&self, counts: &[u32], t: f64) -> f64 {
        if self.is_active(t) {
            self.propensity(counts)
        } else {
            0.0
        }
    }

    pub fn reaction_kind(&self) -> ReactionKind {
        match self.reactants.len() {
            0 => ReactionKind::Zeroth,
            1 => ReactionKind::First,
            _ => ReactionKind::SecondHetero,
        }
    }

    /// Applies the state change, returning `false` (and leaving `counts`
    /// untouched) if it would drive a count negative.
    pub fn apply(&self, counts: &mut [u32]) -> bool {
        if self
            .delta
            .iter()
            .any(|&(c, d)| d < 0 && counts[c] < d.unsigned_abs())
        {
            return false;
        }
        for &(c, d) in &self.delta {
            counts[c] = (counts[c] as i64 + d as i64) as u32;
        }
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Burst {
    pub time: f64,
    pub coord: usize,
    pub count: u32,
}

/// Emission for one transmitter symbol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompiledSymbol {
    pub channels: Vec<Channel>,
    pub bursts: Vec<Burst>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemModel {
    grid: SpatialGrid,
    medium: MediumSpec,
    transmitter: TransmitterSpec,
    receiver: ReceiverSpec,
    circuit: CircuitDef,
    receiver_linear: Vec<usize>,
    channels: Vec<Channel>,
    symbols: Vec<CompiledSymbol>,
    initial: Vec<u32>,
    fingerprint: u64,
}

impl SystemModel {
    pub fn assemble(
        grid: SpatialGrid,
        medium: MediumSpec,
        transmitter: TransmitterSpec,
        receiver: ReceiverSpec,
    ) -> Result<Self, ModelError> {
        transmitter.validate()?;
        let circuit = receiver.circuit.definition();
        circuit.validate()?;

        let tx_linear = transmitter
            .voxels
            .iter()
            .map(|&v| grid.linear(v).ok_or(ModelError::VoxelOutsideGrid(v)))
            .collect::<Result<Vec<_>, _>>()?;
        if receiver.voxels.is_empty() {
            return Err(ModelError::InvalidReceiver("at least one receiver voxel is required".into()));
        }
        let receiver_linear = receiver
            .voxels
            .iter()
            .map(|&v| grid.linear(v).ok_or(ModelError::VoxelOutsideGrid(v)))
            .collect::<Result<Vec<_>, _>>()?;
        let mut sorted = receiver_linear.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != receiver_linear.len() {
            return Err(ModelError::InvalidReceiver("receiver voxels must be distinct".into()));
        }
        let d_r = receiver.configuration.receiver_jump_rate();
        if !(d_r >= 0.0 && d_r.is_finite()) {
            return Err(ModelError::InvalidReceiver(format!(
                "receiver jump rate must be non-negative, got {d_r}"
            )));
        }

        let n_vox = grid.voxel_count();
        let n_rs = circuit.species.len();
        let rcoord = |p: usize, j: usize| n_vox + p * n_rs + j;
        let d = medium.jump_rate(grid.edge());
        let mut channels = Vec::new();

        // Signal diffusion and boundary absorption, voxel by voxel, faces in fixed order.
        for l in 0..n_vox {
            let v = grid.voxel(l);
            for face in Face::ALL {
                match grid.neighbour(v, face) {
                    Some(n) => {
                        let to = grid.linear(n).expect("neighbour inside grid");
                        channels.push(Channel {
                            kind: ChannelKind::SignalDiffusion { from: l, to },
                            constant: d,
                            reactants: vec![l],
                            delta: vec![(l, -1), (to, 1)],
                            window: None,
                        });
                    }
                    None => {
                        if let Boundary::Absorbing { rate_fraction } = grid.boundary() {
                            channels.push(Channel {
                                kind: ChannelKind::BoundaryAbsorb { voxel: l, face },
                                constant: d * rate_fraction,
                                reactants: vec![l],
                                delta: vec![(l, -1)],
                                window: None,
                            });
                        }
                    }
                }
            }
        }

        // Receiver circuits.
        for (p, &l) in receiver_linear.iter().enumerate() {
            let map = |s: LocalSpecies| match s {
                LocalSpecies::Signal => l,
                LocalSpecies::Receiver(j) => rcoord(p, j),
            };
            for r in &circuit.reactions {
                let reactants: Vec<usize> = r.reactants.iter().map(|&(s, _)| map(s)).collect();
                let delta: Vec<(usize, i32)> =
                    r.net_change().into_iter().map(|(s, n)| (map(s), n)).collect();
                let out = rcoord(p, circuit.output);
                let out_change: i32 = delta.iter().filter(|(c, _)| *c == out).map(|(_, n)| n).sum();
                let kind = match out_change.signum() {
                    1 => ChannelKind::Activation { receiver: p },
                    -1 => ChannelKind::Deactivation { receiver: p },
                    _ => ChannelKind::CircuitOther { receiver: p },
                };
                channels.push(Channel {
                    kind,
                    constant: r.propensity_constant,
                    reactants,
                    delta,
                    window: None,
                });
            }
        }

        // Receiver species hopping between adjacent receiver voxels.
        if let Configuration::Mixed { d_r } = receiver.configuration {
            for p in 0..receiver.voxels.len() {
                for q in (p + 1)..receiver.voxels.len() {
                    if !receiver.voxels[p].is_adjacent(&receiver.voxels[q]) {
                        continue;
                    }
                    for &j in &circuit.mobile {
                        for (from, to) in [(p, q), (q, p)] {
                            channels.push(Channel {
                                kind: ChannelKind::ReceiverDiffusion { species: j, from, to },
                                constant: d_r,
                                reactants: vec![rcoord(from, j)],
                                delta: vec![(rcoord(from, j), -1), (rcoord(to, j), 1)],
                                window: None,
                            });
                        }
                    }
                }
            }
        }

        let n_tx = tx_linear.len();
        let symbols = transmitter
            .symbols
            .iter()
            .map(|s| {
                let mut emission = Vec::new();
                if let Some((rate, start, end)) = s.poisson_window() {
                    for &l in &tx_linear {
                        emission.push(Channel {
                            kind: ChannelKind::Emission { voxel: l },
                            constant: rate / n_tx as f64,
                            reactants: vec![],
                            delta: vec![(l, 1)],
                            window: Some((start, end)),
                        });
                    }
                }
                let mut bursts = Vec::new();
                for &(time, count) in s.bursts() {
                    // Split the burst as evenly as possible, remainder to the first voxels.
                    let base = count / n_tx as u32;
                    let extra = count as usize % n_tx;
                    for (i, &l) in tx_linear.iter().enumerate() {
                        let c = base + u32::from(i < extra);
                        if c > 0 {
                            bursts.push(Burst { time, coord: l, count: c });
                        }
                    }
                }
                CompiledSymbol { channels: emission, bursts }
            })
            .collect();

        let mut initial = vec![0u32; n_vox + receiver_linear.len() * n_rs];
        for p in 0..receiver_linear.len() {
            initial[rcoord(p, circuit.receptor)] = receiver.receptors;
        }

        let mut model = Self {
            grid,
            medium,
            transmitter,
            receiver,
            circuit,
            receiver_linear,
            channels,
            symbols,
            initial,
            fingerprint: 0,
        };
        model.fingerprint = model.compute_fingerprint();
        Ok(model)
    }

    fn compute_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        format!("{:?}|{:?}|{:?}", self.channels, self.symbols, self.initial).hash(&mut h);
        h.finish()
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn medium(&self) -> &MediumSpec {
        &self.medium
    }

    pub fn transmitter(&self) -> &TransmitterSpec {
        &self.transmitter
    }

    pub fn receiver(&self) -> &ReceiverSpec {
        &self.receiver
    }

    pub fn circuit(&self) -> &CircuitDef {
        &self.circuit
    }

    /// Signalling jump rate `d = D / w²`.
    pub fn jump_rate(&self) -> f64 {
        self.medium.jump_rate(self.grid.edge())
    }

    pub fn volume(&self) -> f64 {
        self.grid.volume()
    }

    pub fn symbol_count(&self) -> usize {
        self.symbols.len()
    }

    pub fn priors(&self) -> &[f64] {
        &self.transmitter.priors
    }

    /// Symbol-independent channels.
    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn symbol(&self, k: usize) -> Result<&CompiledSymbol, SimError> {
        self.symbols.get(k).ok_or(SimError::SymbolOutOfRange {
            symbol: k,
            k: self.symbols.len(),
        })
    }

    /// Full channel list when symbol `k` is transmitted: base channels first,
    /// then the symbol's emission channels.
    pub fn channels_for(&self, k: usize) -> Result<Vec<Channel>, SimError> {
        let sym = self.symbol(k)?;
        let mut all = self.channels.clone();
        all.extend(sym.channels.iter().cloned());
        Ok(all)
    }

    pub fn initial_state(&self) -> &[u32] {
        &self.initial
    }

    pub fn coord_count(&self) -> usize {
        self.initial.len()
    }

    pub fn receiver_count(&self) -> usize {
        self.receiver_linear.len()
    }

    pub fn receiver_species_count(&self) -> usize {
        self.circuit.species.len()
    }

    /// Linear voxel index of receiver voxel `p`.
    pub fn receiver_voxel(&self, p: usize) -> usize {
        self.receiver_linear[p]
    }

    pub fn signal_coord(&self, voxel: usize) -> usize {
        voxel
    }

    pub fn receiver_coord(&self, p: usize, species: usize) -> usize {
        self.grid.voxel_count() + p * self.circuit.species.len() + species
    }

    pub fn output_coord(&self, p: usize) -> usize {
        self.receiver_coord(p, self.circuit.output)
    }

    /// Coordinate of `N_{R,p}`, the signal count inside receiver voxel `p`.
    pub fn receiver_signal_coord(&self, p: usize) -> usize {
        self.receiver_linear[p]
    }

    /// Receiver voxel owning a receiver-species coordinate.
    pub fn receiver_of_coord(&self, coord: usize) -> Option<(usize, usize)> {
        let n_vox = self.grid.voxel_count();
        if coord < n_vox {
            return None;
        }
        let n_rs = self.circuit.species.len();
        let off = coord - n_vox;
        Some((off / n_rs, off % n_rs))
    }

    pub fn coord_label(&self, coord: usize) -> String {
        match self.receiver_of_coord(coord) {
            None => format!("S@{}", self.grid.voxel(coord)),
            Some((p, j)) => format!("{}@rx{}", self.circuit.species[j], p),
        }
    }

    /// Receivers adjacent to receiver `p`.
    pub fn receiver_neighbours(&self, p: usize) -> Vec<usize> {
        let v = self.receiver.voxels[p];
        (0..self.receiver_count())
            .filter(|&q| q != p && self.receiver.voxels[q].is_adjacent(&v))
            .collect()
    }

    /// Total receptor count `Σ_j` over all receiver species of voxel `p`.
    pub fn receptor_total(&self, counts: &[u32], p: usize) -> u64 {
        (0..self.receiver_species_count())
            .map(|j| counts[self.receiver_coord(p, j)] as u64)
            .sum()
    }

    /// Propensity of channel `channel` of the symbol-`k` channel list at time `t`.
    pub fn propensity_eval(&self, k: usize, counts: &[u32], channel: usize, t: f64) -> Result<f64, SimError> {
        let n = self.channels.len();
        if channel < n {
            return Ok(self.channels[channel].propensity_at(counts, t));
        }
        let sym = self.symbol(k)?;
        Ok(sym
            .channels
            .get(channel - n)
            .map_or(0.0, |c| c.propensity_at(counts, t)))
    }

    pub fn count_kind(&self, pred: impl Fn(&ChannelKind) -> bool) -> usize {
        self.channels.iter().filter(|c| pred(&c.kind)).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn act_deact(volume: f64) -> Circuit {
        Circuit::ActDeact {
            activation: convert_rate_constant(0.005, volume).unwrap(),
            deactivation: 1.0,
        }
    }

    fn poisson_symbols() -> Vec<SymbolDef> {
        vec![
            SymbolDef::PoissonRate { rate: 10.0, duration: f64::INFINITY },
            SymbolDef::PoissonRate { rate: 40.0, duration: f64::INFINITY },
        ]
    }

    fn corner_model(configuration: Configuration) -> SystemModel {
        let w = 1.0 / 3.0;
        let grid = SpatialGrid::new([5, 5, 5], w, Boundary::absorbing_default()).unwrap();
        SystemModel::assemble(
            grid,
            MediumSpec::new(1.0).unwrap(),
            TransmitterSpec::uniform(VoxelIndex::new(1, 1, 1), poisson_symbols()),
            ReceiverSpec {
                voxels: vec![VoxelIndex::new(4, 5, 5), VoxelIndex::new(5, 5, 5)],
                configuration,
                circuit: act_deact(w * w * w),
                receptors: 10,
            },
        )
        .unwrap()
    }

    #[test]
    fn corner_scenario_channel_census() {
        let m = corner_model(Configuration::Mixed { d_r: 0.5 });
        assert_eq!(m.count_kind(|k| matches!(k, ChannelKind::Activation { .. })), 2);
        assert_eq!(m.count_kind(|k| matches!(k, ChannelKind::Deactivation { .. })), 2);
        // X and X* both hop; two of the four hopping channels move the output species.
        let hops = |out_only: bool| {
            m.count_kind(|k| match k {
                ChannelKind::ReceiverDiffusion { species, .. } => !out_only || *species == 1,
                _ => false,
            })
        };
        assert_eq!(hops(true), 2);
        assert_eq!(hops(false), 4);
        let g = m.grid();
        assert_eq!(
            m.count_kind(|k| matches!(k, ChannelKind::SignalDiffusion { .. })),
            2 * g.internal_faces()
        );
        assert_eq!(m.count_kind(|k| matches!(k, ChannelKind::BoundaryAbsorb { .. })), 150);
        let p = corner_model(Configuration::Partitioned);
        assert_eq!(p.count_kind(|k| matches!(k, ChannelKind::ReceiverDiffusion { .. })), 0);
    }

    #[test]
    fn corner_voxel_absorbs_through_three_faces() {
        let m = corner_model(Configuration::Partitioned);
        let faces: Vec<_> = m
            .channels()
            .iter()
            .filter(|c| matches!(c.kind, ChannelKind::BoundaryAbsorb { voxel: 0, .. }))
            .collect();
        assert_eq!(faces.len(), 3);
        for c in faces {
            assert!((c.constant - 9.0 / 50.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reflecting_line_has_no_absorption() {
        let grid = SpatialGrid::new([3, 1, 1], 1.0 / 3.0, Boundary::Reflecting).unwrap();
        let m = SystemModel::assemble(
            grid,
            MediumSpec::new(1.0).unwrap(),
            TransmitterSpec::uniform(VoxelIndex::new(1, 1, 1), poisson_symbols()),
            ReceiverSpec {
                voxels: vec![VoxelIndex::new(2, 1, 1), VoxelIndex::new(3, 1, 1)],
                configuration: Configuration::Partitioned,
                circuit: act_deact(1.0 / 27.0),
                receptors: 10,
            },
        )
        .unwrap();
        assert_eq!(m.count_kind(|k| matches!(k, ChannelKind::BoundaryAbsorb { .. })), 0);
        assert_eq!(m.count_kind(|k| matches!(k, ChannelKind::SignalDiffusion { .. })), 4);
    }

    #[test]
    fn propensities_follow_mass_action() {
        let m = corner_model(Configuration::Partitioned);
        let mut counts = m.initial_state().to_vec();
        let act = m
            .channels()
            .iter()
            .position(|c| c.kind == ChannelKind::Activation { receiver: 0 })
            .unwrap();
        let deact = m
            .channels()
            .iter()
            .position(|c| c.kind == ChannelKind::Deactivation { receiver: 0 })
            .unwrap();
        // g₊ = 0.135, X = 10, N_R = 2 → 2.7
        counts[m.receiver_signal_coord(0)] = 2;
        assert!((m.propensity_eval(0, &counts, act, 0.0).unwrap() - 2.7).abs() < 1e-12);
        counts[m.receiver_signal_coord(0)] = 0;
        assert_eq!(m.propensity_eval(0, &counts, act, 0.0).unwrap(), 0.0);
        counts[m.output_coord(0)] = 3;
        assert!((m.propensity_eval(0, &counts, deact, 0.0).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn compilation_is_deterministic() {
        let a = corner_model(Configuration::Mixed { d_r: 1.0 });
        let b = corner_model(Configuration::Mixed { d_r: 1.0 });
        assert_eq!(a.channels(), b.channels());
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(
            serde_json::to_string(a.channels()).unwrap(),
            serde_json::to_string(b.channels()).unwrap()
        );
        let c = corner_model(Configuration::Mixed { d_r: 0.5 });
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn rejects_bad_receivers() {
        let grid = SpatialGrid::new([3, 1, 1], 1.0, Boundary::Reflecting).unwrap();
        let tx = TransmitterSpec::uniform(VoxelIndex::new(1, 1, 1), poisson_symbols());
        let rx = |voxels: Vec<VoxelIndex>, configuration| ReceiverSpec {
            voxels,
            configuration,
            circuit: act_deact(1.0),
            receptors: 1,
        };
        let medium = MediumSpec::new(1.0).unwrap();
        assert!(matches!(
            SystemModel::assemble(
                grid.clone(),
                medium,
                tx.clone(),
                rx(vec![VoxelIndex::new(4, 1, 1)], Configuration::Partitioned)
            ),
            Err(ModelError::VoxelOutsideGrid(_))
        ));
        assert!(SystemModel::assemble(
            grid,
            medium,
            tx,
            rx(vec![VoxelIndex::new(2, 1, 1)], Configuration::Mixed { d_r: -0.1 })
        )
        .is_err());
    }

    #[test]
    fn eight_voxel_transmitter_splits_rate() {
        let grid = SpatialGrid::new([2, 2, 2], 0.5, Boundary::Reflecting).unwrap();
        let voxels: Vec<VoxelIndex> = (0..8).map(|l| grid.voxel(l)).collect();
        let tx = TransmitterSpec {
            voxels,
            symbols: poisson_symbols(),
            priors: vec![0.5, 0.5],
        };
        let m = SystemModel::assemble(
            grid,
            MediumSpec::new(1.0).unwrap(),
            tx,
            ReceiverSpec {
                voxels: vec![VoxelIndex::new(2, 2, 2)],
                configuration: Configuration::Partitioned,
                circuit: act_deact(0.125),
                receptors: 1,
            },
        )
        .unwrap();
        let em = &m.symbol(1).unwrap().channels;
        assert_eq!(em.len(), 8);
        assert!(em.iter().all(|c| (c.constant - 5.0).abs() < 1e-12));
    }
}
