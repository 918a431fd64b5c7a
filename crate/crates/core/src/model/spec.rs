//! Declarative pieces of a scenario: medium, transmitter symbols, receiver
//! circuit. These are validated and flattened by [`super::SystemModel::assemble`].

use serde::{Deserialize, Serialize};

use super::grid::VoxelIndex;
use crate::error::ModelError;

/// Propagation medium. The inter-voxel jump rate is derived from the grid
/// edge on demand and never stored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MediumSpec {
    /// Diffusion coefficient of the signalling molecules, µm²/s.
    pub diffusion: f64,
}

impl MediumSpec {
    pub fn new(diffusion: f64) -> Result<Self, ModelError> {
        if !(diffusion >= 0.0 && diffusion.is_finite()) {
            return Err(ModelError::InvalidGrid(format!(
                "diffusion coefficient must be non-negative, got {diffusion}"
            )));
        }
        Ok(Self { diffusion })
    }

    /// `d = D / w²` in s⁻¹.
    pub fn jump_rate(&self, edge: f64) -> f64 {
        self.diffusion / (edge * edge)
    }
}

/// Converts a concentration rate constant (µm³/s for a bimolecular step) into
/// the propensity constant for a voxel of volume `volume` µm³.
pub fn convert_rate_constant(rate_constant: f64, volume: f64) -> Result<f64, ModelError> {
    if !(volume > 0.0) {
        return Err(ModelError::NonPositiveVolume(volume));
    }
    Ok(rate_constant / volume)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SymbolDef {
    /// `ϕ → S` at `rate` molecules/s for `t < duration`.
    PoissonRate { rate: f64, duration: f64 },
    /// Exactly `count` molecules injected at each listed time.
    DeterministicBursts(Vec<(f64, u32)>),
    /// Short Poisson pulse of width `pulse_width`.
    Pulse { rate: f64, pulse_width: f64 },
}

impl SymbolDef {
    fn validate(&self) -> Result<(), String> {
        match self {
            SymbolDef::PoissonRate { rate, duration } => {
                if !(*rate >= 0.0 && rate.is_finite()) {
                    return Err(format!("emission rate must be non-negative, got {rate}"));
                }
                if !(*duration >= 0.0) {
                    return Err(format!("emission duration must be non-negative, got {duration}"));
                }
            }
            SymbolDef::Pulse { rate, pulse_width } => {
                if !(*rate >= 0.0 && rate.is_finite()) {
                    return Err(format!("pulse rate must be non-negative, got {rate}"));
                }
                if !(*pulse_width >= 0.0 && pulse_width.is_finite()) {
                    return Err(format!("pulse width must be non-negative, got {pulse_width}"));
                }
            }
            SymbolDef::DeterministicBursts(bursts) => {
                let mut prev = f64::NEG_INFINITY;
                for &(t, _) in bursts {
                    if !(t >= 0.0 && t.is_finite()) {
                        return Err(format!("burst time must be non-negative, got {t}"));
                    }
                    if t < prev {
                        return Err("burst times must be non-decreasing".into());
                    }
                    prev = t;
                }
            }
        }
        Ok(())
    }

    /// `(rate, start, end)` of the Poisson emission window, if any.
    pub fn poisson_window(&self) -> Option<(f64, f64, f64)> {
        match *self {
            SymbolDef::PoissonRate { rate, duration } => Some((rate, 0.0, duration)),
            SymbolDef::Pulse { rate, pulse_width } => Some((rate, 0.0, pulse_width)),
            SymbolDef::DeterministicBursts(_) => None,
        }
    }

    pub fn bursts(&self) -> &[(f64, u32)] {
        match self {
            SymbolDef::DeterministicBursts(b) => b,
            _ => &[],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransmitterSpec {
    /// Transmitter voxels; emission is split evenly among them.
    pub voxels: Vec<VoxelIndex>,
    pub symbols: Vec<SymbolDef>,
    pub priors: Vec<f64>,
}

impl TransmitterSpec {
    /// Single-voxel transmitter with uniform priors.
    pub fn uniform(voxel: VoxelIndex, symbols: Vec<SymbolDef>) -> Self {
        let k = symbols.len().max(1);
        Self {
            voxels: vec![voxel],
            priors: vec![1.0 / k as f64; symbols.len()],
            symbols,
        }
    }

    pub fn symbol_count(&self) -> usize {
        self.symbols.len()
    }

    pub(crate) fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidTransmitter(m));
        if self.voxels.is_empty() {
            return bad("at least one transmitter voxel is required".into());
        }
        if self.symbols.len() < 2 {
            return bad(format!("need at least 2 symbols, got {}", self.symbols.len()));
        }
        if self.priors.len() != self.symbols.len() {
            return bad(format!(
                "{} priors for {} symbols",
                self.priors.len(),
                self.symbols.len()
            ));
        }
        if self.priors.iter().any(|&p| !(p >= 0.0)) {
            return bad("priors must be non-negative".into());
        }
        let total: f64 = self.priors.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("priors sum to {total}, expected 1"));
        }
        for (k, s) in self.symbols.iter().enumerate() {
            s.validate()
                .map_err(|m| ModelError::InvalidTransmitter(format!("symbol {k}: {m}")))?;
        }
        Ok(())
    }
}

/// Species as seen from inside one receiver voxel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LocalSpecies {
    Signal,
    Receiver(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReactionKind {
    Zeroth,
    First,
    SecondHetero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReactionSpec {
    pub id: String,
    pub reactants: Vec<(LocalSpecies, u32)>,
    pub products: Vec<(LocalSpecies, u32)>,
    /// Propensity-function constant (s⁻¹), not the concentration rate constant.
    pub propensity_constant: f64,
}

impl ReactionSpec {
    pub fn new(
        id: impl Into<String>,
        reactants: &[LocalSpecies],
        products: &[LocalSpecies],
        propensity_constant: f64,
    ) -> Self {
        Self {
            id: id.into(),
            reactants: reactants.iter().map(|&s| (s, 1)).collect(),
            products: products.iter().map(|&s| (s, 1)).collect(),
            propensity_constant,
        }
    }

    pub fn kind(&self) -> Result<ReactionKind, ModelError> {
        let order: u32 = self.reactants.iter().map(|&(_, n)| n).sum();
        let homo = self.reactants.iter().any(|&(_, n)| n > 1);
        match (order, homo) {
            (0, _) => Ok(ReactionKind::Zeroth),
            (1, _) => Ok(ReactionKind::First),
            (2, false) => Ok(ReactionKind::SecondHetero),
            _ => Err(ModelError::InvalidReaction {
                id: self.id.clone(),
                reason: "only zeroth, first and heterogeneous second order reactions are supported"
                    .into(),
            }),
        }
    }

    /// Net stoichiometric change per local species.
    pub fn net_change(&self) -> Vec<(LocalSpecies, i32)> {
        let mut out: Vec<(LocalSpecies, i32)> = Vec::new();
        let mut add = |s: LocalSpecies, n: i32| {
            if let Some(e) = out.iter_mut().find(|(t, _)| *t == s) {
                e.1 += n;
            } else {
                out.push((s, n));
            }
        };
        for &(s, n) in &self.reactants {
            add(s, -(n as i32));
        }
        for &(s, n) in &self.products {
            add(s, n as i32);
        }
        out.retain(|&(_, n)| n != 0);
        out
    }
}

/// Receiver front-end circuit instantiated in every receiver voxel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitDef {
    pub name: String,
    pub species: Vec<String>,
    /// Species holding the `M` receptors at `t = 0`.
    pub receptor: usize,
    /// Species whose count the demodulator observes.
    pub output: usize,
    /// Species allowed to move between adjacent receiver voxels when mixed.
    pub mobile: Vec<usize>,
    pub reactions: Vec<ReactionSpec>,
}

impl CircuitDef {
    pub(crate) fn validate(&self) -> Result<(), ModelError> {
        let n = self.species.len();
        let bad = |m: String| Err(ModelError::InvalidReceiver(m));
        if n == 0 {
            return bad("circuit declares no species".into());
        }
        if self.receptor >= n || self.output >= n || self.mobile.iter().any(|&m| m >= n) {
            return bad("circuit species index out of range".into());
        }
        for r in &self.reactions {
            r.kind()?;
            if !(r.propensity_constant >= 0.0 && r.propensity_constant.is_finite()) {
                return Err(ModelError::InvalidReaction {
                    id: r.id.clone(),
                    reason: format!("propensity constant {} is negative", r.propensity_constant),
                });
            }
            for &(s, _) in r.reactants.iter().chain(&r.products) {
                if let LocalSpecies::Receiver(j) = s {
                    if j >= n {
                        return Err(ModelError::InvalidReaction {
                            id: r.id.clone(),
                            reason: format!("unknown receiver species {j}"),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Circuit {
    /// `S + X → S + X*` (g₊), `X* → X` (g₋); propensity constants.
    ActDeact { activation: f64, deactivation: f64 },
    /// `S + E ⇌ C₁` (λ̃₁, µ₁), `S + C₁ ⇌ C₂` (λ̃₂, µ₂); propensity constants.
    TwoSite {
        bind1: f64,
        unbind1: f64,
        bind2: f64,
        unbind2: f64,
    },
    Custom(CircuitDef),
}

impl Circuit {
    pub fn definition(&self) -> CircuitDef {
        use LocalSpecies::{Receiver as R, Signal as S};
        match *self {
            Circuit::ActDeact {
                activation,
                deactivation,
            } => CircuitDef {
                name: "act-deact".into(),
                species: vec!["X".into(), "X*".into()],
                receptor: 0,
                output: 1,
                mobile: vec![0, 1],
                reactions: vec![
                    ReactionSpec::new("activation", &[S, R(0)], &[S, R(1)], activation),
                    ReactionSpec::new("deactivation", &[R(1)], &[R(0)], deactivation),
                ],
            },
            Circuit::TwoSite {
                bind1,
                unbind1,
                bind2,
                unbind2,
            } => CircuitDef {
                name: "two-site".into(),
                species: vec!["E".into(), "C1".into(), "C2".into()],
                receptor: 0,
                output: 2,
                mobile: vec![0, 1, 2],
                reactions: vec![
                    ReactionSpec::new("bind1", &[S, R(0)], &[R(1)], bind1),
                    ReactionSpec::new("unbind1", &[R(1)], &[S, R(0)], unbind1),
                    ReactionSpec::new("bind2", &[S, R(1)], &[R(2)], bind2),
                    ReactionSpec::new("unbind2", &[R(2)], &[S, R(1)], unbind2),
                ],
            },
            Circuit::Custom(ref def) => def.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Configuration {
    Partitioned,
    /// Receiver species hop between adjacent receiver voxels at `d_r` s⁻¹.
    Mixed { d_r: f64 },
}

impl Configuration {
    pub fn receiver_jump_rate(&self) -> f64 {
        match *self {
            Configuration::Partitioned => 0.0,
            Configuration::Mixed { d_r } => d_r,
        }
    }

    pub fn is_partitioned(&self) -> bool {
        matches!(self, Configuration::Partitioned)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReceiverSpec {
    pub voxels: Vec<VoxelIndex>,
    pub configuration: Configuration,
    pub circuit: Circuit,
    /// Initial receptor count `M` per receiver voxel.
    pub receptors: u32,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn converts_activation_constant_with_volume() {
        let g = convert_rate_constant(0.005, 1.0 / 27.0).unwrap();
        assert!((g - 0.135).abs() < 1e-12);
        assert_eq!(convert_rate_constant(0.0, 0.5).unwrap(), 0.0);
        assert_eq!(convert_rate_constant(0.42, 1.0).unwrap(), 0.42);
        assert!(convert_rate_constant(1.0, 0.0).is_err());
        assert!(convert_rate_constant(1.0, -2.0).is_err());
    }

    #[test]
    fn jump_rate_scales_with_inverse_square_edge() {
        let m = MediumSpec::new(1.0).unwrap();
        assert!((m.jump_rate(1.0 / 3.0) - 9.0).abs() < 1e-12);
        assert!((m.jump_rate(1.0 / 6.0) - 4.0 * m.jump_rate(1.0 / 3.0)).abs() < 1e-9);
    }

    #[test]
    fn reaction_kinds() {
        use LocalSpecies::*;
        assert_eq!(
            ReactionSpec::new("a", &[Signal, Receiver(0)], &[], 1.0).kind().unwrap(),
            ReactionKind::SecondHetero
        );
        assert_eq!(ReactionSpec::new("b", &[Receiver(1)], &[], 1.0).kind().unwrap(), ReactionKind::First);
        assert_eq!(ReactionSpec::new("c", &[], &[Signal], 1.0).kind().unwrap(), ReactionKind::Zeroth);
        let dimer = ReactionSpec {
            id: "d".into(),
            reactants: vec![(Signal, 2)],
            products: vec![],
            propensity_constant: 1.0,
        };
        assert!(dimer.kind().is_err());
    }

    #[test]
    fn catalytic_signal_has_no_net_change() {
        let def = Circuit::ActDeact {
            activation: 0.1,
            deactivation: 1.0,
        }
        .definition();
        let net = def.reactions[0].net_change();
        assert_eq!(
            net,
            vec![(LocalSpecies::Receiver(0), -1), (LocalSpecies::Receiver(1), 1)]
        );
    }

    #[test]
    fn transmitter_validation() {
        let v = VoxelIndex::new(1, 1, 1);
        let ok = TransmitterSpec::uniform(
            v,
            vec![
                SymbolDef::PoissonRate { rate: 10.0, duration: 1.0 },
                SymbolDef::PoissonRate { rate: 40.0, duration: 1.0 },
            ],
        );
        assert!(ok.validate().is_ok());
        let mut one = ok.clone();
        one.symbols.truncate(1);
        one.priors = vec![1.0];
        assert!(one.validate().is_err());
        let mut skew = ok.clone();
        skew.priors = vec![0.7, 0.7];
        assert!(skew.validate().is_err());
        let mut unsorted = ok;
        unsorted.symbols[0] = SymbolDef::DeterministicBursts(vec![(0.4, 1), (0.2, 1)]);
        assert!(unsorted.validate().is_err());
    }
}
