//! Scenario declaration files.
//!
//! A scenario is a TOML document with `[grid]`, `[medium]`, `[transmitter]`,
//! `[receiver]`, `[run]` and optional `[truncation]` sections. Unknown keys
//! are rejected. Second-order constants are concentration rate constants in
//! µm³/s and are converted to propensity constants with the voxel volume.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::demod::DemodKind;
use crate::error::ConfigError;
use crate::model::{
    convert_rate_constant, Boundary, Circuit, Configuration, MediumSpec, ReceiverSpec, SpatialGrid,
    SymbolDef, SystemModel, TransmitterSpec, VoxelIndex, DEFAULT_ABSORB_FRACTION,
};
use crate::reference::{DEFAULT_DT_REF, DEFAULT_REF_RUNS};
use crate::ssa::SsaMethod;
use crate::statespace::Truncation;

pub const DEFAULT_BER_RUNS: usize = 300;
/// Spacing of the decision-time grid for BER-vs-time curves.
pub const DEFAULT_DECISION_DT: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub grid: GridConfig,
    pub medium: MediumConfig,
    pub transmitter: TransmitterConfig,
    pub receiver: ReceiverConfig,
    pub run: RunConfig,
    #[serde(default)]
    pub truncation: TruncationConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryKind {
    Reflecting,
    Absorbing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dims: [u32; 3],
    /// Voxel edge length in µm.
    pub edge: f64,
    pub boundary: BoundaryKind,
    /// Per-face absorption rate as a fraction of `d`.
    #[serde(default = "default_absorb")]
    pub absorb_fraction: f64,
}

fn default_absorb() -> f64 {
    DEFAULT_ABSORB_FRACTION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediumConfig {
    /// µm²/s.
    pub diffusion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SymbolConfig {
    /// Poisson emission at `rate`/s, for `duration` seconds (default: forever).
    Poisson {
        rate: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        duration: Option<f64>,
    },
    Pulse { rate: f64, width: f64 },
    /// `counts[i]` molecules released at `times[i]`.
    Bursts { times: Vec<f64>, counts: Vec<u32> },
}

impl SymbolConfig {
    fn to_def(&self) -> Result<SymbolDef, ConfigError> {
        Ok(match self {
            SymbolConfig::Poisson { rate, duration } => SymbolDef::PoissonRate {
                rate: *rate,
                duration: duration.unwrap_or(f64::INFINITY),
            },
            SymbolConfig::Pulse { rate, width } => SymbolDef::Pulse {
                rate: *rate,
                pulse_width: *width,
            },
            SymbolConfig::Bursts { times, counts } => {
                if times.len() != counts.len() {
                    return Err(ConfigError::Invalid(format!(
                        "burst symbol has {} times but {} counts",
                        times.len(),
                        counts.len()
                    )));
                }
                SymbolDef::DeterministicBursts(times.iter().copied().zip(counts.iter().copied()).collect())
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransmitterConfig {
    pub voxels: Vec<[u32; 3]>,
    pub symbols: Vec<SymbolConfig>,
    /// Defaults to uniform.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priors: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfigurationKind {
    Partitioned,
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CircuitConfig {
    /// `activation` in µm³/s, `deactivation` in s⁻¹.
    ActDeact { activation: f64, deactivation: f64 },
    /// Binding constants in µm³/s, unbinding in s⁻¹.
    TwoSite {
        bind1: f64,
        unbind1: f64,
        bind2: f64,
        unbind2: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReceiverConfig {
    pub voxels: Vec<[u32; 3]>,
    pub configuration: ConfigurationKind,
    /// Receiver-species jump rate in s⁻¹; only read when mixed.
    #[serde(default)]
    pub d_r: f64,
    /// Receptors per receiver voxel at `t = 0`.
    pub receptors: u32,
    pub circuit: CircuitConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub t_end: f64,
    #[serde(default = "default_ber_runs")]
    pub n_runs_ber: usize,
    #[serde(default = "default_ref_runs")]
    pub n_runs_ref: usize,
    #[serde(default = "default_dt_ref")]
    pub dt_ref: f64,
    /// Uniform decision grid spacing; ignored when `decision_times` is given.
    #[serde(default = "default_decision_dt")]
    pub decision_dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision_times: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
    pub demodulators: Vec<DemodKind>,
    #[serde(default)]
    pub ssa: SsaMethod,
    /// Replicates per symbol whose Z trajectories are written out.
    #[serde(default)]
    pub z_samples: usize,
}

fn default_ber_runs() -> usize {
    DEFAULT_BER_RUNS
}
fn default_ref_runs() -> usize {
    DEFAULT_REF_RUNS
}
fn default_dt_ref() -> f64 {
    DEFAULT_DT_REF
}
fn default_decision_dt() -> f64 {
    DEFAULT_DECISION_DT
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationConfig {
    #[serde(default = "default_n_max")]
    pub n_max: u32,
    #[serde(default = "default_state_limit")]
    pub state_limit: usize,
    #[serde(default = "default_leak_tol")]
    pub leak_tol: f64,
}

fn default_n_max() -> u32 {
    Truncation::default().n_max
}
fn default_state_limit() -> usize {
    Truncation::default().state_limit
}
fn default_leak_tol() -> f64 {
    Truncation::default().leak_tol
}

impl Default for TruncationConfig {
    fn default() -> Self {
        let t = Truncation::default();
        Self {
            n_max: t.n_max,
            state_limit: t.state_limit,
            leak_tol: t.leak_tol,
        }
    }
}

impl From<&TruncationConfig> for Truncation {
    fn from(t: &TruncationConfig) -> Self {
        Truncation {
            n_max: t.n_max,
            state_limit: t.state_limit,
            leak_tol: t.leak_tol,
        }
    }
}

fn voxel(v: [u32; 3]) -> VoxelIndex {
    VoxelIndex::from(v)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes to TOML")
    }

    /// Checks run parameters and that the physical part assembles.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let r = &self.run;
        if !(r.t_end > 0.0 && r.t_end.is_finite()) {
            return bad(format!("run.t_end must be positive, got {}", r.t_end));
        }
        if r.n_runs_ber == 0 || r.n_runs_ref == 0 {
            return bad("run counts must be at least 1".into());
        }
        if !(r.dt_ref > 0.0 && r.dt_ref <= r.t_end) {
            return bad(format!("run.dt_ref must lie in (0, t_end], got {}", r.dt_ref));
        }
        match &r.decision_times {
            Some(ts) => {
                if ts.is_empty() {
                    return bad("run.decision_times is empty".into());
                }
                if ts.windows(2).any(|w| w[1] <= w[0]) || ts.iter().any(|&t| !(0.0..=r.t_end).contains(&t)) {
                    return bad("run.decision_times must be increasing and lie in [0, t_end]".into());
                }
            }
            None => {
                if !(r.decision_dt > 0.0 && r.decision_dt <= r.t_end) {
                    return bad(format!("run.decision_dt must lie in (0, t_end], got {}", r.decision_dt));
                }
            }
        }
        if r.demodulators.is_empty() {
            return bad("run.demodulators lists no demodulator".into());
        }
        if self.receiver.configuration == ConfigurationKind::Mixed && !(self.receiver.d_r >= 0.0) {
            return bad(format!("receiver.d_r must be non-negative, got {}", self.receiver.d_r));
        }
        if !(self.truncation.leak_tol >= 0.0) {
            return bad("truncation.leak_tol must be non-negative".into());
        }
        self.build_model().map(|_| ())
    }

    pub fn build_model(&self) -> Result<SystemModel, ConfigError> {
        let invalid = |e: crate::error::ModelError| ConfigError::Invalid(e.to_string());
        let g = &self.grid;
        let boundary = match g.boundary {
            BoundaryKind::Reflecting => Boundary::Reflecting,
            BoundaryKind::Absorbing => Boundary::Absorbing {
                rate_fraction: g.absorb_fraction,
            },
        };
        let grid = SpatialGrid::new(g.dims, g.edge, boundary).map_err(invalid)?;
        let volume = grid.volume();
        let medium = MediumSpec::new(self.medium.diffusion).map_err(invalid)?;
        let t = &self.transmitter;
        let symbols = t.symbols.iter().map(SymbolConfig::to_def).collect::<Result<Vec<_>, _>>()?;
        let k = symbols.len().max(1);
        let transmitter = TransmitterSpec {
            voxels: t.voxels.iter().copied().map(voxel).collect(),
            priors: t.priors.clone().unwrap_or_else(|| vec![1.0 / k as f64; symbols.len()]),
            symbols,
        };
        let conv = |c: f64| convert_rate_constant(c, volume).map_err(invalid);
        let r = &self.receiver;
        let circuit = match r.circuit {
            CircuitConfig::ActDeact {
                activation,
                deactivation,
            } => Circuit::ActDeact {
                activation: conv(activation)?,
                deactivation,
            },
            CircuitConfig::TwoSite {
                bind1,
                unbind1,
                bind2,
                unbind2,
            } => Circuit::TwoSite {
                bind1: conv(bind1)?,
                unbind1,
                bind2: conv(bind2)?,
                unbind2,
            },
        };
        let configuration = match r.configuration {
            ConfigurationKind::Partitioned => Configuration::Partitioned,
            ConfigurationKind::Mixed => Configuration::Mixed { d_r: r.d_r },
        };
        let receiver = ReceiverSpec {
            voxels: r.voxels.iter().copied().map(voxel).collect(),
            configuration,
            circuit,
            receptors: r.receptors,
        };
        SystemModel::assemble(grid, medium, transmitter, receiver).map_err(invalid)
    }

    /// Canonical JSON: struct fields in declaration order, no whitespace.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("scenario serializes to JSON")
    }

    /// SHA-256 of the canonical form of the whole scenario.
    pub fn hash(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }

    /// SHA-256 over only what determines the reference signals (physics and
    /// horizon), so changing BER run counts keeps caches valid.
    pub fn model_hash(&self) -> String {
        let key = serde_json::json!({
            "grid": self.grid,
            "medium": self.medium,
            "transmitter": self.transmitter,
            "receiver": self.receiver,
            "t_end": self.run.t_end,
        });
        sha256_hex(key.to_string().as_bytes())
    }

    pub fn decision_times(&self) -> Vec<f64> {
        if let Some(ts) = &self.run.decision_times {
            return ts.clone();
        }
        let dt = self.run.decision_dt;
        let n = (self.run.t_end / dt + 1e-9).floor() as usize;
        (1..=n).map(|i| i as f64 * dt).collect()
    }

    pub fn truncation(&self) -> Truncation {
        (&self.truncation).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
name = "sample"

[grid]
dims = [5, 5, 5]
edge = 0.3333333333333333
boundary = "absorbing"

[medium]
diffusion = 1.0

[transmitter]
voxels = [[1, 1, 1]]
symbols = [
  { kind = "poisson", rate = 10.0 },
  { kind = "poisson", rate = 40.0 },
]

[receiver]
voxels = [[4, 5, 5], [5, 5, 5]]
configuration = "mixed"
d_r = 0.5
receptors = 10
circuit = { kind = "act-deact", activation = 0.005, deactivation = 1.0 }

[run]
t_end = 2.5
seed = 7
demodulators = ["mixed-approx", "generic-approx"]
"#;

    #[test]
    fn parses_with_defaults_and_converts_constants() {
        let cfg = ScenarioConfig::from_toml_str(SAMPLE).unwrap();
        assert_eq!(cfg.run.n_runs_ber, 300);
        assert_eq!(cfg.run.n_runs_ref, 500);
        assert_eq!(cfg.run.dt_ref, 0.01);
        let model = cfg.build_model().unwrap();
        // 0.005 µm³/s in a (1/3 µm)³ voxel.
        let g_plus = model
            .channels()
            .iter()
            .find(|c| matches!(c.kind, crate::model::ChannelKind::Activation { .. }))
            .unwrap()
            .constant;
        assert!((g_plus - 0.135).abs() < 1e-12);
        let ts = cfg.decision_times();
        assert_eq!(ts.len(), 50);
        assert!((ts[49] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = SAMPLE.replace("receptors = 10", "receptors = 10\nreceptor_typo = 3");
        assert!(matches!(ScenarioConfig::from_toml_str(&text), Err(ConfigError::Parse(_))));
        let text = SAMPLE.replace("rate = 10.0 }", "rate = 10.0, width = 1 }");
        assert!(ScenarioConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn invalid_physics_is_reported() {
        let text = SAMPLE.replace("[[4, 5, 5], [5, 5, 5]]", "[[4, 5, 5], [6, 5, 5]]");
        assert!(matches!(ScenarioConfig::from_toml_str(&text), Err(ConfigError::Invalid(_))));
        let text = SAMPLE.replace("t_end = 2.5", "t_end = -1.0");
        assert!(matches!(ScenarioConfig::from_toml_str(&text), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn round_trip_keeps_the_hash() {
        let cfg = ScenarioConfig::from_toml_str(SAMPLE).unwrap();
        let again = ScenarioConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash(), again.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn model_hash_ignores_run_counts() {
        let a = ScenarioConfig::from_toml_str(SAMPLE).unwrap();
        let mut b = a.clone();
        b.run.n_runs_ber = 17;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.model_hash(), b.model_hash());
        b.receiver.d_r = 0.6;
        assert_ne!(a.model_hash(), b.model_hash());
    }
}
