//! Figure-reproduction presets. Each preset runs a family of scenarios and
//! checks the qualitative claim of its figure as machine-readable claims.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demod::{ApproxFilter, BerAccumulator, DemodKind, SymbolBer};
use crate::error::{ConfigError, Error};
use crate::harness::{ber_seed, run_scenario, HarnessOptions, ScenarioRun};
use crate::lna::{z_moments_and_ber, LnaFilter, LnaOptions, LnaResult};
use crate::reference::{RefKind, ReferenceSet};
use crate::scenario::{
    BoundaryKind, CircuitConfig, ConfigurationKind, GridConfig, MediumConfig, ReceiverConfig, RunConfig,
    ScenarioConfig, SymbolConfig, TransmitterConfig, TruncationConfig, DEFAULT_DECISION_DT,
};
use crate::ssa::{ReplicateSeed, SsaMethod, Simulator};
use crate::stats::{intervals_overlap, spearman};

pub const PRESETS: [&str; 9] = [
    "fig5-6", "fig8", "fig9", "fig10", "fig11", "fig12-13", "fig13b", "fig14-15", "fig17",
];

/// Concentration rate constant of `S + X → S + X*`, µm³/s.
pub const ACTIVATION: f64 = 0.005;
/// `X* → X`, s⁻¹.
pub const DEACTIVATION: f64 = 1.0;
pub const LNA_SSA_RUNS: usize = 5000;

const W: f64 = 1.0 / 3.0;

#[derive(Clone, Debug)]
pub struct PresetOptions {
    /// Multiplies every run count (BER, reference and LNA ensembles).
    pub scale: f64,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
}

impl Default for PresetOptions {
    fn default() -> Self {
        Self {
            scale: 1.0,
            seed: 1,
            out_dir: None,
            cache_dir: None,
        }
    }
}

impl PresetOptions {
    pub fn runs(&self, n: usize) -> usize {
        ((n as f64 * self.scale).round() as usize).max(1)
    }

    fn harness(&self, variant: &str) -> HarnessOptions {
        HarnessOptions {
            out_dir: self.out_dir.as_ref().map(|d| d.join(variant)),
            cache_dir: self.cache_dir.clone(),
        }
    }

    /// Applies scale and seed to a scenario.
    pub fn apply(&self, mut cfg: ScenarioConfig) -> ScenarioConfig {
        cfg.run.n_runs_ber = self.runs(cfg.run.n_runs_ber);
        cfg.run.n_runs_ref = self.runs(cfg.run.n_runs_ref);
        cfg.run.seed = self.seed;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Claim {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetReport {
    pub preset: String,
    pub scale: f64,
    pub seed: u64,
    pub passed: bool,
    pub claims: Vec<Claim>,
}

impl PresetReport {
    fn new(preset: &str, opts: &PresetOptions, claims: Vec<Claim>) -> Self {
        Self {
            preset: preset.to_string(),
            scale: opts.scale,
            seed: opts.seed,
            passed: claims.iter().all(|c| c.passed),
            claims,
        }
    }
}

fn act_deact() -> CircuitConfig {
    CircuitConfig::ActDeact {
        activation: ACTIVATION,
        deactivation: DEACTIVATION,
    }
}

fn poisson(rate: f64) -> SymbolConfig {
    SymbolConfig::Poisson { rate, duration: None }
}

fn run_config(t_end: f64, demod: DemodKind) -> RunConfig {
    RunConfig {
        t_end,
        n_runs_ber: 300,
        n_runs_ref: 500,
        dt_ref: 0.01,
        decision_dt: DEFAULT_DECISION_DT,
        decision_times: None,
        seed: 1,
        demodulators: vec![demod],
        ssa: SsaMethod::Direct,
        z_samples: 0,
    }
}

/// Partitioned receiver with the partitioned filter when `d_r = 0`,
/// otherwise a mixed receiver with the mixed filter.
fn set_dr(cfg: &mut ScenarioConfig, d_r: f64) {
    if d_r == 0.0 {
        cfg.receiver.configuration = ConfigurationKind::Partitioned;
        cfg.receiver.d_r = 0.0;
        cfg.run.demodulators = vec![DemodKind::PartitionedApprox];
    } else {
        cfg.receiver.configuration = ConfigurationKind::Mixed;
        cfg.receiver.d_r = d_r;
        cfg.run.demodulators = vec![DemodKind::MixedApprox];
    }
}

/// 5×5×5 medium, absorbing walls, transmitter at (1,1,1), receivers at
/// (4,5,5) and (5,5,5) with M = 10, Poisson emission at 10 or 40 /s.
pub fn corner_scenario(d_r: f64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig {
        name: format!("corner-dr{d_r}"),
        grid: GridConfig {
            dims: [5, 5, 5],
            edge: W,
            boundary: BoundaryKind::Absorbing,
            absorb_fraction: crate::model::DEFAULT_ABSORB_FRACTION,
        },
        medium: MediumConfig { diffusion: 1.0 },
        transmitter: TransmitterConfig {
            voxels: vec![[1, 1, 1]],
            symbols: vec![poisson(10.0), poisson(40.0)],
            priors: None,
        },
        receiver: ReceiverConfig {
            voxels: vec![[4, 5, 5], [5, 5, 5]],
            configuration: ConfigurationKind::Partitioned,
            d_r: 0.0,
            receptors: 10,
            circuit: act_deact(),
        },
        run: run_config(2.5, DemodKind::PartitionedApprox),
        truncation: TruncationConfig::default(),
    };
    set_dr(&mut cfg, d_r);
    cfg
}

/// Three voxels in a row with reflecting walls: transmitter in voxel 1,
/// receivers in voxels 2 and 3, deterministic bursts at 0, 0.2 and 0.4 s.
/// Partitioned: 8 or 20 molecules per burst, M = 10. Mixed: 10 or 15
/// molecules, M = 4, receptors hopping at `0.2 d`.
pub fn line_scenario(mixed: bool) -> ScenarioConfig {
    let bursts = |n: u32| SymbolConfig::Bursts {
        times: vec![0.0, 0.2, 0.4],
        counts: vec![n; 3],
    };
    let (s0, s1, m) = if mixed { (10, 15, 4) } else { (8, 20, 10) };
    let d = 1.0 / (W * W);
    ScenarioConfig {
        name: if mixed { "line-mixed" } else { "line-partitioned" }.into(),
        grid: GridConfig {
            dims: [3, 1, 1],
            edge: W,
            boundary: BoundaryKind::Reflecting,
            absorb_fraction: crate::model::DEFAULT_ABSORB_FRACTION,
        },
        medium: MediumConfig { diffusion: 1.0 },
        transmitter: TransmitterConfig {
            voxels: vec![[1, 1, 1]],
            symbols: vec![bursts(s0), bursts(s1)],
            priors: None,
        },
        receiver: ReceiverConfig {
            voxels: vec![[2, 1, 1], [3, 1, 1]],
            configuration: if mixed { ConfigurationKind::Mixed } else { ConfigurationKind::Partitioned },
            d_r: if mixed { 0.2 * d } else { 0.0 },
            receptors: m,
            circuit: act_deact(),
        },
        run: RunConfig {
            n_runs_ber: 200,
            demodulators: vec![
                if mixed { DemodKind::MixedApprox } else { DemodKind::PartitionedApprox },
                DemodKind::Optimal,
            ],
            ..run_config(2.0, DemodKind::Optimal)
        },
        truncation: TruncationConfig {
            n_max: 100,
            ..Default::default()
        },
    }
}

pub const RECEIVERS_2: [[u32; 3]; 2] = [[4, 5, 5], [5, 5, 5]];
pub const RECEIVERS_4: [[u32; 3]; 4] = [[2, 5, 5], [3, 5, 5], [4, 5, 5], [5, 5, 5]];
pub const RECEIVERS_6: [[u32; 3]; 6] = [[5, 4, 5], [1, 5, 5], [2, 5, 5], [3, 5, 5], [4, 5, 5], [5, 5, 5]];

/// Partitioned corner scenario with `voxels` receivers of `receptors` each.
pub fn voxel_count_scenario(voxels: usize, receptors: u32) -> ScenarioConfig {
    let mut cfg = corner_scenario(0.0);
    cfg.receiver.voxels = match voxels {
        2 => RECEIVERS_2.to_vec(),
        4 => RECEIVERS_4.to_vec(),
        _ => RECEIVERS_6.to_vec(),
    };
    cfg.receiver.receptors = receptors;
    cfg.name = format!("voxels{voxels}-m{receptors}");
    cfg
}

/// Corner scenario with the two-binding-site receptor, M = 2.
pub fn two_site_scenario(d_r: f64) -> ScenarioConfig {
    let mut cfg = corner_scenario(d_r);
    cfg.receiver.receptors = 2;
    cfg.receiver.circuit = CircuitConfig::TwoSite {
        bind1: ACTIVATION,
        unbind1: DEACTIVATION,
        bind2: ACTIVATION,
        unbind2: DEACTIVATION,
    };
    cfg.run.demodulators = vec![DemodKind::GenericApprox];
    cfg.name = format!("two-site-dr{d_r}");
    cfg
}

/// Partitioned corner scenario with M = 40 at edge 1/3, or the same medium
/// refined to edge 1/6: each coarse voxel becomes 2×2×2 fine voxels, the
/// emission is split over the 8 transmitter voxels and the receptors over
/// the 8 voxels of each receiver.
pub fn voxel_size_scenario(fine: bool, diffusion: f64) -> ScenarioConfig {
    let mut cfg = corner_scenario(0.0);
    cfg.medium.diffusion = diffusion;
    cfg.receiver.receptors = 40;
    cfg.name = format!("edge-{}-D{diffusion}", if fine { "1_6" } else { "1_3" });
    if fine {
        let split = |v: [u32; 3]| {
            let mut out = Vec::with_capacity(8);
            for dx in 0..2 {
                for dy in 0..2 {
                    for dz in 0..2 {
                        out.push([2 * v[0] - 1 + dx, 2 * v[1] - 1 + dy, 2 * v[2] - 1 + dz]);
                    }
                }
            }
            out
        };
        cfg.grid.dims = [10, 10, 10];
        cfg.grid.edge = W / 2.0;
        cfg.transmitter.voxels = split([1, 1, 1]);
        cfg.receiver.voxels = RECEIVERS_2.iter().flat_map(|&v| split(v)).collect();
        cfg.receiver.receptors = 40 / 8;
        cfg.run.ssa = SsaMethod::SumTree;
    }
    cfg
}

/// 2×2×2 reflecting cube, transmitter at (1,1,1), receivers at (1,2,2) and
/// (2,2,2) with M = 10, 0.2 s pulses at 10 or 40 /s, 20 s horizon.
pub fn cube_scenario(d_r: f64) -> ScenarioConfig {
    let mut cfg = corner_scenario(d_r);
    cfg.name = format!("cube-dr{d_r}");
    cfg.grid.dims = [2, 2, 2];
    cfg.grid.boundary = BoundaryKind::Reflecting;
    cfg.transmitter.voxels = vec![[1, 1, 1]];
    cfg.transmitter.symbols = vec![
        SymbolConfig::Pulse { rate: 10.0, width: 0.2 },
        SymbolConfig::Pulse { rate: 40.0, width: 0.2 },
    ];
    cfg.receiver.voxels = vec![[1, 2, 2], [2, 2, 2]];
    cfg.run.t_end = 20.0;
    cfg
}

fn save_report(opts: &PresetOptions, report: &PresetReport) -> Result<(), Error> {
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(report).expect("report serializes");
        std::fs::write(dir.join("report.json"), text)?;
    }
    Ok(())
}

fn run_variant(opts: &PresetOptions, cfg: ScenarioConfig, variant: &str) -> Result<ScenarioRun, Error> {
    run_scenario(&opts.apply(cfg), &opts.harness(variant))
}

fn fmt_ber(b: &SymbolBer) -> String {
    format!("{:.4} [{:.4}, {:.4}]", b.ber, b.ci.0, b.ci.1)
}

/// Per-symbol (and pooled, as the last entry) BER of the first configured
/// demodulator at the decision time nearest `t`.
pub fn ber_at(run: &ScenarioRun, t: f64) -> Vec<SymbolBer> {
    let p = run.result.curves[0].at(t).expect("non-empty curve");
    p.per_symbol.iter().cloned().chain(std::iter::once(p.pooled.clone())).collect()
}

/// `a`'s interval lies entirely at or below `b`'s.
pub fn separated(a: &SymbolBer, b: &SymbolBer) -> bool {
    a.ci.1 <= b.ci.0
}

/// Runs a preset and writes its artifacts and `report.json`.
pub fn repro_figure(name: &str, opts: &PresetOptions) -> Result<PresetReport, Error> {
    let claims = match name {
        "fig5-6" => fig5_6(opts)?,
        "fig8" => fig8(opts)?,
        "fig9" => fig9(opts)?,
        "fig10" => voxel_counts(opts, 10, "fig10")?,
        "fig11" => voxel_counts(opts, 0, "fig11")?,
        "fig12-13" => fig12_13(opts)?,
        "fig13b" => fig13b(opts)?,
        "fig14-15" => fig14_15(opts)?,
        "fig17" => fig17(opts)?,
        other => return Err(ConfigError::UnknownPreset(other.to_string()).into()),
    };
    let report = PresetReport::new(name, opts, claims);
    save_report(opts, &report)?;
    Ok(report)
}

/// Approximate-vs-optimal claims for one line scenario.
pub fn line_claims(run: &ScenarioRun, mixed: bool) -> Vec<Claim> {
    let approx = run.result.curves[0].demod;
    let last = run.decision_times.len() - 1;
    let agree = run.agreement(approx, DemodKind::Optimal, last).unwrap_or(f64::NAN);
    let need = if mixed { 0.90 } else { 0.95 };
    let dev = run.optimal_deviation.clone().unwrap_or_default();
    let worst = dev.iter().flatten().fold(0.0_f64, |a, &b| a.max(b));
    let label = if mixed { "mixed" } else { "partitioned" };
    vec![
        Claim::new(
            format!("{label}: final decisions agree"),
            agree >= need,
            format!("agreement {agree:.4} (need >= {need})"),
        ),
        Claim::new(
            format!("{label}: conditional mean tracks the reference"),
            worst <= 0.25,
            format!("time-averaged relative deviation per [k][p] {dev:.4?}, worst {worst:.4} (need <= 0.25)"),
        ),
    ]
}

fn fig5_6(opts: &PresetOptions) -> Result<Vec<Claim>, Error> {
    let mut claims = Vec::new();
    for mixed in [false, true] {
        let cfg = line_scenario(mixed);
        let name = cfg.name.clone();
        let run = run_variant(opts, cfg, &name)?;
        claims.extend(line_claims(&run, mixed));
    }
    Ok(claims)
}

/// Ordering claims for BER at `t` across the runs of a sweep, per symbol.
pub fn ordering_claims(runs: &[(f64, ScenarioRun)], t: f64, need_separation: bool) -> Vec<Claim> {
    let k = runs[0].1.result.curves[0].points[0].per_symbol.len();
    (0..k)
        .map(|s| {
            let b: Vec<SymbolBer> = runs.iter().map(|(_, r)| ber_at(r, t)[s].clone()).collect();
            let ordered = b.windows(2).all(|w| w[0].ber <= w[1].ber);
            let apart = b.windows(2).any(|w| separated(&w[0], &w[1]));
            let detail = runs
                .iter()
                .zip(&b)
                .map(|((x, _), b)| format!("{x}: {}", fmt_ber(b)))
                .collect::<Vec<_>>()
                .join("; ");
            let passed = ordered && (apart || !need_separation);
            Claim::new(format!("symbol {s}: BER non-decreasing at t = {t} s"), passed, detail)
        })
        .collect()
}

pub fn fig8_runs(opts: &PresetOptions) -> Result<Vec<(f64, ScenarioRun)>, Error> {
    [0.0, 0.5, 1.0]
        .into_iter()
        .map(|d_r| Ok((d_r, run_variant(opts, corner_scenario(d_r), &format!("dr{d_r}"))?)))
        .collect()
}

fn fig8(opts: &PresetOptions) -> Result<Vec<Claim>, Error> {
    Ok(ordering_claims(&fig8_runs(opts)?, 2.5, true))
}

/// Spearman correlation between the sweep parameter and BER at `t`, per symbol.
pub fn spearman_claims(runs: &[(f64, ScenarioRun)], t: f64, need: f64) -> Vec<Claim> {
    let k = runs[0].1.result.curves[0].points[0].per_symbol.len();
    let xs: Vec<f64> = runs.iter().map(|(x, _)| *x).collect();
    (0..k)
        .map(|s| {
            let ys: Vec<f64> = runs.iter().map(|(_, r)| ber_at(r, t)[s].ber).collect();
            let rho = spearman(&xs, &ys);
            Claim::new(
                format!("symbol {s}: BER rises with d_r"),
                rho >= need,
                format!("spearman {rho:.4} (need >= {need}); BER {ys:.4?}"),
            )
        })
        .collect()
}

pub fn fig9_runs(opts: &PresetOptions) -> Result<Vec<(f64, ScenarioRun)>, Error> {
    (0..=10)
        .map(|i| {
            let d_r = i as f64 / 10.0;
            Ok((d_r, run_variant(opts, corner_scenario(d_r), &format!("dr{d_r}"))?))
        })
        .collect()
}

fn fig9(opts: &PresetOptions) -> Result<Vec<Claim>, Error> {
    Ok(spearman_claims(&fig9_runs(opts)?, 2.5, 0.9))
}

/// Runs 2, 4 and 6 receiver voxels with `receptors` each, or with 60 in
/// total when `receptors` is 0.
pub fn voxel_count_runs(opts: &PresetOptions, receptors: u32) -> Result<Vec<(f64, ScenarioRun)>, Error> {
    [2usize, 4, 6]
        .into_iter()
        .map(|n| {
            let m = if receptors == 0 { 60 / n as u32 } else { receptors };
            let run = run_variant(opts, voxel_count_scenario(n, m), &format!("voxels{n}"))?;
            Ok((n as f64, run))
        })
        .collect()
}

/// BER with more voxels lies below BER with fewer, beyond the intervals, at
/// time `t` (pooled over symbols).
pub fn voxel_count_claims(runs: &[(f64, ScenarioRun)], t: f64) -> Vec<Claim> {
    let pooled: Vec<SymbolBer> = runs.iter().map(|(_, r)| ber_at(r, t).last().cloned().expect("pooled")).collect();
    let detail = runs
        .iter()
        .zip(&pooled)
        .map(|((n, _), b)| format!("{n} voxels: {}", fmt_ber(b)))
        .collect::<Vec<_>>()
        .join("; ");
    let last = pooled.len() - 1;
    vec![
        Claim::new(
            format!("6 voxels beat 2 beyond CI at t = {t} s"),
            pooled[last].ci.1 < pooled[0].ci.0,
            detail.clone(),
        ),
        Claim::new(
            format!("BER(6) <= BER(4) <= BER(2) at t = {t} s"),
            pooled.windows(2).all(|w| w[1].ber <= w[0].ber),
            detail,
        ),
    ]
}

fn voxel_counts(opts: &PresetOptions, receptors: u32, _name: &str) -> Result<Vec<Claim>, Error> {
    Ok(voxel_count_claims(&voxel_count_runs(opts, receptors)?, 2.5))
}

fn fig12_13(opts: &PresetOptions) -> Result<Vec<Claim>, Error> {
    let runs: Vec<(f64, ScenarioRun)> = [0.0, 0.5, 1.0]
        .into_iter()
        .map(|d_r| Ok((d_r, run_variant(opts, two_site_scenario(d_r), &format!("dr{d_r}"))?)))
        .collect::<Result<_, Error>>()?;
    let pooled: Vec<SymbolBer> = runs.iter().map(|(_, r)| ber_at(r, 2.5).last().cloned().expect("pooled")).collect();
    let detail = runs
        .iter()
        .zip(&pooled)
        .map(|((d, _), b)| format!("d_r {d}: {}", fmt_ber(b)))
        .collect::<Vec<_>>()
        .join("; ");
    Ok(vec![
        Claim::new(
            "receiver is informative at t = 2.5 s",
            pooled[0].ci.1 < 0.5,
            format!("d_r 0: {} (need upper bound < 0.5)", fmt_ber(&pooled[0])),
        ),
        Claim::new(
            "pooled BER non-decreasing in d_r at t = 2.5 s",
            pooled.windows(2).all(|w| w[0].ber <= w[1].ber),
            detail,
        ),
    ])
}

pub const VOXEL_SIZE_TIMES: [f64; 5] = [0.5, 1.0, 1.5, 2.0, 2.5];

pub fn fig13b_runs(opts: &PresetOptions, diffusion: f64) -> Result<(ScenarioRun, ScenarioRun), Error> {
    let coarse = run_variant(opts, voxel_size_scenario(false, diffusion), &format!("D{diffusion}-coarse"))?;
    let fine = run_variant(opts, voxel_size_scenario(true, diffusion), &format!("D{diffusion}-fine"))?;
    Ok((coarse, fine))
}

/// Coarse and fine curves overlap within their intervals at every sampled
/// time, per symbol.
pub fn voxel_size_claim(diffusion: f64, coarse: &ScenarioRun, fine: &ScenarioRun) -> Claim {
    let mut ok = true;
    let mut detail = Vec::new();
    for &t in &VOXEL_SIZE_TIMES {
        let (a, b) = (ber_at(coarse, t), ber_at(fine, t));
        for s in 0..a.len() - 1 {
            let overlap = intervals_overlap(a[s].ci, b[s].ci);
            ok &= overlap;
            detail.push(format!("t {t} k {s}: {} vs {}", fmt_ber(&a[s]), fmt_ber(&b[s])));
        }
    }
    Claim::new(format!("D = {diffusion}: edge 1/3 and 1/6 agree"), ok, detail.join("; "))
}

fn fig13b(opts: &PresetOptions) -> Result<Vec<Claim>, Error> {
    [1.0, 2.0]
        .into_iter()
        .map(|d| {
            let (c, f) = fig13b_runs(opts, d)?;
            Ok(voxel_size_claim(d, &c, &f))
        })
        .collect()
}

/// LNA predictions next to SSA statistics of the same filter.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LnaComparison {
    pub d_r: f64,
    pub times: Vec<f64>,
    /// `[tx][k][time]`.
    pub lna_mean: Vec<Vec<Vec<f64>>>,
    pub lna_var: Vec<Vec<Vec<f64>>>,
    pub ssa_mean: Vec<Vec<Vec<f64>>>,
    pub ssa_var: Vec<Vec<Vec<f64>>>,
    /// `[time]`, averaged over the two symbols.
    pub lna_ber: Vec<f64>,
    pub ssa_ber: Vec<SymbolBer>,
    pub n_runs: usize,
}

impl LnaComparison {
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t_s,tx,k,lna_mean,ssa_mean,lna_var,ssa_var")?;
        for tx in 0..self.lna_mean.len() {
            for k in 0..self.lna_mean[tx].len() {
                for (i, t) in self.times.iter().enumerate() {
                    writeln!(
                        out,
                        "{t:.3},{tx},{k},{:.9e},{:.9e},{:.9e},{:.9e}",
                        self.lna_mean[tx][k][i], self.ssa_mean[tx][k][i], self.lna_var[tx][k][i], self.ssa_var[tx][k][i]
                    )?;
                }
            }
        }
        Ok(())
    }

    pub fn write_ber_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t_s,lna_ber,ssa_ber,ci_lo,ci_hi,n")?;
        for (t, (l, s)) in self.times.iter().zip(self.lna_ber.iter().zip(&self.ssa_ber)) {
            writeln!(out, "{t:.3},{l:.6},{:.6},{:.6},{:.6},{}", s.ber, s.ci.0, s.ci.1, s.trials)?;
        }
        Ok(())
    }
}

/// LNA moments and BER for both symbols of the cube scenario.
pub fn lna_results(d_r: f64) -> Result<Vec<LnaResult>, Error> {
    let cfg = cube_scenario(d_r);
    let model = cfg.build_model()?;
    let filter = if d_r == 0.0 { LnaFilter::Partitioned } else { LnaFilter::Mixed };
    let opts = LnaOptions {
        filter,
        ..Default::default()
    };
    (0..2)
        .map(|tx| Ok(z_moments_and_ber(&model, tx, cfg.run.t_end, &opts)?))
        .collect()
}

fn nearest(grid: &[f64], t: f64) -> usize {
    grid.iter()
        .enumerate()
        .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
        .map_or(0, |(i, _)| i)
}

/// Runs the approximate filter driven by the LNA mean surrogates on `n_runs`
/// SSA replicates per symbol and compares Z moments and BER with the LNA.
pub fn lna_vs_ssa(d_r: f64, n_runs: usize, seed: u64, times: &[f64]) -> Result<LnaComparison, Error> {
    let cfg = cube_scenario(d_r);
    let model = cfg.build_model()?;
    let lna = lna_results(d_r)?;
    let refs = ReferenceSet {
        dt: lna[0].times[1] - lna[0].times[0],
        t_end: *lna[0].times.last().expect("non-empty"),
        n_runs: 0,
        seed: 0,
        alpha: lna[0].surrogate_references(RefKind::Alpha)?,
        beta: lna[0].surrogate_references(RefKind::Beta)?,
    };
    let filter = if d_r == 0.0 {
        ApproxFilter::partitioned(&model, &refs)?
    } else {
        ApproxFilter::mixed(&model, &refs)?
    };
    let kk = model.symbol_count();
    let idx: Vec<usize> = times.iter().map(|&t| nearest(&lna[0].times, t)).collect();
    let mut out = LnaComparison {
        d_r,
        times: times.to_vec(),
        lna_mean: Vec::new(),
        lna_var: Vec::new(),
        ssa_mean: Vec::new(),
        ssa_var: Vec::new(),
        lna_ber: idx.iter().map(|&i| lna.iter().map(|r| r.ber[i]).sum::<f64>() / lna.len() as f64).collect(),
        ssa_ber: Vec::new(),
        n_runs,
    };
    let mut acc = BerAccumulator::new(times, kk);
    for (tx, res) in lna.iter().enumerate() {
        out.lna_mean.push((0..kk).map(|k| idx.iter().map(|&i| res.z_mean[k][i]).collect()).collect());
        out.lna_var
            .push((0..kk).map(|k| idx.iter().map(|&i| res.z_cov[i][k * kk + k]).collect()).collect());
        let sim = Simulator::new(&model, tx, SsaMethod::Direct)?;
        let base = ber_seed(seed, tx);
        let zs: Vec<Vec<Vec<f64>>> = (0..n_runs as u64)
            .into_par_iter()
            .map(|i| -> Result<_, Error> {
                let obs = sim.observe(cfg.run.t_end, ReplicateSeed::new(base, i))?;
                Ok(filter.run(&obs, times)?.z)
            })
            .collect::<Result<_, _>>()?;
        for z in &zs {
            let d: Vec<usize> = (0..times.len())
                .map(|i| crate::demod::decide(&z.iter().map(|zk| zk[i]).collect::<Vec<_>>()))
                .collect();
            acc.add(tx, &d);
        }
        let n = zs.len() as f64;
        let mut mean = vec![vec![0.0; times.len()]; kk];
        let mut var = vec![vec![0.0; times.len()]; kk];
        for k in 0..kk {
            for i in 0..times.len() {
                let m = zs.iter().map(|z| z[k][i]).sum::<f64>() / n;
                mean[k][i] = m;
                var[k][i] = zs.iter().map(|z| (z[k][i] - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            }
        }
        out.ssa_mean.push(mean);
        out.ssa_var.push(var);
    }
    out.ssa_ber = acc.finish().into_iter().map(|p| p.pooled).collect();
    Ok(out)
}

/// Z moments within 5 % (mean) and 10 % (variance) of the SSA statistics.
pub fn lna_moment_claim(c: &LnaComparison) -> Claim {
    let mut ok = true;
    let mut worst = (0.0_f64, 0.0_f64);
    for tx in 0..c.lna_mean.len() {
        for k in 0..c.lna_mean[tx].len() {
            for i in 0..c.times.len() {
                let em = (c.lna_mean[tx][k][i] - c.ssa_mean[tx][k][i]).abs() / c.ssa_mean[tx][k][i].abs();
                let ev = (c.lna_var[tx][k][i] - c.ssa_var[tx][k][i]).abs() / c.ssa_var[tx][k][i].abs();
                ok &= em <= 0.05 && ev <= 0.10;
                worst = (worst.0.max(em), worst.1.max(ev));
            }
        }
    }
    Claim::new(
        format!("d_r = {}: LNA Z moments match SSA", c.d_r),
        ok,
        format!(
            "worst relative error: mean {:.4} (need <= 0.05), variance {:.4} (need <= 0.10), {} runs/symbol",
            worst.0, worst.1, c.n_runs
        ),
    )
}

/// LNA BER within `max(0.02, 2 × CI half-width)` of the SSA estimate.
pub fn lna_ber_claim(c: &LnaComparison) -> Claim {
    let mut ok = true;
    let mut detail = Vec::new();
    for (i, t) in c.times.iter().enumerate() {
        let s = &c.ssa_ber[i];
        let tol = 0.02_f64.max(s.ci.1 - s.ci.0);
        let err = (c.lna_ber[i] - s.ber).abs();
        ok &= err <= tol;
        detail.push(format!("t {t}: lna {:.4} vs ssa {}", c.lna_ber[i], fmt_ber(s)));
    }
    Claim::new(format!("d_r = {}: LNA BER matches SSA", c.d_r), ok, detail.join("; "))
}

pub fn lna_times() -> Vec<f64> {
    (15..=20).map(f64::from).collect()
}

fn write_lna(dir: &Path, c: &LnaComparison, lna: &[LnaResult]) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    let mut buf = Vec::new();
    c.write_csv(&mut buf)?;
    std::fs::write(dir.join("z_moments.csv"), &buf)?;
    buf.clear();
    c.write_ber_csv(&mut buf)?;
    std::fs::write(dir.join("ber.csv"), &buf)?;
    for r in lna {
        buf.clear();
        r.write_csv(&mut buf)?;
        std::fs::write(dir.join(format!("lna_tx{}.csv", r.transmitted)), &buf)?;
    }
    Ok(())
}

fn fig14_15(opts: &PresetOptions) -> Result<Vec<Claim>, Error> {
    let mut claims = Vec::new();
    for d_r in [0.0, 0.1, 0.2] {
        let c = lna_vs_ssa(d_r, opts.runs(LNA_SSA_RUNS), opts.seed, &lna_times())?;
        if let Some(dir) = &opts.out_dir {
            write_lna(&dir.join(format!("dr{d_r}")), &c, &lna_results(d_r)?)?;
        }
        if d_r == 0.2 {
            claims.push(lna_moment_claim(&c));
        }
        claims.push(lna_ber_claim(&c));
    }
    Ok(claims)
}

pub const ORACLE_TIMES: [f64; 8] = [2.5, 5.0, 7.5, 10.0, 12.5, 15.0, 17.5, 20.0];

/// Partitioned cube at `d_r = 0` and the mixed cube with the activation
/// oracle at each of `d_rs`.
pub fn fig17_runs(opts: &PresetOptions, d_rs: &[f64]) -> Result<(ScenarioRun, Vec<(f64, ScenarioRun)>), Error> {
    let base = run_variant(opts, cube_scenario(0.0), "dr0")?;
    let mixed = d_rs
        .iter()
        .map(|&d_r| {
            let mut cfg = cube_scenario(d_r);
            cfg.run.demodulators = vec![DemodKind::MixedOracle];
            Ok((d_r, run_variant(opts, cfg, &format!("dr{d_r}-oracle"))?))
        })
        .collect::<Result<_, Error>>()?;
    Ok((base, mixed))
}

pub fn oracle_claims(base: &ScenarioRun, mixed: &[(f64, ScenarioRun)]) -> Vec<Claim> {
    mixed
        .iter()
        .map(|(d_r, run)| {
            let mut ok = true;
            let mut detail = Vec::new();
            for &t in &ORACLE_TIMES {
                let b = ber_at(base, t).pop().expect("pooled");
                let m = ber_at(run, t).pop().expect("pooled");
                ok &= b.ci.0 <= m.ber && m.ber <= b.ci.1;
                detail.push(format!("t {t}: oracle {:.4} vs partitioned {}", m.ber, fmt_ber(&b)));
            }
            Claim::new(
                format!("d_r = {d_r}: oracle mixed BER within partitioned CI"),
                ok,
                detail.join("; "),
            )
        })
        .collect()
}

fn fig17(opts: &PresetOptions) -> Result<Vec<Claim>, Error> {
    let (base, mixed) = fig17_runs(opts, &[0.1, 0.2])?;
    Ok(oracle_claims(&base, &mixed))
}
