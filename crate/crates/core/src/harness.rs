//! Scenario runner: references, replicate ensembles, demodulation and BER
//! bookkeeping with CSV output.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demod::{
    decide, extract_activation_trains, ApproxFilter, BerAccumulator, BerPoint, DemodKind, DemodulatorOutput,
    TrainMode,
};
use crate::error::{DemodError, Error};
use crate::model::SystemModel;
use crate::reference::{estimate_references, symbol_seed, RefKind, ReferenceCache, ReferenceSet};
use crate::scenario::{ConfigurationKind, ScenarioConfig};
use crate::ssa::{ReplicateSeed, Simulator};
use crate::statespace::{FilterMode, OptimalFilter};

pub const ARTIFACT_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), "/", env!("CARGO_PKG_VERSION"));

/// Base seed of the BER ensemble for transmitted symbol `k`; kept apart from
/// the reference-signal streams derived from the same scenario seed.
pub fn ber_seed(seed: u64, k: usize) -> u64 {
    symbol_seed(seed ^ 0xB5E5_B5E5_0000_0000, k)
}

#[derive(Clone, Debug, Default)]
pub struct HarnessOptions {
    /// Where CSV artifacts go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Reference-signal cache directory.
    pub cache_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub scenario: String,
    pub scenario_hash: String,
    pub model_hash: String,
    pub seed: u64,
    pub ref_seed: u64,
    pub ber_seeds: Vec<u64>,
    pub n_runs_ber: usize,
    pub n_runs_ref: usize,
    pub version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BerCurve {
    pub demod: DemodKind,
    pub points: Vec<BerPoint>,
}

impl BerCurve {
    /// Index of the decision time closest to `t`.
    pub fn index_at(&self, t: f64) -> Option<usize> {
        self.points
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1.time - t).abs().total_cmp(&(b.1.time - t).abs()))
            .map(|(i, _)| i)
    }

    pub fn at(&self, t: f64) -> Option<&BerPoint> {
        self.index_at(t).map(|i| &self.points[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BerResult {
    pub provenance: Provenance,
    pub curves: Vec<BerCurve>,
}

impl BerResult {
    pub fn curve(&self, kind: DemodKind) -> Option<&BerCurve> {
        self.curves.iter().find(|c| c.demod == kind)
    }

    /// One row per demodulator, decision time and symbol (plus a pooled row).
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let p = &self.provenance;
        writeln!(out, "scenario_hash,seed,demod,t_s,symbol,errors,n,ber,ci_lo,ci_hi")?;
        let short = &p.scenario_hash[..16.min(p.scenario_hash.len())];
        for c in &self.curves {
            let demod = serde_json::to_value(c.demod).expect("demod label");
            let demod = demod.as_str().unwrap_or("?");
            for pt in &c.points {
                let rows = pt
                    .per_symbol
                    .iter()
                    .enumerate()
                    .map(|(k, s)| (k.to_string(), s))
                    .chain(std::iter::once(("pooled".to_string(), &pt.pooled)));
                for (label, s) in rows {
                    writeln!(
                        out,
                        "{short},{},{demod},{:.6},{label},{},{},{:.6},{:.6},{:.6}",
                        p.seed, pt.time, s.errors, s.trials, s.ber, s.ci.0, s.ci.1
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// Everything a scenario run produces.
#[derive(Clone, Debug)]
pub struct ScenarioRun {
    pub result: BerResult,
    pub decision_times: Vec<f64>,
    /// `decisions[demod][tx][replicate][time]`, demods in configuration order.
    pub decisions: Vec<Vec<Vec<Vec<usize>>>>,
    /// For the optimal filter, `[hypothesis][receiver]` ratio of the summed
    /// time integrals of |conditional mean − reference| and of the reference.
    pub optimal_deviation: Option<Vec<Vec<f64>>>,
    pub references: ReferenceSet,
}

impl ScenarioRun {
    /// Fraction of replicates where two demodulators agree at time index `i`.
    pub fn agreement(&self, a: DemodKind, b: DemodKind, i: usize) -> Option<f64> {
        let kinds = &self.result.curves;
        let ia = kinds.iter().position(|c| c.demod == a)?;
        let ib = kinds.iter().position(|c| c.demod == b)?;
        let (mut same, mut n) = (0usize, 0usize);
        for (ra, rb) in self.decisions[ia].iter().zip(&self.decisions[ib]) {
            for (da, db) in ra.iter().zip(rb) {
                n += 1;
                same += usize::from(da[i] == db[i]);
            }
        }
        (n > 0).then(|| same as f64 / n as f64)
    }
}

pub fn load_references(cfg: &ScenarioConfig, model: &SystemModel, opts: &HarnessOptions) -> Result<ReferenceSet, Error> {
    let r = &cfg.run;
    let set = match &opts.cache_dir {
        Some(dir) => ReferenceCache::new(dir).load_or_estimate(
            model,
            &cfg.model_hash(),
            r.t_end,
            r.dt_ref,
            r.n_runs_ref,
            r.seed,
        )?,
        None => estimate_references(model, r.t_end, r.dt_ref, r.n_runs_ref, r.seed)?,
    };
    Ok(set)
}

struct Replicate {
    /// `[demod][time]`.
    decisions: Vec<Vec<usize>>,
    samples: Vec<DemodulatorOutput>,
    /// `[hypothesis][receiver] = (∫|cond − ref|, ∫ref)`.
    deviation: Option<Vec<Vec<(f64, f64)>>>,
}

fn merged_grid(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = a.iter().chain(b).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup_by(|x, y| (*x - *y).abs() < 1e-9);
    all
}

fn trapezoid(times: &[f64], f: impl Fn(usize) -> f64) -> f64 {
    (1..times.len())
        .map(|i| 0.5 * (f(i) + f(i - 1)) * (times[i] - times[i - 1]))
        .sum()
}

/// Runs the configured ensembles and demodulators and, when an output
/// directory is given, writes `ber.csv`, `provenance.json`, `scenario.toml`
/// and any requested Z samples.
pub fn run_scenario(cfg: &ScenarioConfig, opts: &HarnessOptions) -> Result<ScenarioRun, Error> {
    cfg.validate()?;
    let model = cfg.build_model()?;
    let refs = load_references(cfg, &model, opts)?;
    run_with_references(cfg, &model, refs, opts)
}

/// As [`run_scenario`] with reference signals supplied by the caller.
pub fn run_with_references(
    cfg: &ScenarioConfig,
    model: &SystemModel,
    refs: ReferenceSet,
    opts: &HarnessOptions,
) -> Result<ScenarioRun, Error> {
    let run = &cfg.run;
    let k_count = model.symbol_count();
    let decision_times = cfg.decision_times();
    let demods = run.demodulators.clone();
    let want_optimal = demods.contains(&DemodKind::Optimal);
    let mode = match cfg.receiver.configuration {
        ConfigurationKind::Partitioned => FilterMode::Partitioned,
        ConfigurationKind::Mixed => FilterMode::Mixed,
    };
    let ref_grid: Vec<f64> = (0..refs.alpha[0][0].len()).map(|i| refs.alpha[0][0].time(i)).collect();
    let optimal_grid = if want_optimal {
        merged_grid(&decision_times, &ref_grid)
    } else {
        Vec::new()
    };
    let approx: Vec<Option<ApproxFilter<'_>>> = demods
        .iter()
        .map(|d| match d {
            DemodKind::PartitionedApprox => ApproxFilter::partitioned(model, &refs).map(Some),
            DemodKind::MixedApprox => ApproxFilter::mixed(model, &refs).map(Some),
            DemodKind::GenericApprox => ApproxFilter::generic(model, &refs).map(Some),
            DemodKind::MixedOracle => ApproxFilter::mixed_oracle(model, &refs).map(Some),
            DemodKind::Optimal => Ok(None),
        })
        .collect::<Result<_, DemodError>>()?;
    let trunc = cfg.truncation();
    let log_prior: Vec<f64> = model.priors().iter().map(|p| p.ln()).collect();
    let ref_kind = match mode {
        FilterMode::Partitioned => RefKind::Alpha,
        FilterMode::Mixed => RefKind::Beta,
    };

    let mut acc: Vec<BerAccumulator> = demods.iter().map(|_| BerAccumulator::new(&decision_times, k_count)).collect();
    let mut decisions = vec![Vec::with_capacity(k_count); demods.len()];
    let mut deviation = want_optimal.then(|| vec![vec![(0.0, 0.0); model.receiver_count()]; k_count]);
    let mut samples = Vec::new();
    let mut ber_seeds = Vec::with_capacity(k_count);

    for tx in 0..k_count {
        let sim = Simulator::new(model, tx, run.ssa)?;
        let base = ber_seed(run.seed, tx);
        ber_seeds.push(base);
        let reps: Vec<Replicate> = (0..run.n_runs_ber as u64)
            .into_par_iter()
            .map_init(
                || {
                    if want_optimal {
                        (0..k_count)
                            .map(|k| OptimalFilter::new(model, k, mode, trunc))
                            .collect::<Result<Vec<_>, _>>()
                            .map_err(Error::from)
                    } else {
                        Ok(Vec::new())
                    }
                },
                |filters, i| -> Result<Replicate, Error> {
                    let filters = filters.as_mut().map_err(|e| Error::Demod(DemodError::Unsupported(e.to_string())))?;
                    let obs = sim.observe(run.t_end, ReplicateSeed::new(base, i))?;
                    let keep = (i as usize) < run.z_samples;
                    let mut rep = Replicate {
                        decisions: Vec::with_capacity(demods.len()),
                        samples: Vec::new(),
                        deviation: None,
                    };
                    for (d, f) in demods.iter().zip(&approx) {
                        let (out, grid) = match (d, f) {
                            (DemodKind::MixedOracle, Some(f)) => {
                                let trains = extract_activation_trains(model, &obs, TrainMode::Oracle)?;
                                (f.run_with_trains(&obs, &trains, &decision_times)?, &decision_times)
                            }
                            (_, Some(f)) => (f.run(&obs, &decision_times)?, &decision_times),
                            (_, None) => {
                                let mut l = Vec::with_capacity(k_count);
                                let mut dev = vec![vec![(0.0, 0.0); model.receiver_count()]; k_count];
                                for (k, filter) in filters.iter_mut().enumerate() {
                                    let o = filter.run(&obs, &optimal_grid)?;
                                    for (p, slot) in dev[k].iter_mut().enumerate() {
                                        let reference = &refs.get(ref_kind)[k][p];
                                        let cond = match mode {
                                            FilterMode::Partitioned => &o.cond_signal[p],
                                            FilterMode::Mixed => &o.cond_product[p],
                                        };
                                        let r = |i: usize| reference.value_at(o.times[i]);
                                        slot.0 += trapezoid(&o.times, |i| (cond[i] - r(i)).abs());
                                        slot.1 += trapezoid(&o.times, r);
                                    }
                                    l.push(o.log_posterior.iter().map(|v| v + log_prior[k]).collect());
                                }
                                rep.deviation = Some(dev);
                                (DemodulatorOutput::from_log_posteriors(optimal_grid.clone(), l), &optimal_grid)
                            }
                        };
                        let row = decision_times
                            .iter()
                            .map(|&t| {
                                let i = grid.iter().position(|&s| (s - t).abs() < 1e-9).expect("decision time on grid");
                                let z: Vec<f64> = out.z.iter().map(|zk| zk[i]).collect();
                                decide(&z)
                            })
                            .collect();
                        rep.decisions.push(row);
                        if keep {
                            rep.samples.push(out);
                        }
                    }
                    Ok(rep)
                },
            )
            .collect::<Result<_, _>>()?;
        for (j, a) in acc.iter_mut().enumerate() {
            let mut per_tx = Vec::with_capacity(reps.len());
            for rep in &reps {
                a.add(tx, &rep.decisions[j]);
                per_tx.push(rep.decisions[j].clone());
            }
            decisions[j].push(per_tx);
        }
        if let Some(total) = deviation.as_mut() {
            for rep in &reps {
                for (tk, rk) in total.iter_mut().zip(rep.deviation.as_ref().expect("optimal ran")) {
                    for (t, r) in tk.iter_mut().zip(rk) {
                        t.0 += r.0;
                        t.1 += r.1;
                    }
                }
            }
        }
        for (i, rep) in reps.into_iter().enumerate().take(run.z_samples) {
            for out in rep.samples {
                samples.push((tx, i, out));
            }
        }
    }

    let result = BerResult {
        provenance: Provenance {
            scenario: cfg.name.clone(),
            scenario_hash: cfg.hash(),
            model_hash: cfg.model_hash(),
            seed: run.seed,
            ref_seed: run.seed,
            ber_seeds,
            n_runs_ber: run.n_runs_ber,
            n_runs_ref: refs.n_runs,
            version: ARTIFACT_VERSION.to_string(),
        },
        curves: demods
            .iter()
            .zip(&acc)
            .map(|(&demod, a)| BerCurve { demod, points: a.finish() })
            .collect(),
    };
    if let Some(dir) = &opts.out_dir {
        write_artifacts(dir, cfg, &result, &samples)?;
    }
    Ok(ScenarioRun {
        result,
        decision_times,
        decisions,
        optimal_deviation: deviation.map(|d| {
            d.into_iter()
                .map(|row| row.into_iter().map(|(num, den)| if den > 0.0 { num / den } else { f64::NAN }).collect())
                .collect()
        }),
        references: refs,
    })
}

fn write_artifacts(
    dir: &Path,
    cfg: &ScenarioConfig,
    result: &BerResult,
    samples: &[(usize, usize, DemodulatorOutput)],
) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    let mut buf = Vec::new();
    result.write_csv(&mut buf)?;
    std::fs::write(dir.join("ber.csv"), buf)?;
    let prov = serde_json::to_string_pretty(&result.provenance).expect("provenance serializes");
    std::fs::write(dir.join("provenance.json"), prov)?;
    std::fs::write(dir.join("scenario.toml"), cfg.to_toml_string())?;
    for (tx, i, out) in samples {
        let label = serde_json::to_value(out.kind).expect("demod label");
        let name = format!("z_{}_tx{tx}_r{i}.csv", label.as_str().unwrap_or("demod"));
        let mut buf = Vec::new();
        out.write_csv(&mut buf)?;
        std::fs::write(dir.join(name), buf)?;
    }
    Ok(())
}

/// Short human-readable summary of a BER result at a few decision times.
pub fn summarize(result: &BerResult, times: &[f64]) -> String {
    let mut s = String::new();
    for c in &result.curves {
        let _ = writeln!(s, "{:?}", c.demod);
        for &t in times {
            if let Some(p) = c.at(t) {
                let per: Vec<String> = p
                    .per_symbol
                    .iter()
                    .map(|b| format!("{:.4} [{:.4}, {:.4}]", b.ber, b.ci.0, b.ci.1))
                    .collect();
                let _ = writeln!(s, "  t = {:.2} s: {}", p.time, per.join("  "));
            }
        }
    }
    s
}
