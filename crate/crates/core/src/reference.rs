//! Symbol-conditional reference signals used as the approximate filters'
//! internal models: `α_{k,p}(t) = E[N_{R,p}(t) | k]` and the mean of the
//! activation reactant product, `β_{k,p}(t) = E[X_p(t) N_{R,p}(t) | k]`.
//!
//! Signals live on a uniform grid and are read back as piecewise-linear
//! interpolants, so integrals between events are exact.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::ReferenceError;
use crate::model::SystemModel;
use crate::ssa::{replicate_map, Observer, SsaMethod, Simulator};
use crate::statespace::activation_reactants;

/// Default reference grid step.
pub const DEFAULT_DT_REF: f64 = 0.01;
/// Default number of Monte Carlo replicates per symbol.
pub const DEFAULT_REF_RUNS: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefKind {
    /// Mean signalling count in the receiver voxel.
    Alpha,
    /// Mean product of the activation channel's reactant counts.
    Beta,
}

impl RefKind {
    pub fn label(self) -> &'static str {
        match self {
            RefKind::Alpha => "alpha",
            RefKind::Beta => "beta",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReferenceSignal {
    pub kind: RefKind,
    pub symbol: usize,
    /// Receiver index `p`.
    pub voxel: usize,
    pub dt: f64,
    pub values: Vec<f64>,
    /// Standard error of each grid value (zero for analytic signals).
    pub se: Vec<f64>,
    pub n_runs: usize,
    pub seed: u64,
    /// Running integral at each grid point.
    #[serde(skip)]
    cumulative: Vec<f64>,
}

impl ReferenceSignal {
    /// Wraps grid values computed elsewhere (CME oracle, LNA means, ...).
    pub fn from_values(kind: RefKind, symbol: usize, voxel: usize, dt: f64, values: Vec<f64>) -> Result<Self, ReferenceError> {
        let n = values.len();
        Self::with_errors(kind, symbol, voxel, dt, values, vec![0.0; n], 0, 0)
    }

    #[allow(clippy::too_many_arguments)]
    fn with_errors(
        kind: RefKind,
        symbol: usize,
        voxel: usize,
        dt: f64,
        values: Vec<f64>,
        se: Vec<f64>,
        n_runs: usize,
        seed: u64,
    ) -> Result<Self, ReferenceError> {
        if values.is_empty() || !(dt > 0.0 && dt.is_finite()) {
            return Err(ReferenceError::EmptyGrid);
        }
        let mut s = Self {
            kind,
            symbol,
            voxel,
            dt,
            values,
            se,
            n_runs,
            seed,
            cumulative: Vec::new(),
        };
        s.rebuild_cumulative();
        Ok(s)
    }

    fn rebuild_cumulative(&mut self) {
        let mut acc = 0.0;
        self.cumulative = Vec::with_capacity(self.values.len());
        self.cumulative.push(0.0);
        for w in self.values.windows(2) {
            acc += 0.5 * self.dt * (w[0] + w[1]);
            self.cumulative.push(acc);
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn t_end(&self) -> f64 {
        (self.values.len() - 1) as f64 * self.dt
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    fn segment(&self, t: f64) -> (usize, f64) {
        let last = self.values.len() - 1;
        if t <= 0.0 || last == 0 {
            return (0, 0.0);
        }
        let x = t / self.dt;
        let i = (x.floor() as usize).min(last);
        if i == last {
            return (last, 0.0);
        }
        (i, x - i as f64)
    }

    /// Interpolated value; held constant past the last grid point.
    pub fn value_at(&self, t: f64) -> f64 {
        let (i, f) = self.segment(t);
        if f == 0.0 {
            return self.values[i];
        }
        self.values[i] + f * (self.values[i + 1] - self.values[i])
    }

    /// `∫₀ᵗ` of the interpolant.
    pub fn integral_to(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let (i, f) = self.segment(t);
        let base = self.cumulative[i];
        if f == 0.0 {
            let extra = t - self.time(i);
            return base + extra.max(0.0) * self.values[i];
        }
        let h = f * self.dt;
        let v = self.values[i] + f * (self.values[i + 1] - self.values[i]);
        base + 0.5 * h * (self.values[i] + v)
    }

    /// `∫ₐᵇ` of the interpolant.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        self.integral_to(b) - self.integral_to(a)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t_s,{},se", self.kind.label())?;
        for (i, (v, se)) in self.values.iter().zip(&self.se).enumerate() {
            writeln!(out, "{:.6},{:.9e},{:.9e}", self.time(i), v, se)?;
        }
        Ok(())
    }
}

/// All reference signals of a model: `alpha[k][p]` and `beta[k][p]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReferenceSet {
    pub dt: f64,
    pub t_end: f64,
    pub n_runs: usize,
    pub seed: u64,
    pub alpha: Vec<Vec<ReferenceSignal>>,
    pub beta: Vec<Vec<ReferenceSignal>>,
}

impl ReferenceSet {
    pub fn get(&self, kind: RefKind) -> &[Vec<ReferenceSignal>] {
        match kind {
            RefKind::Alpha => &self.alpha,
            RefKind::Beta => &self.beta,
        }
    }
}

/// Uniform grid `0, dt, ..., t_end` (the last point snapped to `t_end`).
pub fn uniform_grid(t_end: f64, dt: f64) -> Result<Vec<f64>, ReferenceError> {
    if !(dt > 0.0 && t_end >= 0.0 && t_end.is_finite()) {
        return Err(ReferenceError::EmptyGrid);
    }
    let n = (t_end / dt + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| i as f64 * dt).collect())
}

/// Base seed for the replicates of symbol `k`.
pub fn symbol_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_add((k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Samples several state functionals on a shared grid (right-continuous).
struct MultiSampler<'a> {
    times: &'a [f64],
    next: usize,
    signal: &'a [usize],
    products: &'a [Vec<usize>],
    /// `[grid][2p]` = signal, `[grid][2p + 1]` = product.
    values: Vec<f64>,
}

impl MultiSampler<'_> {
    fn fill(&mut self, time: f64, counts: &[u32], inclusive: bool) {
        while self.next < self.times.len()
            && (self.times[self.next] < time || (inclusive && self.times[self.next] <= time))
        {
            for (p, &c) in self.signal.iter().enumerate() {
                self.values.push(counts[c] as f64);
                self.values
                    .push(self.products[p].iter().map(|&r| counts[r] as f64).product());
            }
            self.next += 1;
        }
    }
}

impl Observer for MultiSampler<'_> {
    fn before_event(&mut self, time: f64, counts: &[u32]) {
        self.fill(time, counts, false);
    }
    fn finish(&mut self, t_end: f64, counts: &[u32]) {
        self.fill(t_end, counts, true);
        self.fill(f64::INFINITY, counts, true);
    }
}

/// Monte Carlo estimate of both reference kinds for every symbol and receiver.
pub fn estimate_references(
    model: &SystemModel,
    t_end: f64,
    dt: f64,
    n_runs: usize,
    seed: u64,
) -> Result<ReferenceSet, ReferenceError> {
    let grid = uniform_grid(t_end, dt)?;
    let mut alpha = Vec::with_capacity(model.symbol_count());
    let mut beta = Vec::with_capacity(model.symbol_count());
    for k in 0..model.symbol_count() {
        let (a, b) = estimate_symbol(model, k, &grid, dt, n_runs, seed)?;
        alpha.push(a);
        beta.push(b);
    }
    Ok(ReferenceSet {
        dt,
        t_end: grid[grid.len() - 1],
        n_runs,
        seed,
        alpha,
        beta,
    })
}

type SignalPair = (Vec<ReferenceSignal>, Vec<ReferenceSignal>);

fn estimate_symbol(
    model: &SystemModel,
    k: usize,
    grid: &[f64],
    dt: f64,
    n_runs: usize,
    seed: u64,
) -> Result<SignalPair, ReferenceError> {
    let n_rx = model.receiver_count();
    let signal: Vec<usize> = (0..n_rx).map(|p| model.receiver_signal_coord(p)).collect();
    let products = (0..n_rx)
        .map(|p| activation_reactants(model, p))
        .collect::<Result<Vec<_>, _>>()?;
    let method = if model.grid().voxel_count() > 200 { SsaMethod::SumTree } else { SsaMethod::Direct };
    let t_end = grid[grid.len() - 1];
    let sim = Simulator::new(model, k, method)?;
    let width = 2 * n_rx;
    let runs = replicate_map(n_runs, symbol_seed(seed, k), |rs| {
        let mut obs = MultiSampler {
            times: grid,
            next: 0,
            signal: &signal,
            products: &products,
            values: Vec::with_capacity(grid.len() * width),
        };
        sim.run_with(t_end.max(f64::MIN_POSITIVE), rs, &mut obs)?;
        Ok(obs.values)
    })?;
    let n = n_runs as f64;
    let mut sum = vec![0.0; grid.len() * width];
    let mut sq = vec![0.0; grid.len() * width];
    for r in &runs {
        for (i, v) in r.iter().enumerate() {
            sum[i] += v;
            sq[i] += v * v;
        }
    }
    let mut ak = Vec::with_capacity(n_rx);
    let mut bk = Vec::with_capacity(n_rx);
    for p in 0..n_rx {
        for (which, dst, kind) in [(0, &mut ak, RefKind::Alpha), (1, &mut bk, RefKind::Beta)] {
            let mut values = Vec::with_capacity(grid.len());
            let mut se = Vec::with_capacity(grid.len());
            for g in 0..grid.len() {
                let i = g * width + 2 * p + which;
                let m = sum[i] / n;
                let var = if n_runs > 1 { ((sq[i] - n * m * m) / (n - 1.0)).max(0.0) } else { 0.0 };
                values.push(m);
                se.push((var / n).sqrt());
            }
            dst.push(ReferenceSignal::with_errors(kind, k, p, dt, values, se, n_runs, seed)?);
        }
    }
    Ok((ak, bk))
}

/// `α_{k,p}` for every receiver `p`.
pub fn estimate_alpha(
    model: &SystemModel,
    k: usize,
    t_end: f64,
    dt: f64,
    n_runs: usize,
    seed: u64,
) -> Result<Vec<ReferenceSignal>, ReferenceError> {
    single_kind(model, k, t_end, dt, n_runs, seed, RefKind::Alpha)
}

/// `β_{k,p}` for every receiver `p`.
pub fn estimate_beta(
    model: &SystemModel,
    k: usize,
    t_end: f64,
    dt: f64,
    n_runs: usize,
    seed: u64,
) -> Result<Vec<ReferenceSignal>, ReferenceError> {
    single_kind(model, k, t_end, dt, n_runs, seed, RefKind::Beta)
}

fn single_kind(
    model: &SystemModel,
    k: usize,
    t_end: f64,
    dt: f64,
    n_runs: usize,
    seed: u64,
    kind: RefKind,
) -> Result<Vec<ReferenceSignal>, ReferenceError> {
    model.symbol(k)?;
    let grid = uniform_grid(t_end, dt)?;
    let (a, b) = estimate_symbol(model, k, &grid, dt, n_runs, seed)?;
    Ok(match kind {
        RefKind::Alpha => a,
        RefKind::Beta => b,
    })
}

/// On-disk cache of reference sets keyed by scenario hash and Monte Carlo
/// settings. One CSV file per signal with a `#` header.
pub struct ReferenceCache {
    dir: PathBuf,
}

impl ReferenceCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn path(&self, hash: &str, kind: RefKind, k: usize, p: usize, n_runs: usize, seed: u64) -> PathBuf {
        let short = &hash[..hash.len().min(16)];
        self.dir
            .join(format!("{short}_{}_k{k}_p{p}_n{n_runs}_s{seed}.csv", kind.label()))
    }

    /// Loads the cached set or estimates and stores it.
    pub fn load_or_estimate(
        &self,
        model: &SystemModel,
        scenario_hash: &str,
        t_end: f64,
        dt: f64,
        n_runs: usize,
        seed: u64,
    ) -> Result<ReferenceSet, ReferenceError> {
        if let Some(set) = self.load(model, scenario_hash, t_end, dt, n_runs, seed)? {
            return Ok(set);
        }
        let set = estimate_references(model, t_end, dt, n_runs, seed)?;
        self.store(scenario_hash, &set)?;
        Ok(set)
    }

    pub fn store(&self, scenario_hash: &str, set: &ReferenceSet) -> Result<(), ReferenceError> {
        std::fs::create_dir_all(&self.dir)?;
        for kind in [RefKind::Alpha, RefKind::Beta] {
            for sigs in set.get(kind) {
                for s in sigs {
                    let path = self.path(scenario_hash, kind, s.symbol, s.voxel, set.n_runs, set.seed);
                    let mut text = String::new();
                    let _ = writeln!(
                        text,
                        "# scenario={scenario_hash} kind={} k={} p={} dt={} t_end={} n_runs={} seed={}",
                        kind.label(),
                        s.symbol,
                        s.voxel,
                        s.dt,
                        set.t_end,
                        set.n_runs,
                        set.seed
                    );
                    let mut body = Vec::new();
                    s.write_csv(&mut body)?;
                    text.push_str(&String::from_utf8_lossy(&body));
                    let tmp = path.with_extension("tmp");
                    std::fs::write(&tmp, text)?;
                    std::fs::rename(&tmp, &path)?;
                }
            }
        }
        Ok(())
    }

    pub fn load(
        &self,
        model: &SystemModel,
        scenario_hash: &str,
        t_end: f64,
        dt: f64,
        n_runs: usize,
        seed: u64,
    ) -> Result<Option<ReferenceSet>, ReferenceError> {
        let mut alpha = Vec::new();
        let mut beta = Vec::new();
        for k in 0..model.symbol_count() {
            let mut ak = Vec::new();
            let mut bk = Vec::new();
            for p in 0..model.receiver_count() {
                for (kind, dst) in [(RefKind::Alpha, &mut ak), (RefKind::Beta, &mut bk)] {
                    let path = self.path(scenario_hash, kind, k, p, n_runs, seed);
                    if !path.exists() {
                        return Ok(None);
                    }
                    let sig = read_signal(&path, kind, k, p, n_runs, seed)?;
                    if sig.1 != scenario_hash {
                        return Err(ReferenceError::Cache(format!(
                            "{} belongs to scenario {}, expected {scenario_hash}",
                            path.display(),
                            sig.1
                        )));
                    }
                    let header_ok = (sig.0.dt - dt).abs() < 1e-12 && (sig.2 - t_end).abs() < dt;
                    if !header_ok {
                        return Ok(None);
                    }
                    dst.push(sig.0);
                }
            }
            alpha.push(ak);
            beta.push(bk);
        }
        let t_end = alpha
            .first()
            .and_then(|a: &Vec<ReferenceSignal>| a.first())
            .map_or(t_end, |s| s.t_end());
        Ok(Some(ReferenceSet {
            dt,
            t_end,
            n_runs,
            seed,
            alpha,
            beta,
        }))
    }
}

fn read_signal(
    path: &Path,
    kind: RefKind,
    k: usize,
    p: usize,
    n_runs: usize,
    seed: u64,
) -> Result<(ReferenceSignal, String, f64), ReferenceError> {
    let bad = |m: &str| ReferenceError::Cache(format!("{}: {m}", path.display()));
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file"))?;
    let field = |name: &str| -> Option<&str> {
        header
            .split_whitespace()
            .find_map(|kv| kv.strip_prefix(name).and_then(|r| r.strip_prefix('=')))
    };
    let scenario = field("scenario").ok_or_else(|| bad("missing scenario"))?.to_string();
    let dt: f64 = field("dt").and_then(|v| v.parse().ok()).ok_or_else(|| bad("missing dt"))?;
    let t_end: f64 = field("t_end").and_then(|v| v.parse().ok()).ok_or_else(|| bad("missing t_end"))?;
    lines.next().ok_or_else(|| bad("missing column header"))?;
    let mut values = Vec::new();
    let mut se = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(bad("expected three columns"));
        }
        values.push(cols[1].parse::<f64>().map_err(|_| bad("bad value"))?);
        se.push(cols[2].parse::<f64>().map_err(|_| bad("bad standard error"))?);
    }
    let sig = ReferenceSignal::with_errors(kind, k, p, dt, values, se, n_runs, seed)?;
    Ok((sig, scenario, t_end))
}

#[cfg(test)]
mod tests;
