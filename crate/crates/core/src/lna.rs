//! Linear noise approximation of the reaction–diffusion system and the
//! Gaussian bit-error-rate prediction built on it.
//!
//! Concentrations are counts divided by the voxel volume `V`. Every channel
//! with propensity constant `c` and order `m` has concentration rate constant
//! `ĉ = c·V^(m−1)`, so its concentration rate is `ĉ Π x_r` and its propensity
//! is `V` times that. Counts are modelled as `V x̄ + √V x̃`, where the
//! fluctuation `x̃` obeys `dx̃ = A x̃ dt + B dW` with one noise column per
//! channel.
//!
//! For the BER the state is augmented with the filter accumulators `Z_k`,
//! whose jump term is replaced by the mean up-jump rate of the output species
//! plus its linearized fluctuation and the shot noise of the same channels.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::demod::LOG_FLOOR;
use crate::error::LnaError;
use crate::model::{ChannelKind, SystemModel};
use crate::ode::{rk4_step, Rk4Work};
use crate::reference::{RefKind, ReferenceSignal};
use crate::statespace::activation_channel;
use crate::stats::phi;

/// Default fixed integrator step.
pub const DEFAULT_LNA_STEP: f64 = 1e-3;
const MAX_HALVINGS: usize = 20;

/// Which approximate filter the predicted `Z_k` belong to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LnaFilter {
    /// References `α = V n̄_R`, drift weight `X_p`.
    Partitioned,
    /// References from the product-rule surrogate for `β`, unit drift weight.
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LnaOptions {
    pub filter: LnaFilter,
    /// Fixed RK4 step.
    pub step: f64,
    /// Spacing of the reported grid (a multiple of `step` is advisable).
    pub report_dt: f64,
}

impl Default for LnaOptions {
    fn default() -> Self {
        Self {
            filter: LnaFilter::Mixed,
            step: DEFAULT_LNA_STEP,
            report_dt: 0.01,
        }
    }
}

/// Channel in concentration units.
#[derive(Clone, Debug, PartialEq)]
pub struct LnaChannel {
    pub label: String,
    pub k_hat: f64,
    pub reactants: Vec<usize>,
    pub delta: Vec<(usize, f64)>,
    pub window: Option<(f64, f64)>,
}

impl LnaChannel {
    fn active(&self, t: f64) -> bool {
        self.window.is_none_or(|(s, e)| t >= s && t < e)
    }

    fn rate(&self, x: &[f64], t: f64) -> f64 {
        if !self.active(t) {
            return 0.0;
        }
        self.k_hat * self.reactants.iter().map(|&r| x[r]).product::<f64>()
    }

    /// `∂rate/∂x_{reactants[i]}`.
    fn partial(&self, x: &[f64], t: f64, i: usize) -> f64 {
        if !self.active(t) {
            return 0.0;
        }
        let mut v = self.k_hat;
        for (j, &r) in self.reactants.iter().enumerate() {
            if j != i {
                v *= x[r];
            }
        }
        v
    }
}

#[derive(Clone, Debug)]
struct SymbolSystem {
    channels: Vec<LnaChannel>,
    /// `(time, species, concentration jump)`.
    bursts: Vec<(f64, usize, f64)>,
    /// Channels increasing the output species of each receiver.
    up: Vec<Vec<usize>>,
}

/// Drift matrix and noise loading at one instant.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

/// Mean-field and noise structure of a model, assembled from its channels.
#[derive(Clone, Debug)]
pub struct LnaSystem {
    pub volume: f64,
    pub labels: Vec<String>,
    pub initial: Vec<f64>,
    symbols: Vec<SymbolSystem>,
    signal: Vec<usize>,
    receptor: Vec<usize>,
    products: Vec<Vec<usize>>,
    forward: Vec<f64>,
}

impl LnaSystem {
    pub fn new(model: &SystemModel) -> Result<Self, LnaError> {
        let v = model.volume();
        let n = model.coord_count();
        let n_rx = model.receiver_count();
        let unsupported = |e: crate::error::StateSpaceError| LnaError::Unsupported(e.to_string());
        let mut symbols = Vec::with_capacity(model.symbol_count());
        for k in 0..model.symbol_count() {
            let chans = model
                .channels_for(k)
                .map_err(|e| LnaError::Unsupported(e.to_string()))?;
            let channels: Vec<LnaChannel> = chans
                .iter()
                .map(|c| LnaChannel {
                    label: channel_label(model, &c.kind),
                    k_hat: c.constant * v.powi(c.reactants.len() as i32 - 1),
                    reactants: c.reactants.clone(),
                    delta: c.delta.iter().map(|&(s, d)| (s, d as f64)).collect(),
                    window: c.window,
                })
                .collect();
            let up = (0..n_rx)
                .map(|p| {
                    let oc = model.output_coord(p);
                    (0..channels.len())
                        .filter(|&c| channels[c].delta.iter().any(|&(s, d)| s == oc && d > 0.0))
                        .collect()
                })
                .collect();
            let sym = model.symbol(k).map_err(|e| LnaError::Unsupported(e.to_string()))?;
            let bursts = sym
                .bursts
                .iter()
                .map(|b| (b.time, b.coord, b.count as f64 / v))
                .collect();
            symbols.push(SymbolSystem { channels, bursts, up });
        }
        let circuit = model.circuit();
        Ok(Self {
            volume: v,
            labels: (0..n).map(|c| model.coord_label(c)).collect(),
            initial: model.initial_state().iter().map(|&c| c as f64 / v).collect(),
            symbols,
            signal: (0..n_rx).map(|p| model.receiver_signal_coord(p)).collect(),
            receptor: (0..n_rx).map(|p| model.receiver_coord(p, circuit.receptor)).collect(),
            products: (0..n_rx)
                .map(|p| activation_channel(model, p).map(|c| c.reactants.clone()))
                .collect::<Result<_, _>>()
                .map_err(unsupported)?,
            forward: (0..n_rx)
                .map(|p| activation_channel(model, p).map(|c| c.constant))
                .collect::<Result<_, _>>()
                .map_err(unsupported)?,
        })
    }

    pub fn species_count(&self) -> usize {
        self.initial.len()
    }

    pub fn symbol_count(&self) -> usize {
        self.symbols.len()
    }

    pub fn receiver_count(&self) -> usize {
        self.signal.len()
    }

    pub fn channels(&self, k: usize) -> &[LnaChannel] {
        &self.symbols[k].channels
    }

    /// Stoichiometry matrix (species × channels) under symbol `k`.
    pub fn stoichiometry(&self, k: usize) -> DMatrix<f64> {
        let ch = &self.symbols[k].channels;
        let mut s = DMatrix::zeros(self.species_count(), ch.len());
        for (c, chan) in ch.iter().enumerate() {
            for &(i, d) in &chan.delta {
                s[(i, c)] += d;
            }
        }
        s
    }

    /// Concentration rate of every channel.
    pub fn rates(&self, k: usize, x: &[f64], t: f64) -> Vec<f64> {
        self.symbols[k].channels.iter().map(|c| c.rate(x, t)).collect()
    }

    /// `dx̄/dt = S · rates(x̄)`.
    pub fn mean_drift(&self, k: usize, x: &[f64], t: f64, dx: &mut [f64]) {
        dx.fill(0.0);
        for c in &self.symbols[k].channels {
            let a = c.rate(x, t);
            if a != 0.0 {
                for &(i, d) in &c.delta {
                    dx[i] += d * a;
                }
            }
        }
    }

    /// Jacobian of the mean flow and the per-channel noise loading at `x̄`.
    pub fn noise_system(&self, k: usize, x: &[f64], t: f64) -> Result<NoiseSystem, LnaError> {
        let n = self.species_count();
        let ch = &self.symbols[k].channels;
        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, ch.len());
        for (c, chan) in ch.iter().enumerate() {
            for (i, &r) in chan.reactants.iter().enumerate() {
                let g = chan.partial(x, t, i);
                if g != 0.0 {
                    for &(s, d) in &chan.delta {
                        a[(s, r)] += d * g;
                    }
                }
            }
            let rate = chan.rate(x, t);
            if rate < -1e-12 {
                return Err(LnaError::NegativeRate { channel: c, rate });
            }
            let sq = rate.max(0.0).sqrt();
            for &(s, d) in &chan.delta {
                b[(s, c)] += d * sq;
            }
        }
        Ok(NoiseSystem { a, b })
    }

    fn product_count(&self, p: usize, x: &[f64]) -> f64 {
        self.products[p].iter().map(|&r| self.volume * x[r]).product()
    }
}

fn channel_label(model: &SystemModel, kind: &ChannelKind) -> String {
    let s = |c: usize| model.coord_label(c);
    match *kind {
        ChannelKind::SignalDiffusion { from, to } => format!("diffuse {}->{}", s(from), s(to)),
        ChannelKind::BoundaryAbsorb { voxel, .. } => format!("absorb {}", s(voxel)),
        ChannelKind::Activation { receiver } => format!("activate r{receiver}"),
        ChannelKind::Deactivation { receiver } => format!("deactivate r{receiver}"),
        ChannelKind::ReceiverDiffusion { species, from, to } => format!("hop species {species} r{from}->r{to}"),
        ChannelKind::Emission { voxel } => format!("emit {}", s(voxel)),
        ChannelKind::CircuitOther { receiver } => format!("circuit r{receiver}"),
    }
}

/// Means, covariances and predicted BER on the report grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LnaResult {
    pub filter: LnaFilter,
    pub transmitted: usize,
    pub times: Vec<f64>,
    pub labels: Vec<String>,
    /// Mean counts `V x̄` under the transmitted symbol, `[species][time]`.
    pub mean_counts: Vec<Vec<f64>>,
    /// Count variances `V Σ_ii`, `[species][time]`.
    pub var_counts: Vec<Vec<f64>>,
    /// `E[Z_k]`, `[k][time]`.
    pub z_mean: Vec<Vec<f64>>,
    /// `Cov(Z_j, Z_k)` flattened row-major per time.
    pub z_cov: Vec<Vec<f64>>,
    /// `[k][p][time]` analytic `α` and `β` surrogates.
    pub alpha: Vec<Vec<Vec<f64>>>,
    pub beta: Vec<Vec<Vec<f64>>>,
    /// Predicted error probability for the transmitted symbol (`K = 2`).
    pub ber: Vec<f64>,
    /// Smallest eigenvalue of the count covariance over the run.
    pub min_eigenvalue: f64,
}

impl LnaResult {
    /// Index of `label` in the species list.
    pub fn species(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Analytic reference signals usable by the approximate filters.
    pub fn surrogate_references(&self, kind: RefKind) -> Result<Vec<Vec<ReferenceSignal>>, crate::error::ReferenceError> {
        let src = match kind {
            RefKind::Alpha => &self.alpha,
            RefKind::Beta => &self.beta,
        };
        let dt = if self.times.len() > 1 { self.times[1] - self.times[0] } else { 1.0 };
        src.iter()
            .enumerate()
            .map(|(k, per_p)| {
                per_p
                    .iter()
                    .enumerate()
                    .map(|(p, v)| ReferenceSignal::from_values(kind, k, p, dt, v.clone()))
                    .collect()
            })
            .collect()
    }

    /// Columns `t`, then mean and variance per species, then `E[Z_k]`, BER.
    /// Species headers are quoted since voxel labels contain commas.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut header = String::from("t_s");
        for l in &self.labels {
            header.push_str(&format!(",\"mean[{l}]\",\"var[{l}]\""));
        }
        for k in 0..self.z_mean.len() {
            header.push_str(&format!(",EZ_{k}"));
        }
        writeln!(out, "{header},ber")?;
        for (i, t) in self.times.iter().enumerate() {
            write!(out, "{t:.6}")?;
            for s in 0..self.labels.len() {
                write!(out, ",{:.9e},{:.9e}", self.mean_counts[s][i], self.var_counts[s][i])?;
            }
            for z in &self.z_mean {
                write!(out, ",{:.9e}", z[i])?;
            }
            writeln!(out, ",{:.9e}", self.ber[i])?;
        }
        Ok(())
    }
}

/// Gaussian error probability for `Y = Z₀ − Z₁`.
pub fn gaussian_ber(mu_y: f64, sigma_y: f64, transmitted: usize) -> f64 {
    let signed = if transmitted == 0 { -mu_y } else { mu_y };
    if sigma_y > 0.0 {
        phi(signed / sigma_y)
    } else if mu_y == 0.0 {
        0.5
    } else if signed > 0.0 {
        1.0
    } else {
        0.0
    }
}

struct Layout {
    n: usize,
    p: usize,
    k: usize,
    m: usize,
}

impl Layout {
    fn x(&self, s: usize) -> usize {
        s * (self.n + self.p)
    }
    fn beta(&self, s: usize) -> usize {
        self.x(s) + self.n
    }
    fn z(&self) -> usize {
        self.k * (self.n + self.p)
    }
    fn cov(&self) -> usize {
        self.z() + self.k
    }
    fn len(&self, with_cov: bool) -> usize {
        self.cov() + if with_cov { self.m * self.m } else { 0 }
    }
}

struct Integrator<'a> {
    sys: &'a LnaSystem,
    filter: LnaFilter,
    tx: usize,
    with_cov: bool,
    lay: Layout,
}

impl Integrator<'_> {
    fn references(&self, y: &[f64]) -> Vec<Vec<f64>> {
        let lay = &self.lay;
        (0..lay.k)
            .map(|s| {
                (0..lay.p)
                    .map(|p| match self.filter {
                        LnaFilter::Partitioned => self.sys.volume * y[lay.x(s) + self.sys.signal[p]],
                        LnaFilter::Mixed => y[lay.beta(s) + p],
                    })
                    .collect()
            })
            .collect()
    }

    fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        let sys = self.sys;
        let lay = &self.lay;
        let (n, v) = (lay.n, sys.volume);
        dy.fill(0.0);
        for s in 0..lay.k {
            let x = &y[lay.x(s)..lay.x(s) + n];
            let (head, tail) = dy.split_at_mut(lay.beta(s));
            let dx = &mut head[lay.x(s)..];
            sys.mean_drift(s, x, t, dx);
            for p in 0..lay.p {
                let prod = &sys.products[p];
                let mut d = 0.0;
                for (i, &r) in prod.iter().enumerate() {
                    let mut term = v * dx[r];
                    for (j, &q) in prod.iter().enumerate() {
                        if j != i {
                            term *= v * x[q];
                        }
                    }
                    d += term;
                }
                tail[p] = d;
            }
        }

        let refs = self.references(y);
        let logs: Vec<Vec<f64>> = refs
            .iter()
            .map(|rs| rs.iter().map(|r| r.max(LOG_FLOOR).ln()).collect())
            .collect();
        let sym = &sys.symbols[self.tx];
        let x = &y[lay.x(self.tx)..lay.x(self.tx) + n];
        let rates: Vec<f64> = sym.channels.iter().map(|c| c.rate(x, t).max(0.0)).collect();
        for k in 0..lay.k {
            let mut m = 0.0;
            for p in 0..lay.p {
                let up: f64 = sym.up[p].iter().map(|&c| rates[c]).sum();
                let w = match self.filter {
                    LnaFilter::Partitioned => v * x[sys.receptor[p]],
                    LnaFilter::Mixed => 1.0,
                };
                m += logs[k][p] * v * up - sys.forward[p] * w * refs[k][p];
            }
            dy[lay.z() + k] = m;
        }
        if !self.with_cov {
            return;
        }

        let ns = sys.noise_system(self.tx, x, t).expect("rates clamped non-negative");
        let mm = lay.m;
        let c_count = sym.channels.len();
        let sv = v.sqrt();
        let mut f = DMatrix::zeros(mm, mm);
        f.view_mut((0, 0), (n, n)).copy_from(&ns.a);
        let mut l = DMatrix::zeros(mm, c_count);
        l.view_mut((0, 0), (n, c_count)).copy_from(&ns.b);
        for k in 0..lay.k {
            for p in 0..lay.p {
                let lk = logs[k][p];
                for &c in &sym.up[p] {
                    let chan = &sym.channels[c];
                    for (i, &r) in chan.reactants.iter().enumerate() {
                        f[(n + k, r)] += lk * sv * chan.partial(x, t, i);
                    }
                    l[(n + k, c)] += lk * sv * rates[c].sqrt();
                }
                if self.filter == LnaFilter::Partitioned {
                    f[(n + k, sys.receptor[p])] -= sys.forward[p] * refs[k][p] * sv;
                }
            }
        }
        let cov = DMatrix::from_column_slice(mm, mm, &y[lay.cov()..lay.cov() + mm * mm]);
        let fp = &f * &cov;
        let d = &fp + fp.transpose() + &l * l.transpose();
        dy[lay.cov()..].copy_from_slice(d.as_slice());
    }

    fn clean(&self, y: &mut [f64], t: f64) -> Result<(), LnaError> {
        let lay = &self.lay;
        for s in 0..lay.k {
            for v in &mut y[lay.x(s)..lay.x(s) + lay.n] {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        if self.with_cov {
            let mm = lay.m;
            let c = lay.cov();
            for i in 0..mm {
                for j in 0..i {
                    let a = 0.5 * (y[c + i * mm + j] + y[c + j * mm + i]);
                    y[c + i * mm + j] = a;
                    y[c + j * mm + i] = a;
                }
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(LnaError::NonFinite(t));
        }
        Ok(())
    }

    fn negative(&self, y: &[f64]) -> bool {
        let lay = &self.lay;
        (0..lay.k).any(|s| {
            let x = &y[lay.x(s)..lay.x(s) + lay.n];
            let scale = 1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            x.iter().any(|&v| v < -1e-9 * scale)
        })
    }

    /// One step of size `h`, halving on negative means.
    fn step(&self, t: f64, y: &mut [f64], h: f64, work: &mut Rk4Work) -> Result<(), LnaError> {
        let mut f = |t: f64, y: &[f64], dy: &mut [f64]| self.eval(t, y, dy);
        let start = y.to_vec();
        for halvings in 0..=MAX_HALVINGS {
            let pieces = 1usize << halvings;
            let hh = h / pieces as f64;
            y.copy_from_slice(&start);
            let mut ok = true;
            for i in 0..pieces {
                rk4_step(&mut f, t + i as f64 * hh, y, hh, work);
                if self.negative(y) {
                    ok = false;
                    break;
                }
                self.clean(y, t + (i + 1) as f64 * hh)?;
            }
            if ok {
                return Ok(());
            }
        }
        Err(LnaError::NegativeMean(MAX_HALVINGS))
    }

    fn apply_bursts(&self, y: &mut [f64], t: f64) {
        let lay = &self.lay;
        for s in 0..lay.k {
            let hits: Vec<&(f64, usize, f64)> = self.sys.symbols[s].bursts.iter().filter(|b| b.0 == t).collect();
            if hits.is_empty() {
                continue;
            }
            let before: Vec<f64> = {
                let x = &y[lay.x(s)..lay.x(s) + lay.n];
                (0..lay.p).map(|p| self.sys.product_count(p, x)).collect()
            };
            for b in hits {
                y[lay.x(s) + b.1] += b.2;
            }
            let x = y[lay.x(s)..lay.x(s) + lay.n].to_vec();
            for p in 0..lay.p {
                y[lay.beta(s) + p] += self.sys.product_count(p, &x) - before[p];
            }
        }
    }

    fn breakpoints(&self, t_end: f64) -> Vec<f64> {
        let mut b: Vec<f64> = Vec::new();
        for s in &self.sys.symbols {
            b.extend(s.bursts.iter().map(|x| x.0));
            for c in &s.channels {
                if let Some((a, e)) = c.window {
                    b.extend([a, e]);
                }
            }
        }
        b.retain(|&t| t > 0.0 && t < t_end && t.is_finite());
        b.sort_by(f64::total_cmp);
        b.dedup();
        b
    }
}

/// Runs the mean (and optionally covariance) system on `[0, t_end]`,
/// calling `record(t, y)` at every report time.
fn integrate(
    it: &Integrator,
    t_end: f64,
    opts: &LnaOptions,
    mut record: impl FnMut(f64, &[f64]),
) -> Result<(), LnaError> {
    if !(opts.step > 0.0 && opts.report_dt > 0.0 && t_end >= 0.0) {
        return Err(LnaError::Unsupported("step, report spacing and horizon must be positive".into()));
    }
    let lay = &it.lay;
    let mut y = vec![0.0; lay.len(it.with_cov)];
    for s in 0..lay.k {
        y[lay.x(s)..lay.x(s) + lay.n].copy_from_slice(&it.sys.initial);
        for p in 0..lay.p {
            y[lay.beta(s) + p] = it.sys.product_count(p, &it.sys.initial);
        }
    }
    it.apply_bursts(&mut y, 0.0);
    let n_reports = (t_end / opts.report_dt + 1e-9).floor() as usize;
    let reports: Vec<f64> = (0..=n_reports).map(|i| i as f64 * opts.report_dt).collect();
    let bps = it.breakpoints(t_end);
    let mut stops: Vec<(f64, bool)> = reports.iter().map(|&t| (t, true)).collect();
    stops.extend(bps.iter().map(|&t| (t, false)));
    stops.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));

    let mut work = Rk4Work::default();
    let mut t = 0.0;
    let mut bp_applied = 0usize;
    for (stop, is_report) in stops {
        if stop > t {
            let steps = ((stop - t) / opts.step - 1e-9).ceil().max(1.0) as usize;
            let h = (stop - t) / steps as f64;
            for i in 0..steps {
                it.step(t + i as f64 * h, &mut y, h, &mut work)?;
            }
            t = stop;
        }
        // Bursts fire after the report at the same instant is taken.
        if is_report {
            record(t, &y);
        } else if bp_applied < bps.len() && bps[bp_applied] == stop {
            it.apply_bursts(&mut y, stop);
            bp_applied += 1;
        }
    }
    Ok(())
}

/// Mean trajectories of symbol `k` with the `α` and `β` surrogates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeanTrajectory {
    pub times: Vec<f64>,
    pub labels: Vec<String>,
    /// Mean counts, `[species][time]`.
    pub mean_counts: Vec<Vec<f64>>,
    /// `[p][time]`.
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
}

/// Integrates the mean-concentration system of symbol `k`.
pub fn solve_mean_system(model: &SystemModel, k: usize, t_end: f64, opts: &LnaOptions) -> Result<MeanTrajectory, LnaError> {
    let sys = LnaSystem::new(model)?;
    if k >= sys.symbol_count() {
        return Err(LnaError::Unsupported(format!("symbol {k} out of range")));
    }
    let n = sys.species_count();
    let p = sys.receiver_count();
    let it = Integrator {
        sys: &sys,
        filter: opts.filter,
        tx: k,
        with_cov: false,
        lay: Layout { n, p, k: sys.symbol_count(), m: n + sys.symbol_count() },
    };
    let mut out = MeanTrajectory {
        times: Vec::new(),
        labels: sys.labels.clone(),
        mean_counts: vec![Vec::new(); n],
        alpha: vec![Vec::new(); p],
        beta: vec![Vec::new(); p],
    };
    integrate(&it, t_end, opts, |t, y| {
        out.times.push(t);
        let x = &y[it.lay.x(k)..it.lay.x(k) + n];
        for (s, v) in x.iter().enumerate() {
            out.mean_counts[s].push(sys.volume * v);
        }
        for q in 0..p {
            out.alpha[q].push(sys.volume * x[sys.signal[q]]);
            out.beta[q].push(y[it.lay.beta(k) + q]);
        }
    })?;
    Ok(out)
}

/// Means, covariances, `Z_k` moments and predicted BER for transmitted
/// symbol `tx`.
pub fn z_moments_and_ber(model: &SystemModel, tx: usize, t_end: f64, opts: &LnaOptions) -> Result<LnaResult, LnaError> {
    let sys = LnaSystem::new(model)?;
    let kk = sys.symbol_count();
    if kk != 2 {
        return Err(LnaError::Unsupported(format!("analytic BER needs K = 2, got {kk}")));
    }
    if tx >= kk {
        return Err(LnaError::Unsupported(format!("symbol {tx} out of range")));
    }
    let n = sys.species_count();
    let p = sys.receiver_count();
    let lay = Layout { n, p, k: kk, m: n + kk };
    let it = Integrator {
        sys: &sys,
        filter: opts.filter,
        tx,
        with_cov: true,
        lay,
    };
    let mut out = LnaResult {
        filter: opts.filter,
        transmitted: tx,
        times: Vec::new(),
        labels: sys.labels.clone(),
        mean_counts: vec![Vec::new(); n],
        var_counts: vec![Vec::new(); n],
        z_mean: vec![Vec::new(); kk],
        z_cov: Vec::new(),
        alpha: vec![vec![Vec::new(); p]; kk],
        beta: vec![vec![Vec::new(); p]; kk],
        ber: Vec::new(),
        min_eigenvalue: f64::INFINITY,
    };
    let lay = &it.lay;
    let mm = lay.m;
    let v = sys.volume;
    integrate(&it, t_end, opts, |t, y| {
        out.times.push(t);
        let x = &y[lay.x(tx)..lay.x(tx) + n];
        let cov = &y[lay.cov()..];
        for s in 0..n {
            out.mean_counts[s].push(v * x[s]);
            out.var_counts[s].push(v * cov[s * mm + s]);
        }
        let sub = DMatrix::from_fn(n, n, |i, j| v * cov[i * mm + j]);
        let eig = sub.symmetric_eigenvalues().iter().fold(f64::INFINITY, |m, &e| m.min(e));
        out.min_eigenvalue = out.min_eigenvalue.min(eig);
        let mut zc = Vec::with_capacity(kk * kk);
        for a in 0..kk {
            for b in 0..kk {
                zc.push(cov[(n + a) * mm + n + b]);
            }
        }
        for k in 0..kk {
            out.z_mean[k].push(y[lay.z() + k]);
            for q in 0..p {
                out.alpha[k][q].push(v * y[lay.x(k) + sys.signal[q]]);
                out.beta[k][q].push(y[lay.beta(k) + q]);
            }
        }
        let mu = y[lay.z()] - y[lay.z() + 1];
        let var = (zc[0] + zc[3] - 2.0 * zc[1]).max(0.0);
        out.ber.push(gaussian_ber(mu, var.sqrt(), tx));
        out.z_cov.push(zc);
    })?;
    Ok(out)
}

/// Integrates `dΣ/dt = AΣ + ΣAᵀ + BBᵀ` with fixed RK4 steps, returning `Σ`
/// at every time in `grid` (sorted, starting at 0).
pub fn solve_lyapunov<F>(system: F, sigma0: &DMatrix<f64>, grid: &[f64], step: f64) -> Result<Vec<DMatrix<f64>>, LnaError>
where
    F: Fn(f64) -> NoiseSystem,
{
    let n = sigma0.nrows();
    let mut y = sigma0.as_slice().to_vec();
    let mut work = Rk4Work::default();
    let mut f = |t: f64, y: &[f64], dy: &mut [f64]| {
        let ns = system(t);
        let s = DMatrix::from_column_slice(n, n, y);
        let a_s = &ns.a * &s;
        let d = &a_s + a_s.transpose() + &ns.b * ns.b.transpose();
        dy.copy_from_slice(d.as_slice());
    };
    let mut out = Vec::with_capacity(grid.len());
    let mut t = 0.0;
    for &stop in grid {
        if stop > t {
            let steps = ((stop - t) / step - 1e-9).ceil().max(1.0) as usize;
            let h = (stop - t) / steps as f64;
            for i in 0..steps {
                rk4_step(&mut f, t + i as f64 * h, &mut y, h, &mut work);
                for i in 0..n {
                    for j in 0..i {
                        let a = 0.5 * (y[i * n + j] + y[j * n + i]);
                        y[i * n + j] = a;
                        y[j * n + i] = a;
                    }
                }
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(LnaError::NonFinite(t + (i + 1) as f64 * h));
                }
            }
            t = stop;
        }
        out.push(DMatrix::from_column_slice(n, n, &y));
    }
    Ok(out)
}
