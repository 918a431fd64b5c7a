//! Optimal Bayes filter for the log-posteriori `L_k(t)` given the exact
//! output-species histories of all receiver voxels.
//!
//! The unnormalized conditional law of the hidden state is propagated under
//! the channels that leave every output count unchanged, discounted by the
//! propensities of the output-changing channels. At an observed jump the mass
//! is pushed through the matching channel(s) and renormalized.
//!
//! `L_k` keeps only symbol-dependent terms. Each output-changing propensity
//! factors into an observed part (constant and counts of observed species) and
//! a hidden part; channels whose hidden part is identically 1 (deactivation,
//! output hopping) contribute the same to every hypothesis and are dropped,
//! and a jump through a single channel adds `log E[hidden part]`. For the
//! activation–deactivation circuit this gives exactly
//! `Σ_p [dX*_p]₊ log E[N_{R,p}|k,·] − g₊ (M_p − X*_p) E[N_{R,p}|k,·]` in the
//! partitioned case and `A_p log E[X_p N_{R,p}|k,·] − g₊ E[X_p N_{R,p}|k,·]`
//! in the mixed case.

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

use super::{
    activation_reactants, breakpoints, build_generator, closure, expectation, shifted, within_cap,
    Generator, Role, StateSet, Truncation,
};
use crate::error::{SimError, StateSpaceError};
use crate::model::{Channel, SystemModel};
use crate::ode::{Dopri, DopriOptions};
use crate::ssa::ObservationStream;

/// Which receiver species the filter treats as known.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterMode {
    /// Receiver species never move, so every receiver count follows from the
    /// observed outputs.
    Partitioned,
    /// Only the output species are observed.
    Mixed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimalFilterOutput {
    /// Hypothesis `k` the filter was run under.
    pub symbol: usize,
    pub times: Vec<f64>,
    /// `L_k` at each report time (starts at `log prior_k`).
    pub log_posterior: Vec<f64>,
    /// `E[N_{R,p} | k, history]`, indexed `[p][time]`.
    pub cond_signal: Vec<Vec<f64>>,
    /// Conditional mean of receiver `p`'s activation reactant product
    /// (`E[X_p N_{R,p} | k, history]`).
    pub cond_product: Vec<Vec<f64>>,
    pub leakage: f64,
    pub max_states: usize,
    /// Largest `|Σπ − 1|` seen right after an observed jump.
    pub max_normalization_error: f64,
    pub events_processed: usize,
}

struct Space {
    set: StateSet,
    gen: Generator,
}

const CACHE_LIMIT: usize = 64;

/// Reusable optimal filter for one hypothesis. Spaces and generators are
/// cached across runs, keyed by emission segment and observed counts.
pub struct OptimalFilter<'m> {
    model: &'m SystemModel,
    k: usize,
    trunc: Truncation,
    channels: Vec<Channel>,
    roles: Vec<Role>,
    observed: Vec<bool>,
    out_sig: Vec<Vec<(usize, i32)>>,
    bps: Vec<(f64, Vec<(usize, u32)>)>,
    products: Vec<Vec<usize>>,
    stride: usize,
    n_signal: usize,
    cache: FxHashMap<(usize, Vec<u32>), Rc<Space>>,
    dopri: Dopri,
}

impl<'m> OptimalFilter<'m> {
    pub fn new(model: &'m SystemModel, k: usize, mode: FilterMode, trunc: Truncation) -> Result<Self, StateSpaceError> {
        let channels = model.channels_for(k)?;
        let n_rx = model.receiver_count();
        let n_signal = model.grid().voxel_count();
        let stride = model.coord_count();
        let mut observed = vec![false; stride];
        for p in 0..n_rx {
            observed[model.output_coord(p)] = true;
            if mode == FilterMode::Partitioned {
                for j in 0..model.receiver_species_count() {
                    observed[model.receiver_coord(p, j)] = true;
                }
            }
        }
        let out_sig: Vec<Vec<(usize, i32)>> = channels
            .iter()
            .map(|c| {
                (0..n_rx)
                    .filter_map(|p| {
                        let oc = model.output_coord(p);
                        let d: i32 = c.delta.iter().filter(|(x, _)| *x == oc).map(|(_, d)| d).sum();
                        (d != 0).then_some((p, d))
                    })
                    .collect()
            })
            .collect();
        let roles = channels
            .iter()
            .zip(&out_sig)
            .map(|(c, sig)| {
                if sig.is_empty() {
                    Role::Hidden
                } else if c.reactants.iter().any(|&r| !observed[r]) {
                    Role::Killing
                } else {
                    Role::Skip
                }
            })
            .collect();
        let products = (0..n_rx)
            .map(|p| activation_reactants(model, p))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            model,
            k,
            trunc,
            bps: breakpoints(model, k)?,
            channels,
            roles,
            observed,
            out_sig,
            products,
            stride,
            n_signal,
            cache: FxHashMap::default(),
            dopri: Dopri::new(DopriOptions::default()),
        })
    }

    fn observed_key(&self, s: &[u32]) -> Vec<u32> {
        s.iter()
            .zip(&self.observed)
            .filter(|(_, &o)| o)
            .map(|(&v, _)| v)
            .collect()
    }

    /// Closed space containing `seeds` for emission segment `seg`.
    fn space_for(&mut self, seg: usize, seeds: &[(Vec<u32>, f64)], t: f64) -> Result<Rc<Space>, StateSpaceError> {
        let key = (seg, self.observed_key(&seeds[0].0));
        if let Some(sp) = self.cache.get(&key) {
            if seeds.iter().all(|(s, _)| sp.set.find(s).is_some()) {
                return Ok(Rc::clone(sp));
            }
        }
        let set = closure(
            seeds.iter().map(|(s, _)| s.as_slice()),
            self.stride,
            &self.channels,
            &self.roles,
            t,
            self.n_signal,
            &self.trunc,
        )?;
        // Everything marked observed must really be constant on the support.
        let first = set.state(0).to_vec();
        for i in 1..set.len() {
            let s = set.state(i);
            if s.iter().zip(&first).zip(&self.observed).any(|((a, b), &o)| o && a != b) {
                return Err(StateSpaceError::Unsupported(
                    "receiver species vary under unobserved dynamics; use the mixed filter".into(),
                ));
            }
        }
        let gen = build_generator(&set, &self.channels, &self.roles, t, self.n_signal, self.trunc.n_max);
        let sp = Rc::new(Space { set, gen });
        if self.cache.len() >= CACHE_LIMIT {
            self.cache.clear();
        }
        self.cache.insert(key, Rc::clone(&sp));
        Ok(sp)
    }

    fn place(&self, sp: &Space, seeds: &[(Vec<u32>, f64)]) -> Vec<f64> {
        let mut rho = vec![0.0; sp.set.len()];
        for (s, w) in seeds {
            rho[sp.set.find(s).expect("seed in space")] += w;
        }
        rho
    }

    /// Runs the filter over `obs`, reporting at `report_times` (sorted).
    pub fn run(&mut self, obs: &ObservationStream, report_times: &[f64]) -> Result<OptimalFilterOutput, StateSpaceError> {
        if obs.model_fingerprint != self.model.fingerprint() {
            return Err(SimError::ModelMismatch.into());
        }
        if let Some(&last) = report_times.last() {
            if last > obs.t_end + 1e-9 {
                return Err(StateSpaceError::Unsupported(format!(
                    "report time {last} s lies beyond the observation horizon {} s",
                    obs.t_end
                )));
            }
        }
        let model = self.model;
        let n_rx = model.receiver_count();
        let prior = model.priors()[self.k];
        let mut out = OptimalFilterOutput {
            symbol: self.k,
            times: report_times.to_vec(),
            log_posterior: Vec::with_capacity(report_times.len()),
            cond_signal: vec![Vec::with_capacity(report_times.len()); n_rx],
            cond_product: vec![Vec::with_capacity(report_times.len()); n_rx],
            leakage: 0.0,
            max_states: 0,
            max_normalization_error: 0.0,
            events_processed: 0,
        };
        let mut l = prior.ln();
        let mut leak = 0.0;
        let mut t = 0.0;
        let mut seg = 0usize;
        let mut bp = 0usize;
        let mut ev = 0usize;

        let mut seeds = vec![(model.initial_state().to_vec(), 1.0)];
        while bp < self.bps.len() && self.bps[bp].0 <= 0.0 {
            seeds = self.burst(&seeds, bp, &mut leak);
            bp += 1;
            seg += 1;
        }
        let mut sp = self.space_for(seg, &seeds, t)?;
        let mut rho = self.place(&sp, &seeds);
        out.max_states = sp.set.len();
        let mut y: Vec<f64> = Vec::new();
        self.dopri.step = None;

        for (ri, &target) in report_times.iter().enumerate() {
            loop {
                let next_bp = self.bps.get(bp).map_or(f64::INFINITY, |b| b.0);
                let next_ev = obs.events.get(ev).map_or(f64::INFINITY, |e| e.time);
                let stop = target.min(next_bp).min(next_ev);
                if stop > t {
                    // Drift: survival under the killing channels.
                    y.clear();
                    y.extend_from_slice(&rho);
                    y.push(0.0);
                    let gen = &sp.gen;
                    let n = gen.dim();
                    self.dopri.integrate(
                        |_, y, dy| {
                            dy[n] = gen.apply(&y[..n], &mut dy[..n]);
                        },
                        t,
                        stop,
                        &mut y,
                    )?;
                    let mass: f64 = y[..n].iter().map(|v| v.max(0.0)).sum();
                    if !(mass > 0.0 && mass.is_finite()) {
                        return Err(StateSpaceError::NonFinite(stop));
                    }
                    leak += y[n].max(0.0) / (mass + y[n].max(0.0));
                    l += mass.ln();
                    for (r, v) in rho.iter_mut().zip(&y[..n]) {
                        *r = v.max(0.0) / mass;
                    }
                    t = stop;
                }
                if next_bp <= stop && next_bp <= next_ev {
                    let cur = self.weights(&sp, &rho);
                    let seeds = self.burst(&cur, bp, &mut leak);
                    bp += 1;
                    seg += 1;
                    sp = self.space_for(seg, &seeds, t)?;
                    rho = self.place(&sp, &seeds);
                    out.max_states = out.max_states.max(sp.set.len());
                    continue;
                }
                if next_ev <= stop {
                    let event = &obs.events[ev];
                    let (inc, seeds) = self.jump(&sp, &rho, &event.changes, event.time, &mut leak)?;
                    l += inc;
                    ev += 1;
                    out.events_processed += 1;
                    sp = self.space_for(seg, &seeds, t)?;
                    rho = self.place(&sp, &seeds);
                    let total: f64 = rho.iter().sum();
                    out.max_normalization_error = out.max_normalization_error.max((total - 1.0).abs());
                    out.max_states = out.max_states.max(sp.set.len());
                    continue;
                }
                break;
            }
            debug_assert!((t - target).abs() < 1e-12 || ri == 0 && target == 0.0);
            out.log_posterior.push(l);
            for p in 0..n_rx {
                let nr = model.receiver_signal_coord(p);
                out.cond_signal[p].push(expectation(&sp.set, &rho, |s| s[nr] as f64));
                let prod = &self.products[p];
                out.cond_product[p].push(expectation(&sp.set, &rho, |s| prod.iter().map(|&c| s[c] as f64).product()));
            }
        }
        if leak > self.trunc.leak_tol {
            return Err(StateSpaceError::Leakage {
                leak,
                tol: self.trunc.leak_tol,
            });
        }
        out.leakage = leak;
        Ok(out)
    }

    fn weights(&self, sp: &Space, rho: &[f64]) -> Vec<(Vec<u32>, f64)> {
        (0..sp.set.len())
            .filter(|&i| rho[i] > 0.0)
            .map(|i| (sp.set.state(i).to_vec(), rho[i]))
            .collect()
    }

    fn burst(&self, cur: &[(Vec<u32>, f64)], bp: usize, leak: &mut f64) -> Vec<(Vec<u32>, f64)> {
        let delta: Vec<(usize, i32)> = self.bps[bp].1.iter().map(|&(c, n)| (c, n as i32)).collect();
        let mut next = Vec::with_capacity(self.stride);
        let mut outv = Vec::with_capacity(cur.len());
        for (s, w) in cur {
            shifted(s, &delta, &mut next);
            if within_cap(&next, self.n_signal, self.trunc.n_max) {
                outv.push((next.clone(), *w));
            } else {
                *leak += w;
            }
        }
        let total: f64 = outv.iter().map(|x| x.1).sum();
        if total > 0.0 {
            for x in &mut outv {
                x.1 /= total;
            }
        }
        outv
    }

    /// Conditions on an observed joint output change; returns the
    /// log-likelihood increment and the normalized post-jump weights.
    fn jump(
        &self,
        sp: &Space,
        rho: &[f64],
        changes: &[(usize, i32)],
        time: f64,
        leak: &mut f64,
    ) -> Result<(f64, Vec<(Vec<u32>, f64)>), StateSpaceError> {
        let matching: Vec<usize> = (0..self.channels.len())
            .filter(|&c| self.roles[c] != Role::Hidden && self.out_sig[c] == changes && self.channels[c].is_active(time))
            .collect();
        if matching.is_empty() {
            return Err(StateSpaceError::ImpossibleObservation { time });
        }
        let mut acc: FxHashMap<Vec<u32>, f64> = FxHashMap::default();
        let mut order: Vec<Vec<u32>> = Vec::new();
        let mut total = 0.0;
        let mut lost = 0.0;
        let mut next = Vec::with_capacity(self.stride);
        for i in 0..sp.set.len() {
            if rho[i] <= 0.0 {
                continue;
            }
            let s = sp.set.state(i);
            for &c in &matching {
                let ch = &self.channels[c];
                let a = ch.propensity(s) * rho[i];
                if a <= 0.0 || !shifted(s, &ch.delta, &mut next) {
                    continue;
                }
                total += a;
                if !within_cap(&next, self.n_signal, self.trunc.n_max) {
                    lost += a;
                    continue;
                }
                match acc.get_mut(&next) {
                    Some(w) => *w += a,
                    None => {
                        acc.insert(next.clone(), a);
                        order.push(next.clone());
                    }
                }
            }
        }
        if !(total > 0.0) {
            return Err(StateSpaceError::ImpossibleObservation { time });
        }
        *leak += lost / total;
        let kept = total - lost;
        let seeds: Vec<(Vec<u32>, f64)> = order
            .into_iter()
            .map(|s| {
                let w = acc[&s] / kept;
                (s, w)
            })
            .collect();
        let inc = if matching.len() == 1 {
            let ch = &self.channels[matching[0]];
            let s0 = sp.set.state(0);
            let f_obs: f64 = ch.constant
                * ch.reactants
                    .iter()
                    .filter(|&&r| self.observed[r])
                    .map(|&r| s0[r] as f64)
                    .product::<f64>();
            (total / f_obs).ln()
        } else {
            total.ln()
        };
        Ok((inc, seeds))
    }
}

/// One-shot optimal filter run for hypothesis `k`.
pub fn bayes_filter_optimal(
    model: &SystemModel,
    obs: &ObservationStream,
    k: usize,
    mode: FilterMode,
    trunc: Truncation,
    report_times: &[f64],
) -> Result<OptimalFilterOutput, StateSpaceError> {
    OptimalFilter::new(model, k, mode, trunc)?.run(obs, report_times)
}
