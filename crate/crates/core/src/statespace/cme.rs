//! Exact transient solution of the truncated master equation.

use serde::{Deserialize, Serialize};

use super::{
    activation_reactants, breakpoints, build_generator, closure, expectation, shifted, within_cap,
    Generator, Role, StateSet, Truncation,
};
use crate::error::StateSpaceError;
use crate::model::SystemModel;
use crate::ode::{Dopri, DopriOptions};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CmeOutput {
    pub times: Vec<f64>,
    /// `E[N_{R,p}(t)]`, indexed `[p][time]`.
    pub mean_signal: Vec<Vec<f64>>,
    /// Mean of the product of receiver `p`'s activation reactant counts,
    /// `E[X_p N_{R,p}]` for the activation–deactivation circuit.
    pub mean_product: Vec<Vec<f64>>,
    /// `E[X*_p(t)]` (the output species).
    pub mean_output: Vec<Vec<f64>>,
    pub final_states: Vec<Vec<u32>>,
    pub final_probs: Vec<f64>,
    /// Probability mass lost past the truncation by the last time point.
    pub leakage: f64,
    pub max_states: usize,
}

struct Current {
    set: StateSet,
    gen: Generator,
    rho: Vec<f64>,
}

/// Solves `dπ/dt = π Q` for symbol `k` on the truncated space and reports
/// marginal moments at `times` (sorted, non-negative).
pub fn cme_transient_oracle(
    model: &SystemModel,
    k: usize,
    trunc: &Truncation,
    times: &[f64],
) -> Result<CmeOutput, StateSpaceError> {
    if times.is_empty() {
        return Err(StateSpaceError::Unsupported("empty time grid".into()));
    }
    if times.windows(2).any(|w| w[1] < w[0]) || times[0] < 0.0 {
        return Err(StateSpaceError::Unsupported("time grid must be sorted and non-negative".into()));
    }
    let channels = model.channels_for(k)?;
    let roles = vec![Role::Hidden; channels.len()];
    let stride = model.coord_count();
    let n_signal = model.grid().voxel_count();
    let n_rx = model.receiver_count();
    let products: Vec<Option<Vec<usize>>> =
        (0..n_rx).map(|p| activation_reactants(model, p).ok()).collect();
    let bps = breakpoints(model, k)?;

    let rebuild = |states: Vec<(Vec<u32>, f64)>, t: f64, leak: &mut f64| -> Result<Current, StateSpaceError> {
        let kept: Vec<&(Vec<u32>, f64)> = states
            .iter()
            .filter(|(s, w)| {
                let ok = within_cap(s, n_signal, trunc.n_max);
                if !ok {
                    *leak += w;
                }
                ok
            })
            .collect();
        let set = closure(kept.iter().map(|(s, _)| s.as_slice()), stride, &channels, &roles, t, n_signal, trunc)?;
        let mut rho = vec![0.0; set.len()];
        for (s, w) in kept {
            rho[set.find(s).expect("seed in closure")] += w;
        }
        let gen = build_generator(&set, &channels, &roles, t, n_signal, trunc.n_max);
        Ok(Current { set, gen, rho })
    };

    let mut leak = 0.0;
    let mut t = 0.0;
    let mut bp = 0usize;
    let apply_bursts = |cur: &Current, bursts: &[(usize, u32)]| -> Vec<(Vec<u32>, f64)> {
        let delta: Vec<(usize, i32)> = bursts.iter().map(|&(c, n)| (c, n as i32)).collect();
        let mut next = Vec::new();
        (0..cur.set.len())
            .filter(|&i| cur.rho[i] != 0.0)
            .map(|i| {
                shifted(cur.set.state(i), &delta, &mut next);
                (next.clone(), cur.rho[i])
            })
            .collect()
    };

    let mut cur = rebuild(vec![(model.initial_state().to_vec(), 1.0)], 0.0, &mut leak)?;
    while bp < bps.len() && bps[bp].0 <= 0.0 {
        let seeds = apply_bursts(&cur, &bps[bp].1);
        cur = rebuild(seeds, 0.0, &mut leak)?;
        bp += 1;
    }
    let mut max_states = cur.set.len();

    let mut out = CmeOutput {
        times: times.to_vec(),
        mean_signal: vec![Vec::with_capacity(times.len()); n_rx],
        mean_product: vec![Vec::with_capacity(times.len()); n_rx],
        mean_output: vec![Vec::with_capacity(times.len()); n_rx],
        final_states: Vec::new(),
        final_probs: Vec::new(),
        leakage: 0.0,
        max_states: 0,
    };
    let mut dopri = Dopri::new(DopriOptions {
        rtol: 1e-8,
        atol: 1e-15,
        ..Default::default()
    });
    let mut y: Vec<f64> = Vec::new();

    for &target in times {
        while t < target {
            let next_bp = bps.get(bp).map_or(f64::INFINITY, |b| b.0);
            let stop = target.min(next_bp);
            y.clear();
            y.extend_from_slice(&cur.rho);
            y.push(0.0);
            let gen = &cur.gen;
            let n = gen.dim();
            dopri.integrate(
                |_, y, dy| {
                    dy[n] = gen.apply(&y[..n], &mut dy[..n]);
                },
                t,
                stop,
                &mut y,
            )?;
            leak += y[n].max(0.0);
            cur.rho.copy_from_slice(&y[..n]);
            for r in &mut cur.rho {
                if *r < 0.0 {
                    *r = 0.0;
                }
            }
            if !cur.rho.iter().all(|r| r.is_finite()) {
                return Err(StateSpaceError::NonFinite(stop));
            }
            t = stop;
            if stop == next_bp {
                let seeds = apply_bursts(&cur, &bps[bp].1);
                cur = rebuild(seeds, t, &mut leak)?;
                max_states = max_states.max(cur.set.len());
                dopri.step = None;
                bp += 1;
            }
        }
        for p in 0..n_rx {
            let nr = model.receiver_signal_coord(p);
            out.mean_signal[p].push(expectation(&cur.set, &cur.rho, |s| s[nr] as f64));
            let oc = model.output_coord(p);
            out.mean_output[p].push(expectation(&cur.set, &cur.rho, |s| s[oc] as f64));
            out.mean_product[p].push(match &products[p] {
                Some(r) => expectation(&cur.set, &cur.rho, |s| r.iter().map(|&c| s[c] as f64).product()),
                None => f64::NAN,
            });
        }
    }

    if leak > trunc.leak_tol {
        return Err(StateSpaceError::Leakage {
            leak,
            tol: trunc.leak_tol,
        });
    }
    out.leakage = leak;
    out.max_states = max_states;
    out.final_states = (0..cur.set.len()).map(|i| cur.set.state(i).to_vec()).collect();
    out.final_probs = cur.rho;
    Ok(out)
}
