use super::*;
use crate::model::{
    Boundary, Circuit, Configuration, MediumSpec, ReceiverSpec, SpatialGrid, SymbolDef,
    TransmitterSpec, VoxelIndex,
};
use crate::ssa::{ObservationStream, SsaMethod, Simulator, ReplicateSeed};

fn model(
    dims: [u32; 3],
    symbols: Vec<SymbolDef>,
    receivers: Vec<VoxelIndex>,
    configuration: Configuration,
    activation: f64,
    receptors: u32,
) -> SystemModel {
    SystemModel::assemble(
        SpatialGrid::new(dims, 1.0, Boundary::Reflecting).unwrap(),
        MediumSpec::new(1.0).unwrap(),
        TransmitterSpec::uniform(VoxelIndex::new(1, 1, 1), symbols),
        ReceiverSpec {
            voxels: receivers,
            configuration,
            circuit: Circuit::ActDeact {
                activation,
                deactivation: 1.0,
            },
            receptors,
        },
    )
    .unwrap()
}

fn single_voxel(bursts: [u32; 2], activation: f64, receptors: u32, configuration: Configuration) -> SystemModel {
    model(
        [1, 1, 1],
        bursts
            .iter()
            .map(|&n| SymbolDef::DeterministicBursts(vec![(0.0, n)]))
            .collect(),
        vec![VoxelIndex::new(1, 1, 1)],
        configuration,
        activation,
        receptors,
    )
}

#[test]
fn pure_birth_mean_is_rate_times_time() {
    let m = model(
        [1, 1, 1],
        vec![
            SymbolDef::PoissonRate { rate: 5.0, duration: 1.0 },
            SymbolDef::PoissonRate { rate: 0.0, duration: 1.0 },
        ],
        vec![VoxelIndex::new(1, 1, 1)],
        Configuration::Partitioned,
        0.0,
        0,
    );
    let out = cme_transient_oracle(&m, 0, &Truncation::default(), &[0.0, 0.5, 1.0, 2.0]).unwrap();
    for (got, want) in out.mean_signal[0].iter().zip([0.0, 2.5, 5.0, 5.0]) {
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
    // The final law is Poisson(5).
    let mut pmf = vec![0.0; 101];
    for (s, &w) in out.final_states.iter().zip(&out.final_probs) {
        pmf[s[0] as usize] += w;
    }
    let mut poisson = (-5.0f64).exp();
    for (n, &p) in pmf.iter().enumerate().take(20) {
        assert!((p - poisson).abs() < 1e-7, "n={n}: {p} vs {poisson}");
        poisson *= 5.0 / (n as f64 + 1.0);
    }
}

#[test]
fn two_voxel_relaxation_matches_closed_form() {
    let m = model(
        [2, 1, 1],
        vec![
            SymbolDef::DeterministicBursts(vec![(0.0, 10)]),
            SymbolDef::DeterministicBursts(vec![(0.0, 4)]),
        ],
        vec![VoxelIndex::new(2, 1, 1)],
        Configuration::Partitioned,
        0.0,
        0,
    );
    let times = [0.0, 0.1, 0.4, 1.0];
    for (k, n0) in [(0usize, 10.0f64), (1, 4.0)] {
        let out = cme_transient_oracle(&m, k, &Truncation::default(), &times).unwrap();
        for (i, &t) in times.iter().enumerate() {
            let want = n0 / 2.0 * (1.0 - (-2.0 * t).exp());
            assert!((out.mean_signal[0][i] - want).abs() < 1e-6);
        }
    }
}

#[test]
fn receptors_relax_as_independent_two_state_units() {
    // Signal count is frozen, so every receptor flips independently with
    // rates c·N (on) and 1 (off).
    let m = single_voxel([3, 1], 0.4, 5, Configuration::Partitioned);
    let times = [0.0, 0.3, 1.0, 3.0];
    for (k, n) in [(0usize, 3.0f64), (1, 1.0)] {
        let out = cme_transient_oracle(&m, k, &Truncation::default(), &times).unwrap();
        let a = 0.4 * n;
        for (i, &t) in times.iter().enumerate() {
            let p = a / (a + 1.0) * (1.0 - (-(a + 1.0) * t).exp());
            assert!((out.mean_output[0][i] - 5.0 * p).abs() < 1e-6);
            assert!((out.mean_product[0][i] - n * 5.0 * (1.0 - p)).abs() < 1e-6);
        }
    }
}

#[test]
fn zero_activation_keeps_outputs_at_zero() {
    let m = model(
        [2, 1, 1],
        vec![
            SymbolDef::PoissonRate { rate: 8.0, duration: 0.5 },
            SymbolDef::PoissonRate { rate: 2.0, duration: 0.5 },
        ],
        vec![VoxelIndex::new(2, 1, 1)],
        Configuration::Partitioned,
        0.0,
        4,
    );
    let out = cme_transient_oracle(&m, 0, &Truncation::default(), &[0.2, 1.0]).unwrap();
    assert!(out.mean_output[0].iter().all(|&x| x == 0.0));
}

#[test]
fn leakage_and_retained_mass_sum_to_one() {
    let m = model(
        [1, 1, 1],
        vec![
            SymbolDef::PoissonRate { rate: 6.0, duration: 1.0 },
            SymbolDef::PoissonRate { rate: 0.0, duration: 1.0 },
        ],
        vec![VoxelIndex::new(1, 1, 1)],
        Configuration::Partitioned,
        0.0,
        0,
    );
    let trunc = Truncation {
        n_max: 4,
        leak_tol: 1.0,
        ..Default::default()
    };
    let out = cme_transient_oracle(&m, 0, &trunc, &[1.0]).unwrap();
    let kept: f64 = out.final_probs.iter().sum();
    assert!(out.leakage > 0.1);
    assert!((kept + out.leakage - 1.0).abs() < 1e-7);
    // The strict default refuses the same truncation.
    let strict = Truncation { n_max: 4, ..Default::default() };
    assert!(matches!(
        cme_transient_oracle(&m, 0, &strict, &[1.0]),
        Err(StateSpaceError::Leakage { .. })
    ));
}

/// `L_k` written out directly for a single voxel with a frozen signal count
/// `n`: every activation adds `log(h · n)`, and time adds `−c·n ∫ X dt`.
fn frozen_signal_posterior(obs: &ObservationStream, n: f64, c: f64, m: u32, prior: f64, t: f64, mixed: bool) -> f64 {
    let mut l = prior.ln();
    let mut x_star = obs.initial[0] as f64;
    let mut last = 0.0;
    for e in obs.events.iter().take_while(|e| e.time <= t) {
        l -= c * n * (m as f64 - x_star) * (e.time - last);
        last = e.time;
        let d = e.changes[0].1;
        if d > 0 {
            l += if mixed { ((m as f64 - x_star) * n).ln() } else { n.ln() };
        }
        x_star += d as f64;
    }
    l - c * n * (m as f64 - x_star) * (t - last)
}

#[test]
fn filter_with_frozen_signal_has_closed_form_posterior() {
    for (mode, conf) in [
        (FilterMode::Partitioned, Configuration::Partitioned),
        (FilterMode::Mixed, Configuration::Mixed { d_r: 0.0 }),
    ] {
        let m = single_voxel([6, 2], 0.3, 8, conf);
        let sim = Simulator::new(&m, 0, SsaMethod::Direct).unwrap();
        let obs = sim.observe(3.0, ReplicateSeed::new(11, 0)).unwrap();
        assert!(!obs.events.is_empty());
        let report = [0.0, 0.7, 1.5, 3.0];
        for (k, n) in [(0usize, 6.0), (1, 2.0)] {
            let out = bayes_filter_optimal(&m, &obs, k, mode, Truncation::default(), &report).unwrap();
            for (i, &t) in report.iter().enumerate() {
                let want = frozen_signal_posterior(&obs, n, 0.3, 8, 0.5, t, mode == FilterMode::Mixed);
                assert!(
                    (out.log_posterior[i] - want).abs() < 1e-6,
                    "{mode:?} k={k} t={t}: {} vs {want}",
                    out.log_posterior[i]
                );
                assert!((out.cond_signal[0][i] - n).abs() < 1e-9);
            }
            assert!(out.max_normalization_error < 1e-9);
            assert_eq!(out.events_processed, obs.events.len());
        }
    }
}

#[test]
fn filter_favours_the_transmitted_symbol_on_average() {
    let m = model(
        [3, 1, 1],
        vec![
            SymbolDef::DeterministicBursts(vec![(0.0, 8), (0.2, 8), (0.4, 8)]),
            SymbolDef::DeterministicBursts(vec![(0.0, 20), (0.2, 20), (0.4, 20)]),
        ],
        vec![VoxelIndex::new(2, 1, 1), VoxelIndex::new(3, 1, 1)],
        Configuration::Partitioned,
        0.05,
        10,
    );
    let mut filters: Vec<OptimalFilter> = (0..2)
        .map(|k| OptimalFilter::new(&m, k, FilterMode::Partitioned, Truncation::default()).unwrap())
        .collect();
    let mut correct = 0;
    let runs = 20;
    for r in 0..runs {
        let tx = r % 2;
        let sim = Simulator::new(&m, tx, SsaMethod::Direct).unwrap();
        let obs = sim.observe(1.0, ReplicateSeed::new(5, r as u64)).unwrap();
        let l: Vec<f64> = filters
            .iter_mut()
            .map(|f| *f.run(&obs, &[1.0]).unwrap().log_posterior.last().unwrap())
            .collect();
        let guess = if l[1] > l[0] { 1 } else { 0 };
        correct += usize::from(guess == tx);
    }
    assert!(correct >= 14, "{correct}/{runs}");
}

#[test]
fn partitioned_filter_rejects_mobile_receptors() {
    let m = model(
        [2, 1, 1],
        vec![
            SymbolDef::DeterministicBursts(vec![(0.0, 3)]),
            SymbolDef::DeterministicBursts(vec![(0.0, 1)]),
        ],
        vec![VoxelIndex::new(1, 1, 1), VoxelIndex::new(2, 1, 1)],
        Configuration::Mixed { d_r: 0.5 },
        0.2,
        2,
    );
    let sim = Simulator::new(&m, 0, SsaMethod::Direct).unwrap();
    let obs = sim.observe(0.5, ReplicateSeed::new(1, 0)).unwrap();
    let err = bayes_filter_optimal(&m, &obs, 0, FilterMode::Partitioned, Truncation::default(), &[0.5]);
    assert!(matches!(err, Err(StateSpaceError::Unsupported(_))));
    let ok = bayes_filter_optimal(&m, &obs, 0, FilterMode::Mixed, Truncation::default(), &[0.5]).unwrap();
    assert!(ok.log_posterior[0].is_finite());
}

#[test]
fn filter_rejects_streams_from_other_models() {
    let a = single_voxel([3, 1], 0.2, 2, Configuration::Partitioned);
    let b = single_voxel([4, 1], 0.2, 2, Configuration::Partitioned);
    let obs = Simulator::new(&a, 0, SsaMethod::Direct)
        .unwrap()
        .observe(0.5, ReplicateSeed::new(1, 0))
        .unwrap();
    assert!(bayes_filter_optimal(&b, &obs, 0, FilterMode::Partitioned, Truncation::default(), &[0.5]).is_err());
}

#[test]
fn filter_flags_observations_impossible_under_a_hypothesis() {
    // Symbol 1 sends nothing, so no activation can ever happen under it.
    let m = single_voxel([5, 0], 1.0, 3, Configuration::Partitioned);
    let sim = Simulator::new(&m, 0, SsaMethod::Direct).unwrap();
    let obs = sim.observe(2.0, ReplicateSeed::new(2, 0)).unwrap();
    assert!(!obs.events.is_empty());
    let err = bayes_filter_optimal(&m, &obs, 1, FilterMode::Partitioned, Truncation::default(), &[2.0]);
    assert!(matches!(err, Err(StateSpaceError::ImpossibleObservation { .. })));
}
