use super::*;
use crate::model::{
    Boundary, Circuit, Configuration, MediumSpec, ReceiverSpec, SpatialGrid, SymbolDef,
    TransmitterSpec, VoxelIndex,
};
use proptest::prelude::*;

fn model(
    dims: [u32; 3],
    boundary: Boundary,
    symbols: Vec<SymbolDef>,
    receivers: Vec<VoxelIndex>,
    configuration: Configuration,
    activation: f64,
    receptors: u32,
) -> SystemModel {
    SystemModel::assemble(
        SpatialGrid::new(dims, 1.0, boundary).unwrap(),
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

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

fn final_signal(m: &SystemModel, k: usize, t: f64, n: usize, coord: usize, method: SsaMethod) -> Vec<f64> {
    let sim = Simulator::new(m, k, method).unwrap();
    replicate_map(n, 7, |seed| Ok(sim.run_with(t, seed, &mut ())?[coord] as f64)).unwrap()
}

#[test]
fn poisson_emission_count_matches_rate_times_duration() {
    let m = model(
        [1, 1, 1],
        Boundary::Reflecting,
        vec![
            SymbolDef::PoissonRate { rate: 10.0, duration: 1.0 },
            SymbolDef::PoissonRate { rate: 0.0, duration: 1.0 },
        ],
        vec![VoxelIndex::new(1, 1, 1)],
        Configuration::Partitioned,
        0.0,
        0,
    );
    let xs = final_signal(&m, 0, 2.0, 2000, 0, SsaMethod::Direct);
    let (mean, _) = mean_and_se(&xs);
    assert!((mean - 10.0).abs() < 3.0 * (10.0f64 / 2000.0).sqrt(), "mean {mean}");
}

#[test]
fn birth_death_mean_relaxes_exponentially() {
    // Six exposed faces, each absorbing at d/50 with d = 1.
    let lambda: f64 = 6.0 / 50.0;
    let (r, t) = (10.0, 5.0);
    let expected = r / lambda * (1.0 - (-lambda * t).exp());
    let m = model(
        [1, 1, 1],
        Boundary::absorbing_default(),
        vec![
            SymbolDef::PoissonRate { rate: r, duration: f64::INFINITY },
            SymbolDef::PoissonRate { rate: 0.0, duration: f64::INFINITY },
        ],
        vec![VoxelIndex::new(1, 1, 1)],
        Configuration::Partitioned,
        0.0,
        0,
    );
    for method in [SsaMethod::Direct, SsaMethod::SumTree] {
        let xs = final_signal(&m, 0, t, 1000, 0, method);
        let (mean, _) = mean_and_se(&xs);
        // Poisson-distributed: variance equals the mean.
        let tol = 4.0 * (expected / 1000.0).sqrt();
        assert!((mean - expected).abs() < tol, "{method:?}: mean {mean}, expected {expected}");
    }
}

#[test]
fn two_voxel_exchange_reaches_even_split() {
    let m = model(
        [2, 1, 1],
        Boundary::Reflecting,
        vec![
            SymbolDef::DeterministicBursts(vec![(0.0, 100)]),
            SymbolDef::DeterministicBursts(vec![]),
        ],
        vec![VoxelIndex::new(2, 1, 1)],
        Configuration::Partitioned,
        0.0,
        0,
    );
    let t: f64 = 0.4;
    let expected = 50.0 + 50.0 * (-2.0 * t).exp();
    let xs = final_signal(&m, 0, t, 1000, 0, SsaMethod::Direct);
    let (mean, se) = mean_and_se(&xs);
    assert!((mean - expected).abs() < 4.0 * se, "mean {mean} expected {expected}");
}

#[test]
fn same_seed_same_trajectory() {
    let m = model(
        [3, 1, 1],
        Boundary::absorbing_default(),
        vec![
            SymbolDef::PoissonRate { rate: 20.0, duration: 0.5 },
            SymbolDef::PoissonRate { rate: 5.0, duration: 0.5 },
        ],
        vec![VoxelIndex::new(3, 1, 1)],
        Configuration::Partitioned,
        0.3,
        5,
    );
    let a = simulate(&m, 0, 2.0, ReplicateSeed::new(42, 3)).unwrap();
    let b = simulate(&m, 0, 2.0, ReplicateSeed::new(42, 3)).unwrap();
    let c = simulate(&m, 0, 2.0, ReplicateSeed::new(42, 4)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.events, c.events);
    let ens = run_ensemble(&m, 0, 5, 2.0, 42).unwrap();
    assert_eq!(ens[3], a);
}

#[test]
fn emission_stops_at_window_end() {
    let m = model(
        [2, 1, 1],
        Boundary::Reflecting,
        vec![
            SymbolDef::PoissonRate { rate: 50.0, duration: 0.5 },
            SymbolDef::PoissonRate { rate: 0.0, duration: 0.5 },
        ],
        vec![VoxelIndex::new(2, 1, 1)],
        Configuration::Partitioned,
        0.0,
        0,
    );
    for i in 0..20 {
        let tr = simulate(&m, 0, 2.0, ReplicateSeed::new(1, i)).unwrap();
        for ev in &tr.events {
            if matches!(ev.kind, ChannelKind::Emission { .. }) {
                assert!(ev.time < 0.5);
            }
        }
    }
}

#[test]
fn overflow_guard_trips() {
    let m = model(
        [1, 1, 1],
        Boundary::Reflecting,
        vec![
            SymbolDef::PoissonRate { rate: 1e13, duration: 1.0 },
            SymbolDef::PoissonRate { rate: 0.0, duration: 1.0 },
        ],
        vec![VoxelIndex::new(1, 1, 1)],
        Configuration::Partitioned,
        0.0,
        0,
    );
    assert!(matches!(
        simulate(&m, 0, 1.0, ReplicateSeed::new(0, 0)),
        Err(SimError::PropensityOverflow { .. })
    ));
    assert!(matches!(
        simulate(&m, 2, 1.0, ReplicateSeed::new(0, 0)),
        Err(SimError::SymbolOutOfRange { .. })
    ));
}

#[test]
fn recorder_matches_extracted_observations() {
    let m = model(
        [3, 1, 1],
        Boundary::absorbing_default(),
        vec![
            SymbolDef::PoissonRate { rate: 40.0, duration: f64::INFINITY },
            SymbolDef::PoissonRate { rate: 10.0, duration: f64::INFINITY },
        ],
        vec![VoxelIndex::new(2, 1, 1), VoxelIndex::new(3, 1, 1)],
        Configuration::Mixed { d_r: 2.0 },
        0.5,
        10,
    );
    let sim = Simulator::new(&m, 0, SsaMethod::Direct).unwrap();
    let seed = ReplicateSeed::new(9, 1);
    let tr = sim.run(3.0, seed).unwrap();
    let a = extract_observations(&tr, &m).unwrap();
    let b = sim.observe(3.0, seed).unwrap();
    assert_eq!(a, b);
    assert!(a.events.iter().any(|e| matches!(e.cause, EventCause::Hop { .. })));
    let fin = a.final_counts();
    for p in 0..2 {
        assert_eq!(fin[p], tr.final_state[m.output_coord(p)]);
        assert_eq!(a.count_at(p, 3.0), fin[p]);
    }
    // A hop produces a paired change: -1 at the source, +1 at the destination.
    for e in &a.events {
        if let EventCause::Hop { from, to } = e.cause {
            assert_eq!(e.changes.len(), 2);
            assert!(e.changes.contains(&(from, -1)) && e.changes.contains(&(to, 1)));
        }
    }
    let other = model(
        [3, 1, 1],
        Boundary::Reflecting,
        vec![
            SymbolDef::PoissonRate { rate: 40.0, duration: 1.0 },
            SymbolDef::PoissonRate { rate: 10.0, duration: 1.0 },
        ],
        vec![VoxelIndex::new(2, 1, 1)],
        Configuration::Partitioned,
        0.5,
        10,
    );
    assert!(matches!(extract_observations(&tr, &other), Err(SimError::ModelMismatch)));
}

#[test]
fn grid_sampler_is_right_continuous() {
    let m = model(
        [1, 1, 1],
        Boundary::Reflecting,
        vec![
            SymbolDef::DeterministicBursts(vec![(0.0, 3), (0.5, 4)]),
            SymbolDef::DeterministicBursts(vec![]),
        ],
        vec![VoxelIndex::new(1, 1, 1)],
        Configuration::Partitioned,
        0.0,
        0,
    );
    let sim = Simulator::new(&m, 0, SsaMethod::Direct).unwrap();
    let times = vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.5];
    let mut s = GridSampler::new(times, |c: &[u32]| c[0] as f64);
    sim.run_with(1.0, ReplicateSeed::new(0, 0), &mut s).unwrap();
    assert_eq!(s.values, vec![3.0, 3.0, 7.0, 7.0, 7.0, 7.0]);
}

#[test]
fn trajectory_dump_lists_every_event() {
    let m = model(
        [2, 1, 1],
        Boundary::absorbing_default(),
        vec![
            SymbolDef::PoissonRate { rate: 20.0, duration: 1.0 },
            SymbolDef::PoissonRate { rate: 5.0, duration: 1.0 },
        ],
        vec![VoxelIndex::new(2, 1, 1)],
        Configuration::Partitioned,
        0.5,
        3,
    );
    let tr = simulate(&m, 0, 1.0, ReplicateSeed::new(5, 0)).unwrap();
    let mut buf = Vec::new();
    write_trajectory_tsv(&mut buf, &m, &tr).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), tr.events.len() + 1);
    assert!(text.contains("emission"));
}

fn conservation_model(d_r: Option<f64>) -> SystemModel {
    model(
        [3, 2, 1],
        Boundary::Reflecting,
        vec![
            SymbolDef::DeterministicBursts(vec![(0.0, 30), (0.3, 10)]),
            SymbolDef::DeterministicBursts(vec![(0.1, 5)]),
        ],
        vec![VoxelIndex::new(2, 2, 1), VoxelIndex::new(3, 2, 1)],
        d_r.map_or(Configuration::Partitioned, |d_r| Configuration::Mixed { d_r }),
        0.4,
        6,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn counts_conserved_and_times_increase(seed in any::<u64>(), k in 0usize..2, mixed in any::<bool>()) {
        let m = conservation_model(mixed.then_some(1.5));
        let sim = Simulator::new(&m, k, SsaMethod::Direct).unwrap();
        struct Check<'a> { m: &'a SystemModel, last: f64, ok: bool, emitted: u32 }
        impl Observer for Check<'_> {
            fn after_event(&mut self, t: f64, source: EventSource, c: &[u32]) {
                if t <= self.last && self.last > 0.0 { self.ok = false; }
                self.last = t;
                if let EventSource::Schedule(_) = source { self.emitted = c[..6].iter().sum(); }
                let signal: u32 = c[..6].iter().sum();
                if signal != self.emitted { self.ok = false; }
                let rec: u64 = (0..2).map(|p| self.m.receptor_total(c, p)).sum();
                if rec != 12 { self.ok = false; }
            }
        }
        let mut chk = Check { m: &m, last: 0.0, ok: true, emitted: 0 };
        sim.run_with(2.0, ReplicateSeed::new(seed, 0), &mut chk).unwrap();
        prop_assert!(chk.ok);
        if !mixed {
            let fin = sim.run(2.0, ReplicateSeed::new(seed, 0)).unwrap().final_state;
            for p in 0..2 { prop_assert_eq!(m.receptor_total(&fin, p), 6); }
        }
    }

    #[test]
    fn sum_tree_selects_proportionally(weights in proptest::collection::vec(0.0f64..5.0, 1..40), u in 0.0f64..1.0) {
        let total: f64 = weights.iter().sum();
        prop_assume!(total > 0.0);
        let mut tree = SumTree::new(weights.len());
        tree.rebuild(&weights);
        prop_assert!((tree.total() - total).abs() < 1e-9);
        let r = u * total;
        let j = tree.select(r);
        prop_assert!(weights[j] > 0.0);
        let before: f64 = weights[..j].iter().sum();
        prop_assert!(before <= r + 1e-9 && r <= before + weights[j] + 1e-9);
    }
}
