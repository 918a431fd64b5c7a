use super::*;
use crate::model::{
    Boundary, Circuit, Configuration, MediumSpec, ReceiverSpec, SpatialGrid, SymbolDef,
    TransmitterSpec, VoxelIndex,
};
use crate::reference::{estimate_references, RefKind};
use crate::ssa::{ObservedEvent, ReplicateSeed, SsaMethod, Simulator};
use proptest::prelude::*;

fn three_voxel(configuration: Configuration, s: [u32; 2]) -> SystemModel {
    SystemModel::assemble(
        SpatialGrid::new([3, 1, 1], 1.0 / 3.0, Boundary::Reflecting).unwrap(),
        MediumSpec::new(1.0).unwrap(),
        TransmitterSpec::uniform(
            VoxelIndex::new(1, 1, 1),
            s.iter()
                .map(|&n| SymbolDef::DeterministicBursts(vec![(0.0, n), (0.2, n), (0.4, n)]))
                .collect(),
        ),
        ReceiverSpec {
            voxels: vec![VoxelIndex::new(2, 1, 1), VoxelIndex::new(3, 1, 1)],
            configuration,
            circuit: Circuit::ActDeact {
                activation: 0.05,
                deactivation: 1.0,
            },
            receptors: 10,
        },
    )
    .unwrap()
}

fn signal(values: Vec<f64>, k: usize, p: usize) -> ReferenceSignal {
    ReferenceSignal::from_values(RefKind::Alpha, k, p, 0.1, values).unwrap()
}

fn stream(events: Vec<(f64, Vec<(usize, i32)>, EventCause)>, initial: Vec<u32>, t_end: f64) -> ObservationStream {
    ObservationStream {
        model_fingerprint: 0,
        symbol: 0,
        t_end,
        initial,
        events: events
            .into_iter()
            .map(|(time, changes, cause)| ObservedEvent { time, changes, cause })
            .collect(),
    }
}

/// Independent value of one accumulator: Simpson's rule between every grid
/// node and event time (exact for the piecewise-linear reference) plus
/// log-reference jumps.
fn brute_force(r: &ReferenceSignal, c: f64, m: Option<f64>, obs: &ObservationStream, p: usize, t: f64) -> f64 {
    let mut cuts: Vec<f64> = (0..r.len()).map(|i| r.time(i)).filter(|&s| s < t).collect();
    cuts.extend(obs.events.iter().map(|e| e.time).filter(|&s| s < t));
    cuts.push(t);
    cuts.sort_by(f64::total_cmp);
    let mut drift = 0.0;
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let mid = 0.5 * (a + b);
        let weight = match m {
            Some(m) => m - obs.count_at(p, mid) as f64,
            None => 1.0,
        };
        drift += weight * (b - a) / 6.0 * (r.value_at(a) + 4.0 * r.value_at(mid) + r.value_at(b));
    }
    let jumps: f64 = obs
        .voxel_jumps(p)
        .iter()
        .filter(|j| j.delta > 0 && j.time <= t)
        .map(|j| r.value_at(j.time).max(LOG_FLOOR).ln())
        .sum();
    jumps - c * drift
}

fn hand_filter<'r>(refs: Vec<Vec<&'r ReferenceSignal>>, weight: DriftWeight) -> ApproxFilter<'r> {
    let k = refs.len();
    let p = refs[0].len();
    ApproxFilter {
        kind: DemodKind::PartitionedApprox,
        refs,
        forward: vec![0.7; p],
        weight,
        log_prior: vec![(1.0 / k as f64).ln(); k],
    }
}

#[test]
fn decisions_take_argmax_with_ties_to_lowest() {
    assert_eq!(decide(&[-3.2, -1.1]), 1);
    assert_eq!(decide(&[-2.0, -2.0]), 0);
    assert_eq!(decide(&[0.0, 1.0, 1.0]), 1);
}

#[test]
fn accumulators_match_brute_force_quadrature() {
    let a0 = signal((0..=20).map(|i| 1.0 + (i as f64 * 0.3).sin()).collect(), 0, 0);
    let a1 = signal((0..=20).map(|i| 0.5 + 0.2 * i as f64).collect(), 1, 0);
    let obs = stream(
        vec![
            (0.13, vec![(0, 1)], EventCause::Activation(0)),
            (0.55, vec![(0, 1)], EventCause::Activation(0)),
            (0.9, vec![(0, -1)], EventCause::Deactivation(0)),
            (1.42, vec![(0, 1)], EventCause::Activation(0)),
        ],
        vec![0],
        2.0,
    );
    let times = [0.0, 0.55, 1.0, 1.7, 2.0];
    for (weight, m) in [(DriftWeight::FreeReceptors(vec![4.0]), Some(4.0)), (DriftWeight::Unit, None)] {
        let f = hand_filter(vec![vec![&a0], vec![&a1]], weight);
        let out = f.run(&obs, &times).unwrap();
        for (k, r) in [(0, &a0), (1, &a1)] {
            for (i, &t) in times.iter().enumerate() {
                let want = brute_force(r, 0.7, m, &obs, 0, t);
                assert!((out.z_voxel[k][0][i] - want).abs() < 1e-10, "k={k} t={t}");
                assert!((out.z[k][i] - 0.5f64.ln() - want).abs() < 1e-10);
            }
        }
        assert_eq!(out.jumps.len(), 3);
    }
}

#[test]
fn saturated_receptors_stop_the_drift() {
    let a = signal(vec![3.0; 11], 0, 0);
    let obs = stream(vec![], vec![5], 1.0);
    let f = hand_filter(vec![vec![&a], vec![&a]], DriftWeight::FreeReceptors(vec![5.0]));
    let out = f.run(&obs, &[0.0, 0.5, 1.0]).unwrap();
    assert!(out.z_voxel[0][0].iter().all(|&z| z == 0.0));
}

#[test]
fn evidence_per_jump_is_the_log_reference_ratio() {
    let a0 = signal(vec![1.0; 11], 0, 0);
    let a1 = signal(vec![2.5; 11], 1, 0);
    let obs = stream(
        vec![(0.3, vec![(0, 1)], EventCause::Activation(0)), (0.6, vec![(0, 1)], EventCause::Activation(0))],
        vec![0],
        1.0,
    );
    let f = hand_filter(vec![vec![&a0], vec![&a1]], DriftWeight::FreeReceptors(vec![3.0]));
    let out = f.run(&obs, &[0.3, 0.6]).unwrap();
    for j in &out.jumps {
        assert!((j.increments[1] - j.increments[0] - 2.5f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn clamps_are_counted_at_empty_references() {
    let zero = signal(vec![0.0; 11], 0, 0);
    let one = signal(vec![1.0; 11], 1, 0);
    let obs = stream(vec![(0.3, vec![(0, 1)], EventCause::Activation(0))], vec![0], 1.0);
    let out = hand_filter(vec![vec![&zero], vec![&one]], DriftWeight::Unit).run(&obs, &[1.0]).unwrap();
    assert_eq!(out.clamped, 1);
    assert!((out.z_voxel[0][0][0] - LOG_FLOOR.ln()).abs() < 1e-12);
}

#[test]
fn report_past_the_horizon_is_rejected() {
    let a = signal(vec![1.0; 11], 0, 0);
    let obs = stream(vec![], vec![0], 2.0);
    let err = hand_filter(vec![vec![&a]], DriftWeight::Unit).run(&obs, &[1.5]);
    assert!(matches!(err, Err(DemodError::DecisionBeyondHorizon { .. })));
}

#[test]
fn generic_filter_reproduces_the_mixed_filter_for_act_deact() {
    let m = three_voxel(Configuration::Mixed { d_r: 0.5 }, [8, 20]);
    let refs = estimate_references(&m, 1.0, 0.01, 40, 1).unwrap();
    let obs = Simulator::new(&m, 1, SsaMethod::Direct)
        .unwrap()
        .observe(1.0, ReplicateSeed::new(3, 0))
        .unwrap();
    let times = [0.25, 0.5, 1.0];
    let a = demod_mixed_approx(&m, &obs, &refs, &times).unwrap();
    let b = demod_generic_approx(&m, &obs, &refs, &times).unwrap();
    assert_eq!(a.z, b.z);
}

#[test]
fn oracle_trains_coincide_with_jumps_when_receptors_are_fixed() {
    let m = three_voxel(Configuration::Partitioned, [8, 20]);
    let refs = estimate_references(&m, 1.0, 0.01, 40, 1).unwrap();
    let obs = Simulator::new(&m, 0, SsaMethod::Direct)
        .unwrap()
        .observe(1.0, ReplicateSeed::new(4, 0))
        .unwrap();
    let trains = extract_activation_trains(&m, &obs, TrainMode::Oracle).unwrap();
    let inferred = extract_activation_trains(&m, &obs, TrainMode::Inferred).unwrap();
    assert_eq!(trains, inferred);
    for t in &trains {
        let ups = obs.voxel_jumps(t.voxel).iter().filter(|j| j.delta > 0).count();
        assert_eq!(ups, t.times.len());
    }
    let times = [0.5, 1.0];
    let a = demod_mixed_approx(&m, &obs, &refs, &times).unwrap();
    let b = demod_mixed_oracle(&m, &obs, &trains, &refs, &times).unwrap();
    assert_eq!(a.z, b.z);
}

#[test]
fn inferred_trains_match_simulator_labels_on_mixed_data() {
    let m = three_voxel(Configuration::Mixed { d_r: 1.0 }, [8, 20]);
    for r in 0..10 {
        let obs = Simulator::new(&m, 1, SsaMethod::Direct)
            .unwrap()
            .observe(2.0, ReplicateSeed::new(8, r))
            .unwrap();
        let oracle = extract_activation_trains(&m, &obs, TrainMode::Oracle).unwrap();
        let inferred = extract_activation_trains(&m, &obs, TrainMode::Inferred).unwrap();
        assert_eq!(oracle, inferred);
    }
}

#[test]
fn hop_is_not_mistaken_for_activation() {
    // Activation in receiver 0 at t₁, then that X* hops into receiver 1 at t₂.
    let m = three_voxel(Configuration::Mixed { d_r: 1.0 }, [8, 20]);
    let mut obs = stream(
        vec![
            (0.4, vec![(0, 1)], EventCause::Activation(0)),
            (0.9, vec![(0, -1), (1, 1)], EventCause::Hop { from: 0, to: 1 }),
        ],
        vec![0, 0],
        1.0,
    );
    obs.model_fingerprint = m.fingerprint();
    for mode in [TrainMode::Oracle, TrainMode::Inferred] {
        let t = extract_activation_trains(&m, &obs, mode).unwrap();
        assert_eq!(t[0].times, vec![0.4]);
        assert!(t[1].times.is_empty());
    }
}

#[test]
fn partitioned_filter_rejects_other_circuits() {
    let m = SystemModel::assemble(
        SpatialGrid::new([2, 1, 1], 1.0, Boundary::Reflecting).unwrap(),
        MediumSpec::new(1.0).unwrap(),
        TransmitterSpec::uniform(
            VoxelIndex::new(1, 1, 1),
            vec![SymbolDef::DeterministicBursts(vec![(0.0, 3)]); 2],
        ),
        ReceiverSpec {
            voxels: vec![VoxelIndex::new(2, 1, 1)],
            configuration: Configuration::Partitioned,
            circuit: Circuit::TwoSite { bind1: 1.0, unbind1: 1.0, bind2: 1.0, unbind2: 1.0 },
            receptors: 2,
        },
    )
    .unwrap();
    let refs = estimate_references(&m, 0.5, 0.05, 5, 1).unwrap();
    assert!(matches!(ApproxFilter::partitioned(&m, &refs), Err(DemodError::Unsupported(_))));
    assert!(ApproxFilter::generic(&m, &refs).is_ok());
}

#[test]
fn identical_symbols_give_chance_level_errors() {
    let m = three_voxel(Configuration::Partitioned, [12, 12]);
    let refs = estimate_references(&m, 1.0, 0.01, 100, 2).unwrap();
    let f = ApproxFilter::partitioned(&m, &refs).unwrap();
    let mut outs = Vec::new();
    let mut truth = Vec::new();
    for r in 0..200u64 {
        let tx = (r % 2) as usize;
        let obs = Simulator::new(&m, tx, SsaMethod::Direct)
            .unwrap()
            .observe(1.0, ReplicateSeed::new(13, r))
            .unwrap();
        outs.push(f.run(&obs, &[1.0]).unwrap());
        truth.push(tx);
    }
    // Reference estimates differ only by Monte Carlo noise.
    let ber = decide_and_ber(&outs, &truth, &[1.0]).unwrap();
    let (lo, hi) = ber[0].pooled.ci;
    assert!(lo <= 0.5 && 0.5 <= hi, "{:?}", ber[0].pooled);
    assert!(matches!(
        decide_and_ber(&outs, &truth, &[2.0]),
        Err(DemodError::DecisionBeyondHorizon { .. })
    ));
    assert!(matches!(decide_and_ber(&[], &[], &[1.0]), Err(DemodError::NoReplicates)));
}

fn arb_stream(n_rx: usize) -> impl Strategy<Value = ObservationStream> {
    prop::collection::vec((0.0f64..2.0, 0..n_rx, prop::bool::ANY), 0..30).prop_map(move |mut evs| {
        evs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut counts = vec![0i32; n_rx];
        let mut events = Vec::new();
        for (t, p, up) in evs {
            let d = if up || counts[p] == 0 { 1 } else { -1 };
            counts[p] += d;
            let cause = if d > 0 { EventCause::Activation(p) } else { EventCause::Deactivation(p) };
            events.push((t, vec![(p, d)], cause));
        }
        stream(events, vec![0; n_rx], 2.0)
    })
}

fn arb_signal() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..5.0, 21)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn joint_filter_is_the_sum_of_per_voxel_filters(
        obs in arb_stream(2),
        sigs in prop::collection::vec(arb_signal(), 4),
    ) {
        let r: Vec<ReferenceSignal> = sigs.into_iter().enumerate().map(|(i, v)| signal(v, i / 2, i % 2)).collect();
        let times = [0.5, 1.0, 2.0];
        let joint = hand_filter(
            vec![vec![&r[0], &r[1]], vec![&r[2], &r[3]]],
            DriftWeight::FreeReceptors(vec![6.0, 6.0]),
        ).run(&obs, &times).unwrap();
        for p in 0..2 {
            let single = stream(
                obs.events
                    .iter()
                    .filter(|e| e.changes[0].0 == p)
                    .map(|e| (e.time, vec![(0, e.changes[0].1)], e.cause))
                    .collect(),
                vec![0],
                2.0,
            );
            let alone = hand_filter(
                vec![vec![&r[p]], vec![&r[2 + p]]],
                DriftWeight::FreeReceptors(vec![6.0]),
            ).run(&single, &times).unwrap();
            for k in 0..2 {
                for i in 0..times.len() {
                    prop_assert!((joint.z_voxel[k][p][i] - alone.z_voxel[k][0][i]).abs() < 1e-9);
                }
            }
        }
        for k in 0..2 {
            for i in 0..times.len() {
                let sum: f64 = joint.z_voxel[k].iter().map(|z| z[i]).sum();
                prop_assert!((joint.z[k][i] - 0.5f64.ln() - sum).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn shifting_every_prior_leaves_decisions_unchanged(
        obs in arb_stream(1),
        sigs in prop::collection::vec(arb_signal(), 2),
        shift in -50.0f64..50.0,
    ) {
        let r: Vec<ReferenceSignal> = sigs.into_iter().enumerate().map(|(k, v)| signal(v, k, 0)).collect();
        let times: Vec<f64> = (0..=20).map(|i| i as f64 * 0.1).collect();
        let mut f = hand_filter(vec![vec![&r[0]], vec![&r[1]]], DriftWeight::Unit);
        let before = f.run(&obs, &times).unwrap().decisions();
        for lp in &mut f.log_prior {
            *lp += shift;
        }
        prop_assert_eq!(before, f.run(&obs, &times).unwrap().decisions());
    }

    #[test]
    fn larger_reference_gains_evidence_at_every_jump(
        obs in arb_stream(1),
        base in prop::collection::vec(0.01f64..5.0, 21),
        gap in prop::collection::vec(0.01f64..3.0, 21),
    ) {
        let hi: Vec<f64> = base.iter().zip(&gap).map(|(b, g)| b + g).collect();
        let r0 = signal(base, 0, 0);
        let r1 = signal(hi, 1, 0);
        let out = hand_filter(vec![vec![&r0], vec![&r1]], DriftWeight::FreeReceptors(vec![40.0]))
            .run(&obs, &[2.0]).unwrap();
        for j in &out.jumps {
            let want = (r1.value_at(j.time) / r0.value_at(j.time)).ln();
            prop_assert!(want > 0.0);
            prop_assert!((j.increments[1] - j.increments[0] - want).abs() < 1e-9);
        }
    }
}
