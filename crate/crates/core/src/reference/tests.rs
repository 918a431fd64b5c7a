use super::*;
use crate::model::{
    Boundary, Circuit, Configuration, MediumSpec, ReceiverSpec, SpatialGrid, SymbolDef,
    TransmitterSpec, VoxelIndex,
};

fn birth_death(diffusion: f64, activation: f64, receptors: u32) -> SystemModel {
    SystemModel::assemble(
        SpatialGrid::new([1, 1, 1], 1.0, Boundary::absorbing_default()).unwrap(),
        MediumSpec::new(diffusion).unwrap(),
        TransmitterSpec::uniform(
            VoxelIndex::new(1, 1, 1),
            vec![
                SymbolDef::PoissonRate { rate: 10.0, duration: f64::INFINITY },
                SymbolDef::PoissonRate { rate: 0.0, duration: f64::INFINITY },
            ],
        ),
        ReceiverSpec {
            voxels: vec![VoxelIndex::new(1, 1, 1)],
            configuration: Configuration::Partitioned,
            circuit: Circuit::ActDeact { activation, deactivation: 1.0 },
            receptors,
        },
    )
    .unwrap()
}

#[test]
fn interpolant_integral_is_exact() {
    let dt = 0.1;
    let values: Vec<f64> = (0..=20).map(|i| ((i as f64) * dt).powi(2)).collect();
    let s = ReferenceSignal::from_values(RefKind::Alpha, 0, 0, dt, values).unwrap();
    assert!((s.value_at(0.25) - 0.5 * (0.04 + 0.09)).abs() < 1e-12);
    // Fine midpoint quadrature of the piecewise-linear curve is exact per
    // segment up to round-off when the step divides the grid.
    for (a, b) in [(0.0, 2.0), (0.13, 1.57), (0.5, 0.5), (1.9, 2.6)] {
        let n = 20_000;
        let h = (b - a) / n as f64;
        let quad: f64 = (0..n).map(|i| s.value_at(a + (i as f64 + 0.5) * h) * h).sum();
        assert!((s.integral(a, b) - quad).abs() < 1e-6, "[{a}, {b}]");
    }
    assert_eq!(s.value_at(5.0), 4.0);
}

#[test]
fn alpha_matches_birth_death_mean() {
    // Six absorbing faces at d/50 each give λ = 1 when d = 50/6.
    let m = birth_death(50.0 / 6.0, 0.0, 0);
    let set = estimate_references(&m, 1.0, 0.01, 800, 3).unwrap();
    let a = &set.alpha[0][0];
    let i = a.len() - 1;
    let want = 10.0 * (1.0 - (-1.0f64).exp());
    assert!((a.values[i] - want).abs() < 3.0 * a.se[i], "{} ± {}", a.values[i], a.se[i]);
    assert!(set.alpha[1][0].values.iter().all(|&v| v == 0.0));
    assert!(set.beta[1][0].values.iter().all(|&v| v == 0.0));
}

#[test]
fn beta_is_receptor_count_times_alpha_without_activation() {
    let m = birth_death(1.0, 0.0, 7);
    let set = estimate_references(&m, 0.5, 0.05, 50, 9).unwrap();
    for (a, b) in set.alpha[0][0].values.iter().zip(&set.beta[0][0].values) {
        assert!((b - 7.0 * a).abs() < 1e-9);
    }
}

#[test]
fn standard_error_halves_when_runs_quadruple() {
    let m = birth_death(50.0 / 6.0, 0.0, 0);
    let se = |n| {
        let s = estimate_alpha(&m, 0, 1.0, 0.1, n, 21).unwrap();
        *s[0].se.last().unwrap()
    };
    let ratio = se(400) / se(1600);
    assert!(ratio > 1.7 && ratio < 2.3, "ratio {ratio}");
}

#[test]
fn single_kind_estimates_agree_with_the_joint_estimate() {
    let m = birth_death(1.0, 0.3, 3);
    let set = estimate_references(&m, 0.5, 0.05, 30, 4).unwrap();
    assert_eq!(estimate_alpha(&m, 0, 0.5, 0.05, 30, 4).unwrap(), set.alpha[0]);
    assert_eq!(estimate_beta(&m, 1, 0.5, 0.05, 30, 4).unwrap(), set.beta[1]);
}

#[test]
fn empty_grid_is_rejected() {
    assert!(matches!(uniform_grid(1.0, 0.0), Err(ReferenceError::EmptyGrid)));
    assert!(ReferenceSignal::from_values(RefKind::Beta, 0, 0, 0.1, vec![]).is_err());
}

#[test]
fn cache_round_trips() {
    let m = birth_death(1.0, 0.3, 3);
    let dir = tempfile::tempdir().unwrap();
    let cache = ReferenceCache::new(dir.path());
    let first = cache.load_or_estimate(&m, "abcdef0123456789ff", 0.5, 0.05, 20, 1).unwrap();
    let loaded = cache.load(&m, "abcdef0123456789ff", 0.5, 0.05, 20, 1).unwrap().unwrap();
    for (x, y) in first.beta[0][0].values.iter().zip(&loaded.beta[0][0].values) {
        assert!((x - y).abs() <= 1e-8 * x.abs().max(1.0));
    }
    assert!(cache.load(&m, "abcdef0123456789ff", 0.5, 0.05, 20, 2).unwrap().is_none());
}
