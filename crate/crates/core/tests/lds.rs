use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use dyntrack::frame::TemplateGeometry;
use dyntrack::lds::{identify, simulate, transform_model, LdsModel, SimulateOptions};
use dyntrack::linalg;
use dyntrack::recognition::martin_distance;
use dyntrack::synth::random_model;

/// Fixed point of `P = A P A^T + Q` by plain iteration.
fn lyapunov_by_iteration(a: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = q.clone();
    for _ in 0..2000 {
        p = a * &p * a.transpose() + q;
    }
    p
}

#[test]
fn stationary_covariance_matches_iteration() {
    let g = TemplateGeometry::new(7, 7).unwrap();
    let m = random_model(4, g, 0.9, 5).unwrap();
    let oracle = lyapunov_by_iteration(&m.a, &m.q);
    let lib = linalg::stationary_covariance(&m.a, &m.q);
    assert!((&lib - &oracle).norm() / oracle.norm() < 1e-10);
}

#[test]
fn simulated_states_have_stationary_covariance() {
    let g = TemplateGeometry::new(5, 5).unwrap();
    let m = random_model(3, g, 0.8, 9).unwrap();
    let sim = simulate(&m, &SimulateOptions::new(40_000, 10)).unwrap();
    let burn = 200;
    let xs = &sim.states.states[burn..];
    let mut cov = DMatrix::zeros(3, 3);
    for x in xs {
        cov += x * x.transpose();
    }
    cov /= xs.len() as f64;
    let oracle = lyapunov_by_iteration(&m.a, &m.q);
    let rel = (&cov - &oracle).norm() / oracle.norm();
    assert!(rel < 0.1, "empirical covariance off by {rel}");
}

#[test]
fn noiseless_templates_follow_the_model() {
    let g = TemplateGeometry::new(6, 6).unwrap();
    let m = random_model(3, g, 0.9, 2).unwrap();
    let x0 = DVector::from_vec(vec![0.1, -0.2, 0.05]);
    let opts = SimulateOptions {
        process_noise: false,
        initial_state: Some(x0.clone()),
        ..SimulateOptions::new(20, 0)
    };
    let sim = simulate(&m, &opts).unwrap();
    let mut x = x0;
    for (t, y) in sim.templates.iter().enumerate() {
        if t > 0 {
            x = &m.a * x;
        }
        assert!((y - (&m.mu + &m.c * &x)).amax() < 1e-12);
    }
}

#[test]
fn identified_model_has_orthonormal_basis_and_psd_noise() {
    let g = TemplateGeometry::new(9, 9).unwrap();
    let m = random_model(5, g, 0.9, 4).unwrap();
    let sim = simulate(&m, &SimulateOptions::new(120, 1)).unwrap();
    let id = identify(&sim.templates, g, 5).unwrap();
    assert!(id.model.has_orthonormal_c());
    assert!(linalg::min_eigenvalue(&id.model.q) > -1e-12);
    assert_eq!(id.rank, 5);
    assert!(!id.order_reduced());
    let sv = &id.singular_values;
    assert!(sv.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn low_rank_data_reduces_order() {
    let g = TemplateGeometry::new(8, 8).unwrap();
    let m = random_model(2, g, 0.9, 8).unwrap();
    let sim = simulate(&m, &SimulateOptions::new(60, 3)).unwrap();
    let id = identify(&sim.templates, g, 5).unwrap();
    assert_eq!(id.model.order(), 2);
    assert!(id.order_reduced());
}

#[test]
fn scaling_round_trip_preserves_smooth_mean() {
    let small = TemplateGeometry::new(15, 15).unwrap();
    let big = TemplateGeometry::new(30, 30).unwrap();
    let m = random_model(5, small, 0.9, 17).unwrap();
    let up = transform_model(&m, big, false).unwrap();
    let back = transform_model(&up, small, false).unwrap();
    let err = (&back.mu - &m.mu).amax();
    assert!(err < 0.05, "round-trip error {err}");
    assert!(up.has_orthonormal_c() && back.has_orthonormal_c());
}

#[test]
fn same_size_transform_keeps_the_subspace() {
    let g = TemplateGeometry::new(9, 11).unwrap();
    let m = random_model(4, g, 0.9, 23).unwrap();
    let t = transform_model(&m, g, false).unwrap();
    let proj = &t.c * t.c.transpose() * &m.c;
    assert!((&proj - &m.c).norm() < 1e-10);
    assert!(martin_distance(&m, &t).unwrap() < 1e-8);
}

#[test]
fn double_reflection_is_the_identity_model() {
    let g = TemplateGeometry::new(9, 7).unwrap();
    let m = random_model(3, g, 0.9, 29).unwrap();
    let twice = transform_model(&transform_model(&m, g, true).unwrap(), g, true).unwrap();
    assert!((&twice.mu - &m.mu).amax() < 1e-12);
    assert!(martin_distance(&m, &twice).unwrap() < 1e-8);
}

fn saved_model(m: &LdsModel) -> LdsModel {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    m.save(&path).unwrap();
    LdsModel::load(&path).unwrap()
}

#[test]
fn model_file_round_trip() {
    let g = TemplateGeometry::new(5, 6).unwrap();
    let m = random_model(3, g, 0.7, 41).unwrap();
    let back = saved_model(&m);
    assert_eq!(back.geometry, m.geometry);
    assert!((&back.a - &m.a).amax() < 1e-15);
    assert!((&back.c - &m.c).amax() < 1e-15);
    assert!((&back.q - &m.q).amax() < 1e-15);
    assert!((&back.mu - &m.mu).amax() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn identified_states_reproduce_the_data(seed in 0u64..10_000, n in 1usize..5, frames in 12usize..40) {
        let g = TemplateGeometry::new(6, 5).unwrap();
        let m = random_model(n, g, 0.9, seed).unwrap();
        let sim = simulate(&m, &SimulateOptions::new(frames, seed + 1)).unwrap();
        let id = identify(&sim.templates, g, n).unwrap();
        let k = id.model.order();
        let mut centred = DMatrix::zeros(g.len(), frames);
        for (t, y) in sim.templates.iter().enumerate() {
            centred.set_column(t, &(y - &id.model.mu));
        }
        let residual = (&centred - &id.model.c * &id.states).norm() / centred.norm();
        prop_assert!(k <= n);
        prop_assert!(residual < 1e-10, "residual {}", residual);
    }
}
