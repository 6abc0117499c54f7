use nalgebra::{DMatrix, DVector, Vector2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dyntrack::features::*;
use dyntrack::frame::{Frame, Location, TemplateGeometry};
use dyntrack::synth::smooth_image;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Kernel weight written out from the definition, independent of the library.
fn kernel(dx: f64, dy: f64, hw: f64, hh: f64) -> f64 {
    (1.0 - (dx / hw).powi(2) - (dy / hh).powi(2)).max(0.0)
}

fn brute_hard(patch: &[f64], g: TemplateGeometry, bins: usize) -> Vec<f64> {
    let (hw, hh) = (g.cols as f64 / 2.0, g.rows as f64 / 2.0);
    let mut h = vec![0.0; bins];
    let mut kappa = 0.0;
    for col in 0..g.cols {
        for row in 0..g.rows {
            let dx = col as f64 - (g.cols as f64 - 1.0) / 2.0;
            let dy = row as f64 - (g.rows as f64 - 1.0) / 2.0;
            let k = kernel(dx, dy, hw, hh);
            kappa += k;
            let s = patch[col * g.rows + row];
            if (0.0..=1.0).contains(&s) {
                let u = ((s * bins as f64) as usize).min(bins - 1);
                h[u] += k;
            }
        }
    }
    h.iter().map(|v| v / kappa).collect()
}

fn random_patch(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

#[test]
fn hard_histogram_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (rows, cols) in [(5, 5), (7, 4), (11, 9)] {
        let g = TemplateGeometry::new(rows, cols).unwrap();
        let w = KernelWindow::new(g).unwrap();
        let patch = random_patch(&mut rng, g.len());
        let lib = hard_histogram(&patch, &w, &BinningSpec::default()).unwrap();
        let oracle = brute_hard(&patch, g, 10);
        for (a, b) in lib.values.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}

#[test]
fn frame_window_at_the_centre_equals_patch_histogram() {
    let g = TemplateGeometry::new(9, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let patch = smooth_image(g, 0.1, 0.9, &mut rng);
    let frame = Frame::from_template(g, &patch).unwrap();
    let w = KernelWindow::new(g).unwrap();
    let b = BinningSpec::default();
    let loc = Location::new(3.0, 4.0);
    let from_frame = frame_soft_histogram(&frame, &loc, &w, &b).unwrap();
    let from_patch = soft_histogram(patch.as_slice(), &w, &b).unwrap();
    for (a, c) in from_frame.values.iter().zip(&from_patch.values) {
        assert!((a - c).abs() < 1e-14);
    }
    let hard_frame = frame_hard_histogram(&frame, &loc, &w, &b).unwrap();
    let hard_patch = hard_histogram(patch.as_slice(), &w, &b).unwrap();
    for (a, c) in hard_frame.values.iter().zip(&hard_patch.values) {
        assert!((a - c).abs() < 1e-14);
    }
}

#[test]
fn memberships_match_direct_sigmoids() {
    let b = BinningSpec::default();
    let mut m = vec![0.0; 10];
    for i in 0..=200 {
        let s = -0.2 + 1.4 * i as f64 / 200.0;
        b.memberships(s, &mut m);
        for (u, mu) in m.iter().enumerate() {
            let direct = sigmoid(100.0 * (s - u as f64 / 10.0)) - sigmoid(100.0 * (s - (u + 1) as f64 / 10.0));
            assert!((mu - direct).abs() < 1e-12, "s = {s}, bin {u}");
        }
    }
}

#[test]
fn membership_derivatives_match_finite_differences() {
    let b = BinningSpec::default();
    let (mut d, mut lo, mut hi) = (vec![0.0; 10], vec![0.0; 10], vec![0.0; 10]);
    let h = 1e-6;
    for i in 0..100 {
        let s = 0.005 + i as f64 / 100.0;
        b.membership_derivatives(s, &mut d);
        b.memberships(s - h, &mut lo);
        b.memberships(s + h, &mut hi);
        for u in 0..10 {
            let fd = (hi[u] - lo[u]) / (2.0 * h);
            assert!((d[u] - fd).abs() < 1e-5 * (1.0 + fd.abs()));
        }
    }
}

#[test]
fn location_jacobian_matches_finite_differences() {
    let fg = TemplateGeometry::new(40, 40).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let frame = Frame::from_template(fg, &smooth_image(fg, 0.05, 0.95, &mut rng)).unwrap();
    let g = TemplateGeometry::new(11, 9).unwrap();
    let w = KernelWindow::new(g).unwrap();
    let b = BinningSpec::default();
    let h = 1e-6;
    for loc in [Location::new(20.3, 17.71), Location::new(14.55, 22.1), Location::new(25.05, 25.95)] {
        let (_, jac) = frame_soft_histogram_with_jacobian(&frame, &loc, &w, &b).unwrap();
        for axis in 0..2 {
            let mut e = Vector2::zeros();
            e[axis] = h;
            let hp = frame_soft_histogram(&frame, &(loc + e), &w, &b).unwrap();
            let hm = frame_soft_histogram(&frame, &(loc - e), &w, &b).unwrap();
            for u in 0..10 {
                let fd = (hp.values[u] - hm.values[u]) / (2.0 * h);
                assert!((jac[(u, axis)] - fd).abs() < 1e-6, "bin {u} axis {axis}: {} vs {fd}", jac[(u, axis)]);
            }
        }
    }
}

#[test]
fn template_jacobian_matches_finite_differences_of_sqrt_histogram() {
    let g = TemplateGeometry::new(9, 9).unwrap();
    let w = KernelWindow::new(g).unwrap();
    let b = BinningSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mu = smooth_image(g, 0.2, 0.8, &mut rng);
    let c = DMatrix::from_fn(g.len(), 3, |_, _| 0.05 * (rng.random::<f64>() - 0.5));
    let x = DVector::from_vec(vec![0.3, -0.1, 0.2]);
    let s2 = 0.01;
    let t = &mu + &c * &x;
    let (_, m) = template_jacobian(t.as_slice(), &c, &w, &b, s2).unwrap();
    let h = 1e-6;
    for k in 0..3 {
        let mut e = DVector::zeros(3);
        e[k] = h;
        let hp = soft_histogram((&mu + &c * (&x + &e)).as_slice(), &w, &b).unwrap().sqrt();
        let hm = soft_histogram((&mu + &c * (&x - &e)).as_slice(), &w, &b).unwrap().sqrt();
        let fd = (hp - hm) / (2.0 * h);
        for u in 0..10 {
            assert!((s2 * m[(u, k)] - fd[u]).abs() < 1e-6 * (1.0 + fd[u].abs()));
        }
    }
}

#[test]
fn identity_jacobian_matches_finite_differences() {
    let fg = TemplateGeometry::new(30, 30).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let frame = Frame::from_template(fg, &smooth_image(fg, 0.0, 1.0, &mut rng)).unwrap();
    let g = TemplateGeometry::new(7, 7).unwrap();
    let loc = Location::new(14.3, 15.6);
    let jac = identity_location_jacobian(&frame, &loc, g).unwrap();
    let h = 1e-7;
    for axis in 0..2 {
        let mut e = Vector2::zeros();
        e[axis] = h;
        let fd = (frame.extract_patch(&(loc + e), g).unwrap() - frame.extract_patch(&(loc - e), g).unwrap()) / (2.0 * h);
        assert!((jac.column(axis) - fd).amax() < 1e-6);
    }
}

#[test]
fn matusita_relates_to_bhattacharyya() {
    let g = TemplateGeometry::new(8, 8).unwrap();
    let w = KernelWindow::new(g).unwrap();
    let b = BinningSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h1 = hard_histogram(&random_patch(&mut rng, 64), &w, &b).unwrap();
    let h2 = hard_histogram(&random_patch(&mut rng, 64), &w, &b).unwrap();
    let d = matusita(&h1, &h2).unwrap();
    assert!((d - matusita(&h2, &h1).unwrap()).abs() < 1e-15);
    assert!((d - (2.0 - 2.0 * bhattacharyya(&h1, &h2).unwrap())).abs() < 1e-12);
    assert_eq!(matusita(&h1, &h1).unwrap(), 0.0);
}

#[test]
fn mismatched_inputs_are_rejected() {
    let g = TemplateGeometry::new(5, 5).unwrap();
    let w = KernelWindow::new(g).unwrap();
    let b = BinningSpec::default();
    assert!(soft_histogram(&[0.5; 24], &w, &b).is_err());
    assert!(BinningSpec::new(1, 100.0).is_err());
    assert!(BinningSpec::new(10, 0.0).is_err());
    let frame = Frame::filled(10, 10, 0.5);
    assert!(frame_soft_histogram(&frame, &Location::new(1.0, 1.0), &w, &b).is_err());
}

proptest! {
    #[test]
    fn hard_histogram_is_a_distribution(values in prop::collection::vec(0.0f64..=1.0, 49)) {
        let g = TemplateGeometry::new(7, 7).unwrap();
        let w = KernelWindow::new(g).unwrap();
        let h = hard_histogram(&values, &w, &BinningSpec::default()).unwrap();
        prop_assert!((h.total() - 1.0).abs() < 1e-12);
        prop_assert!(h.values.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn soft_total_telescopes(values in prop::collection::vec(-0.2f64..1.2, 35)) {
        let g = TemplateGeometry::new(7, 5).unwrap();
        let w = KernelWindow::new(g).unwrap();
        let h = soft_histogram(&values, &w, &BinningSpec::default()).unwrap();
        let oracle: f64 = values
            .iter()
            .zip(&w.weights)
            .map(|(s, k)| k * (sigmoid(100.0 * s) - sigmoid(100.0 * (s - 1.0))))
            .sum::<f64>()
            / w.kappa;
        prop_assert!((h.total() - oracle).abs() < 1e-12);
    }

    #[test]
    fn sifting_matrix_reproduces_soft_histogram(values in prop::collection::vec(0.0f64..=1.0, 30)) {
        let g = TemplateGeometry::new(6, 5).unwrap();
        let w = KernelWindow::new(g).unwrap();
        let b = BinningSpec::default();
        let u = sifting_matrix(&values, &b);
        let k = DVector::from_vec(w.weights.clone());
        let via_matrix = u.transpose() * k / w.kappa;
        let h = soft_histogram(&values, &w, &b).unwrap();
        for (a, c) in via_matrix.iter().zip(&h.values) {
            prop_assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_histogram_approaches_hard_away_from_edges(offsets in prop::collection::vec((0usize..10, 0.25f64..0.75), 25)) {
        let g = TemplateGeometry::new(5, 5).unwrap();
        let w = KernelWindow::new(g).unwrap();
        let b = BinningSpec::default();
        let values: Vec<f64> = offsets.iter().map(|(u, f)| (*u as f64 + f) / 10.0).collect();
        let soft = soft_histogram(&values, &w, &b).unwrap();
        let hard = hard_histogram(&values, &w, &b).unwrap();
        // a pixel a quarter bin from an edge leaks at most 1 - sig(2.5) + sig(-7.5)
        let leak = 1.0 - sigmoid(2.5) + sigmoid(-7.5);
        for (s, h) in soft.values.iter().zip(&hard.values) {
            prop_assert!((s - h).abs() <= leak + 1e-12);
        }
    }
}
