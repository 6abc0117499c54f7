use proptest::prelude::*;

use dyntrack::frame::Location;
use dyntrack::metrics::*;

/// The median minimises the sum of absolute deviations.
fn abs_loss(values: &[f64], m: f64) -> f64 {
    values.iter().map(|v| (v - m).abs()).sum()
}

proptest! {
    #[test]
    fn median_minimises_absolute_deviation(values in prop::collection::vec(-100.0f64..100.0, 1..40)) {
        let m = median(&values).unwrap();
        let best = abs_loss(&values, m);
        for v in &values {
            prop_assert!(best <= abs_loss(&values, *v) + 1e-9);
        }
        let below = values.iter().filter(|v| **v < m).count();
        let above = values.iter().filter(|v| **v > m).count();
        prop_assert!(below <= values.len() / 2 && above <= values.len() / 2);
    }

    #[test]
    fn rse_is_shift_invariant_and_scales(values in prop::collection::vec(0.0f64..10.0, 1..30), shift in -5.0f64..5.0, scale in 0.1f64..10.0) {
        let r = robust_standard_error(&values).unwrap();
        let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
        let scaled: Vec<f64> = values.iter().map(|v| v * scale).collect();
        prop_assert!((robust_standard_error(&shifted).unwrap() - r).abs() < 1e-9);
        prop_assert!((robust_standard_error(&scaled).unwrap() - scale * r).abs() < 1e-9 * (1.0 + scale * r));
    }

    #[test]
    fn report_matches_brute_force(points in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0, -50.0f64..50.0, -50.0f64..50.0), 1..20)) {
        let tracks: Vec<Location> = points.iter().map(|p| Location::new(p.0, p.1)).collect();
        let truth: Vec<Location> = points.iter().map(|p| Location::new(p.2, p.3)).collect();
        let r = compute_metrics(&tracks, &truth).unwrap();
        let errors: Vec<f64> = points.iter().map(|p| ((p.0 - p.2).powi(2) + (p.1 - p.3).powi(2)).sqrt()).collect();
        let n = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let std = (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert_eq!(r.frames, errors.len());
        prop_assert!((r.mean - mean).abs() < 1e-9);
        prop_assert!((r.std - std).abs() < 1e-9);
        for (a, b) in r.errors.iter().zip(&errors) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn length_mismatch_is_rejected() {
    let a = vec![Location::new(0.0, 0.0)];
    assert!(compute_metrics(&a, &[]).is_err());
}
