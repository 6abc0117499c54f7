use dyntrack::frame::TemplateGeometry;
use dyntrack::lds::{simulate, SimulateOptions};
use dyntrack::linalg;
use dyntrack::synth::*;

fn static_scene() -> ScenarioSpec {
    ScenarioSpec {
        background: BackgroundSpec::Static { value: 0.9 },
        trajectory: Trajectory::ConstantVelocity {
            start: [12.3, 14.6],
            velocity: [0.7, 0.45],
        },
        width: 60,
        height: 50,
        frames: 30,
        seed: 4,
        ..Default::default()
    }
}

#[test]
fn patches_at_placements_are_the_foreground_templates() {
    let spec = static_scene();
    let (frames, truth) = composite_sequence(&spec).unwrap();
    let g = spec.geometry().unwrap();
    let fg = simulate(&truth.model, &SimulateOptions::new(spec.frames, derive_seed(spec.seed, 1))).unwrap();
    let patches = frames.extract_patches(&truth.placements, g).unwrap();
    for (p, y) in patches.iter().zip(&fg.templates) {
        assert!((p - y).amax() < 1e-12);
    }
    for (l, p) in truth.locations.iter().zip(&truth.placements) {
        assert!((l - p).amax() <= 0.5 + 1e-12);
    }
    assert_eq!(truth.states, fg.states);
}

#[test]
fn background_is_untouched_outside_the_window() {
    let spec = static_scene();
    let (frames, truth) = composite_sequence(&spec).unwrap();
    let g = spec.geometry().unwrap();
    for (f, p) in frames.iter().zip(&truth.placements) {
        let (x0, y0) = g.top_left(p);
        for y in 0..f.height() {
            for x in 0..f.width() {
                let inside = (x as i64) >= x0 && (x as i64) < x0 + g.cols as i64 && (y as i64) >= y0 && (y as i64) < y0 + g.rows as i64;
                if !inside {
                    assert_eq!(f.get(x, y), 0.9);
                }
            }
        }
    }
}

#[test]
fn scenarios_are_deterministic() {
    let spec = ScenarioSpec {
        frames: 10,
        obs_noise_sigma: 0.02,
        trajectory: Trajectory::RandomWalk {
            start: [30.0, 30.0],
            step_std: 1.0,
        },
        ..Default::default()
    };
    let (a, ta) = composite_sequence(&spec).unwrap();
    let (b, tb) = composite_sequence(&spec).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta.locations, tb.locations);
    let other = ScenarioSpec { seed: 1, ..spec };
    assert_ne!(composite_sequence(&other).unwrap().0, a);
}

#[test]
fn trajectory_leaving_the_frame_is_rejected() {
    let spec = ScenarioSpec {
        trajectory: Trajectory::ConstantVelocity {
            start: [15.0, 15.0],
            velocity: [3.0, 0.0],
        },
        ..static_scene()
    };
    assert!(composite_sequence(&spec).is_err());
}

#[test]
fn random_walk_stays_inside_the_valid_range() {
    let spec = ScenarioSpec {
        frames: 200,
        trajectory: Trajectory::RandomWalk {
            start: [30.0, 25.0],
            step_std: 4.0,
        },
        ..static_scene()
    };
    let (_, truth) = composite_sequence(&spec).unwrap();
    let g = spec.geometry().unwrap();
    assert!(truth.placements.iter().all(|p| g.fits(p, spec.width, spec.height)));
}

#[test]
fn random_models_have_requested_spectral_radius_and_pixel_std() {
    let g = TemplateGeometry::new(13, 11).unwrap();
    for seed in 0..5 {
        let m = random_model_with(4, g, 0.85, 0.05, (0.3, 0.7), seed).unwrap();
        assert!((linalg::spectral_radius(&m.a) - 0.85).abs() < 1e-10);
        assert!(m.has_orthonormal_c());
        assert!(m.mu.iter().all(|v| (0.3..=0.7).contains(v)));
        let p = linalg::stationary_covariance(&m.a, &m.q);
        let pixel_var = (&m.c * p * m.c.transpose()).trace() / g.len() as f64;
        assert!((pixel_var.sqrt() - 0.05).abs() < 1e-6, "pixel std {}", pixel_var.sqrt());
    }
}

#[test]
fn ground_truth_csv_round_trip() {
    let (_, truth) = composite_sequence(&ScenarioSpec { frames: 5, ..static_scene() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gt.csv");
    truth.write_csv(&path).unwrap();
    assert_eq!(read_ground_truth_csv(&path).unwrap(), truth.csv_rows());
}

#[test]
fn scenario_json_rejects_unknown_fields() {
    assert!(serde_json::from_str::<ScenarioSpec>(r#"{"frames": 3, "colour": "red"}"#).is_err());
    let s: ScenarioSpec = serde_json::from_str(r#"{"frames": 3}"#).unwrap();
    assert_eq!(s.frames, 3);
    assert_eq!(s.width, ScenarioSpec::default().width);
}
