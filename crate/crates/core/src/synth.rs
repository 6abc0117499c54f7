//! Synthetic dynamic textures and moving-patch scenarios with exact ground
//! truth.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Frame, FrameSequence, Location, TemplateGeometry};
use crate::lds::{self, LdsModel, SimulateOptions, StateSequence};
use crate::linalg;

/// Default RMS per-pixel standard deviation of a random texture around its mean.
pub const DEFAULT_PIXEL_STD: f64 = 0.06;

/// Independent sub-seed `k` of a master seed.
pub fn derive_seed(seed: u64, k: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng.next_u64()
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Smooth random image: a few random low-frequency cosines, rescaled to
/// `[lo, hi]`. Column-wise, like every template vector.
pub fn smooth_image(geometry: TemplateGeometry, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.5..1.0),
            )
        })
        .collect();
    let raw = DVector::from_fn(geometry.len(), |k, _| {
        let (row, col) = geometry.position(k);
        waves
            .iter()
            .map(|(fx, fy, phase, amp)| {
                let arg = std::f64::consts::TAU * (fx * col as f64 / geometry.cols as f64 + fy * row as f64 / geometry.rows as f64);
                amp * (arg + phase).cos()
            })
            .sum::<f64>()
    });
    let min = raw.min();
    let max = raw.max();
    if max - min <= f64::EPSILON {
        return DVector::from_element(geometry.len(), 0.5 * (lo + hi));
    }
    raw.map(|v| lo + (hi - lo) * (v - min) / (max - min))
}

/// Zero-mean smooth random field: Gaussian-weighted cosines of random
/// orientation with at most two cycles across the window.
pub fn random_field(geometry: TemplateGeometry, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..8)
        .map(|_| {
            (
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                StandardNormal.sample(rng),
            )
        })
        .collect();
    DVector::from_fn(geometry.len(), |k, _| {
        let (row, col) = geometry.position(k);
        waves
            .iter()
            .map(|(fx, fy, phase, amp)| {
                let arg = std::f64::consts::TAU * (fx * col as f64 / geometry.cols as f64 + fy * row as f64 / geometry.rows as f64);
                amp * (arg + phase).cos()
            })
            .sum::<f64>()
    })
}

/// Random stable texture model with `A` of spectral radius `rho`, orthonormal
/// `C`, a smooth mean in `[0.2, 0.8]` and `Q = q I` scaled so the stationary
/// RMS pixel standard deviation is [`DEFAULT_PIXEL_STD`].
pub fn random_model(n: usize, geometry: TemplateGeometry, rho: f64, seed: u64) -> Result<LdsModel> {
    random_model_with(n, geometry, rho, DEFAULT_PIXEL_STD, (0.2, 0.8), seed)
}

/// [`random_model`] with an explicit pixel standard deviation and mean range.
pub fn random_model_with(
    n: usize,
    geometry: TemplateGeometry,
    rho: f64,
    pixel_std: f64,
    mean_range: (f64, f64),
    seed: u64,
) -> Result<LdsModel> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidArgument(format!("spectral radius must lie in (0, 1), got {rho}")));
    }
    if geometry.is_empty() || n > geometry.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot fit order {n} into a {}x{} template",
            geometry.rows, geometry.cols
        )));
    }
    if !(pixel_std >= 0.0) {
        return Err(Error::InvalidArgument(format!("pixel std must be >= 0, got {pixel_std}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = loop {
        let raw = gaussian_matrix(&mut rng, n, n);
        let r = linalg::spectral_radius(&raw);
        if n == 0 {
            break raw;
        }
        if r > 1e-8 {
            break raw * (rho / r);
        }
    };
    let mut raw_c = DMatrix::zeros(geometry.len(), n);
    for j in 0..n {
        raw_c.set_column(j, &random_field(geometry, &mut rng));
    }
    let c = linalg::thin_qr(&raw_c).0;
    let mu = smooth_image(geometry, mean_range.0, mean_range.1, &mut rng);
    let q = if n == 0 {
        DMatrix::zeros(0, 0)
    } else {
        let unit = linalg::stationary_covariance(&a, &DMatrix::identity(n, n));
        let scale = pixel_std * pixel_std * geometry.len() as f64 / unit.trace();
        DMatrix::identity(n, n) * scale
    };
    LdsModel::new(mu, a, c, q, 0.0, geometry)
}

/// Path of the patch centre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Trajectory {
    ConstantVelocity { start: [f64; 2], velocity: [f64; 2] },
    Sinusoidal { center: [f64; 2], amplitude: [f64; 2], period: f64 },
    /// Gaussian steps, reflected back into the valid centre range.
    RandomWalk { start: [f64; 2], step_std: f64 },
}

impl Default for Trajectory {
    fn default() -> Self {
        let v = std::f64::consts::FRAC_1_SQRT_2;
        Trajectory::ConstantVelocity {
            start: [15.0, 15.0],
            velocity: [v, v],
        }
    }
}

impl Trajectory {
    pub fn centers(&self, frames: usize, valid: (Location, Location), rng: &mut ChaCha8Rng) -> Vec<Location> {
        match self {
            Trajectory::ConstantVelocity { start, velocity } => (0..frames)
                .map(|t| Location::new(start[0] + velocity[0] * t as f64, start[1] + velocity[1] * t as f64))
                .collect(),
            Trajectory::Sinusoidal {
                center,
                amplitude,
                period,
            } => (0..frames)
                .map(|t| {
                    let s = (std::f64::consts::TAU * t as f64 / period).sin();
                    Location::new(center[0] + amplitude[0] * s, center[1] + amplitude[1] * s)
                })
                .collect(),
            Trajectory::RandomWalk { start, step_std } => {
                let (lo, hi) = valid;
                let reflect = |v: f64, lo: f64, hi: f64| {
                    if hi <= lo {
                        return lo;
                    }
                    let span = hi - lo;
                    let m = (v - lo).rem_euclid(2.0 * span);
                    lo + if m > span { 2.0 * span - m } else { m }
                };
                let mut p = Location::new(start[0], start[1]);
                let mut out = Vec::with_capacity(frames);
                for t in 0..frames {
                    if t > 0 {
                        let dx: f64 = StandardNormal.sample(rng);
                        let dy: f64 = StandardNormal.sample(rng);
                        p = Location::new(
                            reflect(p.x + step_std * dx, lo.x, hi.x),
                            reflect(p.y + step_std * dy, lo.y, hi.y),
                        );
                    }
                    out.push(p);
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForegroundSpec {
    pub order: usize,
    pub rows: usize,
    pub cols: usize,
    pub spectral_radius: f64,
    pub pixel_std: f64,
    /// Seed of the generator model; derived from the scenario seed if absent.
    pub model_seed: Option<u64>,
}

impl Default for ForegroundSpec {
    fn default() -> Self {
        Self {
            order: 5,
            rows: 21,
            cols: 21,
            spectral_radius: 0.9,
            pixel_std: DEFAULT_PIXEL_STD,
            model_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BackgroundSpec {
    Static {
        value: f64,
    },
    Lds {
        order: usize,
        spectral_radius: f64,
        pixel_std: f64,
        mean_range: [f64; 2],
    },
}

impl Default for BackgroundSpec {
    fn default() -> Self {
        BackgroundSpec::Lds {
            order: 5,
            spectral_radius: 0.9,
            pixel_std: DEFAULT_PIXEL_STD,
            mean_range: [0.6, 0.95],
        }
    }
}

/// A moving dynamic texture composited over a background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSpec {
    pub foreground: ForegroundSpec,
    pub background: BackgroundSpec,
    pub trajectory: Trajectory,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Standard deviation of i.i.d. pixel noise added after compositing.
    pub obs_noise_sigma: f64,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            foreground: ForegroundSpec::default(),
            background: BackgroundSpec::default(),
            trajectory: Trajectory::default(),
            width: 101,
            height: 101,
            frames: 100,
            obs_noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl ScenarioSpec {
    pub fn geometry(&self) -> Result<TemplateGeometry> {
        TemplateGeometry::new(self.foreground.rows, self.foreground.cols)
    }

    /// Generator model of the foreground texture.
    pub fn foreground_model(&self) -> Result<LdsModel> {
        let f = &self.foreground;
        random_model_with(
            f.order,
            self.geometry()?,
            f.spectral_radius,
            f.pixel_std,
            (0.2, 0.8),
            f.model_seed.unwrap_or_else(|| derive_seed(self.seed, 0)),
        )
    }

    fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::InvalidArgument("scenario needs at least one frame".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("frame size must be non-empty".into()));
        }
        if !(self.obs_noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument("obs_noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Exact ground truth of a rendered scenario.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Real-valued patch centres along the trajectory.
    pub locations: Vec<Location>,
    /// Centres of the integer placements actually rendered.
    pub placements: Vec<Location>,
    pub states: StateSequence,
    pub model: LdsModel,
}

/// One line of a ground-truth CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRow {
    pub frame: usize,
    pub cx: f64,
    pub cy: f64,
}

impl GroundTruth {
    pub fn csv_rows(&self) -> Vec<GroundTruthRow> {
        self.locations
            .iter()
            .enumerate()
            .map(|(t, l)| GroundTruthRow {
                frame: t,
                cx: l.x,
                cy: l.y,
            })
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_csv(path, &self.csv_rows())
    }
}

pub fn read_ground_truth_csv(path: impl AsRef<Path>) -> Result<Vec<GroundTruthRow>> {
    crate::io::read_csv(path)
}

/// Render a scenario: background frames with the foreground texture pasted at
/// the nearest integer placement of each trajectory centre, plus pixel noise.
pub fn composite_sequence(spec: &ScenarioSpec) -> Result<(FrameSequence, GroundTruth)> {
    spec.validate()?;
    let geometry = spec.geometry()?;
    let (w, h) = (spec.width, spec.height);
    let valid = geometry.valid_centers(w, h).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "{}x{} template does not fit a {w}x{h} frame",
            geometry.rows, geometry.cols
        ))
    })?;
    let mut traj_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 5));
    let locations = spec.trajectory.centers(spec.frames, valid, &mut traj_rng);
    let mut placements = Vec::with_capacity(locations.len());
    for (t, l) in locations.iter().enumerate() {
        let (x0, y0) = geometry.top_left(l);
        let p = geometry.center_of(x0, y0);
        if x0 < 0 || y0 < 0 || !geometry.fits(&p, w, h) || !l.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "trajectory leaves the frame at t = {t}: centre ({:.3}, {:.3})",
                l.x, l.y
            )));
        }
        placements.push(p);
    }

    let model = spec.foreground_model()?;
    let fg = lds::simulate(&model, &SimulateOptions::new(spec.frames, derive_seed(spec.seed, 1)))?;

    let frame_geometry = TemplateGeometry::new(h, w)?;
    let backgrounds: Vec<Frame> = match &spec.background {
        BackgroundSpec::Static { value } => vec![Frame::filled(w, h, *value); spec.frames],
        BackgroundSpec::Lds {
            order,
            spectral_radius,
            pixel_std,
            mean_range,
        } => {
            let bg_model = random_model_with(
                *order,
                frame_geometry,
                *spectral_radius,
                *pixel_std,
                (mean_range[0], mean_range[1]),
                derive_seed(spec.seed, 2),
            )?;
            let sim = lds::simulate(&bg_model, &SimulateOptions::new(spec.frames, derive_seed(spec.seed, 3)))?;
            sim.templates
                .iter()
                .map(|t| Frame::from_template(frame_geometry, t))
                .collect::<Result<_>>()?
        }
    };

    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 4));
    let mut frames = Vec::with_capacity(spec.frames);
    for (t, mut frame) in backgrounds.into_iter().enumerate() {
        let (x0, y0) = geometry.top_left(&locations[t]);
        for k in 0..geometry.len() {
            let (row, col) = geometry.position(k);
            frame.set(x0 as usize + col, y0 as usize + row, fg.templates[t][k]);
        }
        if spec.obs_noise_sigma > 0.0 {
            for v in frame.data_mut() {
                let e: f64 = StandardNormal.sample(&mut noise_rng);
                *v += spec.obs_noise_sigma * e;
            }
        }
        frames.push(frame);
    }
    Ok((
        FrameSequence::new(frames)?,
        GroundTruth {
            locations,
            placements,
            states: fg.states,
            model,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_model_construction() {
        let g = TemplateGeometry::new(9, 9).unwrap();
        let m = random_model(4, g, 0.9, 3).unwrap();
        assert!((linalg::spectral_radius(&m.a) - 0.9).abs() < 1e-10);
        assert!(linalg::orthonormality_defect(&m.c) < 1e-10);
        assert!(m.mu.min() >= 0.2 - 1e-12 && m.mu.max() <= 0.8 + 1e-12);
        assert!(random_model(4, g, 1.0, 3).is_err());
    }

    #[test]
    fn constant_velocity_is_arithmetic() {
        let spec = ScenarioSpec {
            frames: 60,
            ..ScenarioSpec::default()
        };
        let (_, truth) = composite_sequence(&spec).unwrap();
        let d0 = truth.locations[1] - truth.locations[0];
        for t in 1..60 {
            let d = truth.locations[t] - truth.locations[t - 1];
            assert!((d - d0).amax() < 1e-12);
        }
    }

    #[test]
    fn out_of_frame_trajectory_is_rejected() {
        let spec = ScenarioSpec {
            trajectory: Trajectory::ConstantVelocity {
                start: [15.0, 15.0],
                velocity: [2.0, 0.0],
            },
            ..ScenarioSpec::default()
        };
        assert!(composite_sequence(&spec).is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }
}
