//! State estimation at a known, fixed template location: the joint tracker's
//! state block against an extended Kalman filter and a condensation particle
//! filter.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features;
use crate::frame::{Frame, FrameSequence, Location};
use crate::lds::{LdsModel, StateSequence};
use crate::linalg;
use crate::synth::derive_seed;
use crate::tracker::{FeatureMode, Tracker, TrackerConfig};

/// Default particle count.
pub const DEFAULT_PARTICLES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    pub particles: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
}

impl ParticleSet {
    /// `count` particles drawn from `N(center, cov)`, equally weighted.
    pub fn gaussian(center: &DVector<f64>, cov: &DMatrix<f64>, count: usize, seed: u64) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidArgument("particle set needs at least one particle".into()));
        }
        let b = linalg::psd_sqrt(cov);
        let particles = (0..count)
            .map(|i| {
                let mut rng = particle_rng(seed, i);
                center + &b * standard_normal(&mut rng, center.len())
            })
            .collect();
        Ok(Self {
            particles,
            weights: vec![1.0 / count as f64; count],
        })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Weighted mean of the particles.
    pub fn mean(&self) -> DVector<f64> {
        let n = self.particles.first().map_or(0, |p| p.len());
        let mut m = DVector::zeros(n);
        for (p, w) in self.particles.iter().zip(&self.weights) {
            m += p * *w;
        }
        m
    }

    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

fn particle_rng(seed: u64, stream: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Observation vector, its prediction at `x`, the Jacobian of the prediction
/// and the per-component noise variance.
struct Linearization {
    z: DVector<f64>,
    h: DVector<f64>,
    jac: DMatrix<f64>,
    noise: f64,
}

fn linearize(tracker: &Tracker, frame: &Frame, loc: &Location, x: &DVector<f64>) -> Result<Linearization> {
    let model = tracker.model();
    let cfg = tracker.config();
    match cfg.feature {
        FeatureMode::Histogram => {
            let s2 = cfg.sigma_h2;
            let binning = cfg.binning();
            let hy = features::frame_soft_histogram(frame, loc, tracker.window(), &binning)?;
            let (ht, m) = features::state_jacobian_m(model, x, tracker.window(), &binning, s2)?;
            // d sqrt(zeta(mu + C x)) / dx = sigma_H^2 M
            Ok(Linearization {
                z: hy.sqrt(),
                h: ht.sqrt(),
                jac: m * s2,
                noise: s2,
            })
        }
        FeatureMode::Identity => Ok(Linearization {
            z: frame.extract_patch(loc, model.geometry)?,
            h: model.predict_template(x)?,
            jac: model.c.clone(),
            noise: cfg.obs_variance.unwrap_or(model.r).max(crate::tracker::IDENTITY_R_FLOOR),
        }),
    }
}

/// One predict/update cycle of the extended Kalman filter.
pub fn ekf_step(belief: &GaussianBelief, frame: &Frame, loc: &Location, tracker: &Tracker) -> Result<GaussianBelief> {
    let model = tracker.model();
    let n = model.order();
    if belief.mean.len() != n || belief.covariance.shape() != (n, n) {
        return Err(Error::dim("belief", n, belief.mean.len()));
    }
    let mean = &model.a * &belief.mean;
    let p = linalg::symmetrize(&(&model.a * &belief.covariance * model.a.transpose() + &model.q));
    let lin = linearize(tracker, frame, loc, &mean)?;
    let h = &lin.jac;
    // K = P H^T (H P H^T + r I)^-1 = (r I + P H^T H)^-1 P H^T
    let pht = &p * h.transpose();
    let lhs = DMatrix::identity(n, n) * lin.noise + &pht * h;
    let gain = match lhs.clone().lu().solve(&pht) {
        Some(k) if k.iter().all(|v| v.is_finite()) => k,
        _ => {
            log::warn!("EKF innovation system is singular; using a pseudo-inverse");
            linalg::pinv(&lhs) * &pht
        }
    };
    let innovation = &lin.z - &lin.h;
    let new_mean = mean + &gain * innovation;
    let ikh = DMatrix::identity(n, n) - &gain * h;
    let cov = &ikh * &p * ikh.transpose() + &gain * gain.transpose() * lin.noise;
    Ok(GaussianBelief {
        mean: new_mean,
        covariance: linalg::symmetrize(&cov),
    })
}

/// One propagate/weight/resample cycle of the condensation filter. Weights are
/// multiplied by `exp(-O_obs)` with `O_obs` the tracker's observation term,
/// and the set is resampled systematically when the effective sample size
/// falls below half the particle count.
pub fn pf_step(set: &ParticleSet, frame: &Frame, loc: &Location, tracker: &Tracker, seed: u64) -> Result<ParticleSet> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("particle set is empty".into()));
    }
    let model = tracker.model();
    let b = model.noise_factor();
    let count = set.len();
    let mut particles = Vec::with_capacity(count);
    let mut log_w = Vec::with_capacity(count);
    for (i, (p, w)) in set.particles.iter().zip(&set.weights).enumerate() {
        let mut rng = particle_rng(seed, i);
        let x = &model.a * p + &b * standard_normal(&mut rng, p.len());
        let o = tracker.observation_objective(frame, loc, &x)?;
        log_w.push(w.ln() - o);
        particles.push(x);
    }
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = if max.is_finite() {
        log_w.iter().map(|l| (l - max).exp()).collect()
    } else {
        vec![0.0; count]
    };
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        log::warn!("all particle weights vanished; resetting to uniform");
        weights = vec![1.0 / count as f64; count];
    } else {
        weights.iter_mut().for_each(|w| *w /= total);
    }
    let out = ParticleSet { particles, weights };
    if out.effective_sample_size() < count as f64 / 2.0 {
        let mut rng = particle_rng(seed, count);
        Ok(systematic_resample(&out, rng.random::<f64>()))
    } else {
        Ok(out)
    }
}

/// Systematic resampling with offset `u in [0, 1)`.
pub fn systematic_resample(set: &ParticleSet, u: f64) -> ParticleSet {
    let count = set.len();
    let mut particles = Vec::with_capacity(count);
    let mut cumulative = set.weights[0];
    let mut j = 0;
    for i in 0..count {
        let target = (i as f64 + u) / count as f64;
        while target > cumulative && j + 1 < count {
            j += 1;
            cumulative += set.weights[j];
        }
        particles.push(set.particles[j].clone());
    }
    ParticleSet {
        particles,
        weights: vec![1.0 / count as f64; count],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorMethod {
    DkSsd,
    Ekf,
    Pf,
}

impl EstimatorMethod {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorMethod::DkSsd => "dk-ssd",
            EstimatorMethod::Ekf => "ekf",
            EstimatorMethod::Pf => "pf",
        }
    }
}

impl std::str::FromStr for EstimatorMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dk-ssd" => Ok(Self::DkSsd),
            "ekf" => Ok(Self::Ekf),
            "pf" => Ok(Self::Pf),
            _ => Err(Error::InvalidArgument(format!("unknown method {s:?}"))),
        }
    }
}

/// How the first-frame state is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Least-squares fit to the first patch.
    Pinv,
    /// A draw from the stationary state distribution.
    Random { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct EstimateOptions {
    pub method: EstimatorMethod,
    pub init: InitMode,
    pub particles: usize,
    /// Seed for the particle filter.
    pub seed: u64,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            method: EstimatorMethod::DkSsd,
            init: InitMode::Pinv,
            particles: DEFAULT_PARTICLES,
            seed: 0,
        }
    }
}

/// Estimated states and, when the truth is known, per-frame errors.
#[derive(Debug, Clone)]
pub struct StateEstimate {
    pub states: StateSequence,
    pub errors: Option<Vec<f64>>,
    /// `k sqrt(tr Q)` for `k = 1, 2, 3`.
    pub bands: [f64; 3],
}

/// One line of an error-trace CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub t: usize,
    pub err: f64,
    pub std1: f64,
    pub std2: f64,
    pub std3: f64,
    pub method: String,
    pub seed: u64,
}

impl StateEstimate {
    pub fn error_rows(&self, method: EstimatorMethod, seed: u64) -> Vec<ErrorRow> {
        self.errors
            .as_deref()
            .unwrap_or_default()
            .iter()
            .enumerate()
            .map(|(t, e)| ErrorRow {
                t,
                err: *e,
                std1: self.bands[0],
                std2: self.bands[1],
                std3: self.bands[2],
                method: method.name().to_string(),
                seed,
            })
            .collect()
    }

    pub fn write_error_csv(&self, path: impl AsRef<Path>, method: EstimatorMethod, seed: u64) -> Result<()> {
        crate::io::write_csv(path, &self.error_rows(method, seed))
    }
}

/// Noise-scale bands `k sqrt(tr Q)`, the root-mean-square of `|B v|` times `k`.
pub fn noise_bands(model: &LdsModel) -> [f64; 3] {
    let s = model.q.trace().max(0.0).sqrt();
    [s, 2.0 * s, 3.0 * s]
}

/// Initial state for `init`.
pub fn initial_state(model: &LdsModel, first: &Frame, loc: &Location, init: InitMode) -> Result<DVector<f64>> {
    match init {
        InitMode::Pinv => model.init_state(&first.extract_patch(loc, model.geometry)?),
        InitMode::Random { seed } => {
            let n = model.order();
            let cov = if linalg::spectral_radius(&model.a) < 1.0 {
                linalg::stationary_covariance(&model.a, &model.q)
            } else {
                model.q.clone()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(linalg::psd_sqrt(&cov) * standard_normal(&mut rng, n))
        }
    }
}

/// Run an estimator over `frames` with the template fixed at `loc`.
pub fn estimate_states(
    frames: &FrameSequence,
    loc: &Location,
    tracker: &Tracker,
    options: &EstimateOptions,
    truth: Option<&StateSequence>,
) -> Result<StateEstimate> {
    let model = tracker.model();
    let first = frames
        .get(0)
        .ok_or_else(|| Error::InvalidArgument("cannot estimate on an empty sequence".into()))?;
    if let Some(t) = truth {
        if t.len() != frames.len() {
            return Err(Error::dim("ground-truth states", frames.len(), t.len()));
        }
    }
    let x0 = initial_state(model, first, loc, options.init)?;
    let mut states = vec![x0.clone()];
    match options.method {
        EstimatorMethod::DkSsd => {
            for frame in frames.iter().skip(1) {
                let prev = states.last().expect("non-empty");
                let s = tracker.solve(frame, loc, &(&model.a * prev), Some(prev), true)?;
                states.push(s.state);
            }
        }
        EstimatorMethod::Ekf => {
            let mut belief = GaussianBelief {
                mean: x0,
                covariance: model.q.clone(),
            };
            for frame in frames.iter().skip(1) {
                belief = ekf_step(&belief, frame, loc, tracker)?;
                states.push(belief.mean.clone());
            }
        }
        EstimatorMethod::Pf => {
            let mut set = ParticleSet::gaussian(&x0, &model.q, options.particles, derive_seed(options.seed, 0))?;
            for (t, frame) in frames.iter().enumerate().skip(1) {
                set = pf_step(&set, frame, loc, tracker, derive_seed(options.seed, t as u64))?;
                states.push(set.mean());
            }
        }
    }
    let errors = truth.map(|t| {
        states
            .iter()
            .zip(&t.states)
            .map(|(e, x)| (e - x).norm())
            .collect()
    });
    Ok(StateEstimate {
        states: StateSequence::new(states, model.order())?,
        errors,
        bands: noise_bands(model),
    })
}

/// Convenience wrapper building the tracker from a model and configuration.
pub fn estimate_states_with(
    frames: &FrameSequence,
    loc: &Location,
    model: &LdsModel,
    config: &TrackerConfig,
    options: &EstimateOptions,
    truth: Option<&StateSequence>,
) -> Result<StateEstimate> {
    estimate_states(frames, loc, &Tracker::new(model, config)?, options, truth)
}

/// Fixed-location benchmark: random systems, each simulated and estimated
/// with the template filling the whole frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub order: usize,
    pub rows: usize,
    pub cols: usize,
    pub spectral_radius: f64,
    pub pixel_std: f64,
    /// Frames per sequence, including the initial one.
    pub frames: usize,
    pub systems: usize,
    pub particles: usize,
    pub tracker: TrackerConfig,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            order: 5,
            rows: 21,
            cols: 21,
            spectral_radius: 0.9,
            pixel_std: crate::synth::DEFAULT_PIXEL_STD,
            frames: 101,
            systems: 10,
            particles: DEFAULT_PARTICLES,
            tracker: TrackerConfig::default(),
        }
    }
}

/// Result for one benchmark system.
#[derive(Debug, Clone)]
pub struct BenchmarkRun {
    pub system: usize,
    pub model_seed: u64,
    pub estimate: StateEstimate,
}

/// Which first-frame state the benchmark uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchmarkInit {
    Pinv,
    Random,
}

/// Run `method` over `spec.systems` random systems. System `k` draws its
/// model, simulation and estimator seeds from streams `3k`, `3k + 1` and
/// `3k + 2` of `seed`.
pub fn run_benchmark(spec: &BenchmarkSpec, method: EstimatorMethod, init: BenchmarkInit, seed: u64) -> Result<Vec<BenchmarkRun>> {
    let geometry = crate::frame::TemplateGeometry::new(spec.rows, spec.cols)?;
    let loc = Location::new((spec.cols as f64 - 1.0) / 2.0, (spec.rows as f64 - 1.0) / 2.0);
    let mut runs = Vec::with_capacity(spec.systems);
    for k in 0..spec.systems as u64 {
        let model_seed = derive_seed(seed, 3 * k);
        let model = crate::synth::random_model_with(
            spec.order,
            geometry,
            spec.spectral_radius,
            spec.pixel_std,
            (0.2, 0.8),
            model_seed,
        )?;
        let sim = crate::lds::simulate(&model, &crate::lds::SimulateOptions::new(spec.frames, derive_seed(seed, 3 * k + 1)))?;
        let run_seed = derive_seed(seed, 3 * k + 2);
        let options = EstimateOptions {
            method,
            init: match init {
                BenchmarkInit::Pinv => InitMode::Pinv,
                BenchmarkInit::Random => InitMode::Random { seed: run_seed },
            },
            particles: spec.particles,
            seed: run_seed,
        };
        let estimate = estimate_states_with(&sim.frames(), &loc, &model, &spec.tracker, &options, Some(&sim.states))?;
        runs.push(BenchmarkRun {
            system: k as usize,
            model_seed,
            estimate,
        });
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn systematic_resampling_follows_weights() {
        let set = ParticleSet {
            particles: (0..4).map(|i| DVector::from_element(1, i as f64)).collect(),
            weights: vec![0.0, 0.5, 0.0, 0.5],
        };
        let r = systematic_resample(&set, 0.3);
        let picked: Vec<f64> = r.particles.iter().map(|p| p[0]).collect();
        assert_eq!(picked, vec![1.0, 1.0, 3.0, 3.0]);
        assert!(r.weights.iter().all(|w| (*w - 0.25).abs() < 1e-15));
    }

    #[test]
    fn method_names_roundtrip() {
        for m in [EstimatorMethod::DkSsd, EstimatorMethod::Ekf, EstimatorMethod::Pf] {
            assert_eq!(m.name().parse::<EstimatorMethod>().unwrap(), m);
        }
        assert!("kf".parse::<EstimatorMethod>().is_err());
    }
}
