//! Joint estimation of template location and LDS state.
//!
//! For each frame the tracker minimises
//!
//! ```text
//! O(l, x) = 1/(2 sigma_H^2) |sqrt(zeta(y(l))) - sqrt(zeta(mu + C x))|^2
//!         + 1/2 (x - A x_prev)^T Q^-1 (x - A x_prev)
//! ```
//!
//! over the window centre `l` and the state `x`, where `zeta` is the soft
//! kernel-weighted histogram. In identity-feature mode the first term is
//! replaced by `1/(2R) |F(l) - mu - C x|^2` on raw intensities.
//!
//! The minimiser is a block-preconditioned gradient descent with Armijo
//! backtracking on the stacked `(l, x)` vector.

pub mod reference;

use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{self, BinningSpec, KernelWindow};
use crate::frame::{Frame, FrameSequence, Location};
use crate::lds::LdsModel;
use crate::linalg;

pub use reference::StaticTracker;

/// Smallest observation variance used in identity-feature mode.
pub const IDENTITY_R_FLOOR: f64 = 1e-6;

/// Relative eigenvalue floor for inverting `Q`.
const Q_FLOOR: f64 = 1e-8;

/// Relative damping of the Gauss-Newton preconditioner blocks.
const DAMPING: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    #[default]
    #[serde(alias = "hist")]
    Histogram,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArmijoConfig {
    pub initial_step: f64,
    pub backtrack: f64,
    pub sufficient_decrease: f64,
    pub max_backtracks: usize,
}

impl Default for ArmijoConfig {
    fn default() -> Self {
        Self {
            initial_step: 1.0,
            backtrack: 0.5,
            sufficient_decrease: 1e-4,
            max_backtracks: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    /// Variance of the histogram-bin noise.
    pub sigma_h2: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Stop when an accepted step lowers the objective by less than this
    /// fraction.
    pub rel_tol: f64,
    pub armijo: ArmijoConfig,
    pub feature: FeatureMode,
    pub bins: usize,
    pub sharpness: f64,
    /// Observation variance for identity-feature mode; the model's `R` when
    /// absent.
    pub obs_variance: Option<f64>,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            sigma_h2: 0.01,
            max_iters: 200,
            grad_tol: 1e-6,
            rel_tol: 1e-10,
            armijo: ArmijoConfig::default(),
            feature: FeatureMode::Histogram,
            bins: 10,
            sharpness: 100.0,
            obs_variance: None,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.sigma_h2 > 0.0) || !self.sigma_h2.is_finite() {
            return bad(format!("sigma_h2 must be positive, got {}", self.sigma_h2));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be positive".into());
        }
        if !(self.grad_tol > 0.0) || !(self.rel_tol > 0.0) {
            return bad("tolerances must be positive".into());
        }
        let a = &self.armijo;
        if !(a.initial_step > 0.0) || !(a.backtrack > 0.0 && a.backtrack < 1.0) {
            return bad("armijo step must be positive with backtrack factor in (0, 1)".into());
        }
        if !(a.sufficient_decrease > 0.0 && a.sufficient_decrease < 1.0) {
            return bad("armijo sufficient decrease must lie in (0, 1)".into());
        }
        if let Some(r) = self.obs_variance {
            if !(r > 0.0) {
                return bad(format!("obs_variance must be positive, got {r}"));
            }
        }
        BinningSpec::new(self.bins, self.sharpness)?;
        Ok(())
    }

    pub fn binning(&self) -> BinningSpec {
        BinningSpec {
            bins: self.bins,
            sharpness: self.sharpness,
        }
    }
}

/// Why a per-frame descent stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    GradientTolerance,
    RelativeDecrease,
    StepFailure,
    MaxIterations,
    /// Frame used only for initialisation.
    Initialization,
}

/// Estimate for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub location: Location,
    pub state: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// The location hit the frame border during descent.
    pub clamped: bool,
    pub stop: StopReason,
    /// Objective at the start and after every accepted step.
    pub objective_trace: Vec<f64>,
    /// Location at the start and after every accepted step.
    pub location_trace: Vec<Location>,
}

/// Per-frame estimates for a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackResult {
    pub states: Vec<TrackState>,
    /// Mean objective over the frames after the first.
    pub mean_objective: f64,
    pub model_id: Option<String>,
}

impl TrackResult {
    pub fn locations(&self) -> Vec<Location> {
        self.states.iter().map(|s| s.location).collect()
    }

    pub fn any_clamped(&self) -> bool {
        self.states.iter().any(|s| s.clamped)
    }

    pub fn csv_rows(&self) -> Vec<TrackRow> {
        self.states
            .iter()
            .enumerate()
            .map(|(t, s)| TrackRow {
                frame: t,
                loc_x: s.location.x,
                loc_y: s.location.y,
                objective: s.objective,
                iterations: s.iterations,
                clamped: s.clamped,
            })
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_csv(path, &self.csv_rows())
    }
}

/// One line of a track CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRow {
    pub frame: usize,
    pub loc_x: f64,
    pub loc_y: f64,
    pub objective: f64,
    pub iterations: usize,
    pub clamped: bool,
}

pub fn read_track_csv(path: impl AsRef<Path>) -> Result<Vec<TrackRow>> {
    crate::io::read_csv(path)
}

/// Objective value and block gradients at one point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub objective: f64,
    pub grad_location: Vector2<f64>,
    pub grad_state: DVector<f64>,
    /// Gauss-Newton curvature of the location block.
    pub curvature_location: Matrix2<f64>,
    /// Gauss-Newton curvature of the state block (including `Q^-1`).
    pub curvature_state: DMatrix<f64>,
}

/// A model prepared for tracking: kernel weights, `Q^+` and settings.
#[derive(Debug, Clone)]
pub struct Tracker {
    model: LdsModel,
    config: TrackerConfig,
    window: KernelWindow,
    binning: BinningSpec,
    q_inv: DMatrix<f64>,
    obs_variance: f64,
}

impl Tracker {
    pub fn new(model: &LdsModel, config: &TrackerConfig) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        let n = model.order();
        let q_inv = if n == 0 {
            DMatrix::zeros(0, 0)
        } else {
            let trace = model.q.trace();
            let floor = Q_FLOOR * trace.max(0.0) / n as f64;
            let inv = linalg::psd_pinv(&model.q, floor);
            let eig = linalg::symmetrize(&model.q).symmetric_eigen();
            if eig.eigenvalues.iter().any(|&l| l <= floor) {
                log::debug!("Q is singular at relative floor {Q_FLOOR:e}; using its pseudo-inverse");
            }
            inv
        };
        Ok(Self {
            model: model.clone(),
            config: *config,
            window: KernelWindow::new(model.geometry)?,
            binning: config.binning(),
            q_inv,
            obs_variance: config.obs_variance.unwrap_or(model.r).max(IDENTITY_R_FLOOR),
        })
    }

    pub fn model(&self) -> &LdsModel {
        &self.model
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn window(&self) -> &KernelWindow {
        &self.window
    }

    /// Pseudo-inverse of `Q` used by the dynamics term.
    pub fn q_inverse(&self) -> &DMatrix<f64> {
        &self.q_inv
    }

    fn check_state(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.model.order() {
            return Err(Error::dim("state", self.model.order(), x.len()));
        }
        Ok(())
    }

    fn prior_mean(&self, prev: Option<&DVector<f64>>) -> Result<Option<DVector<f64>>> {
        match prev {
            Some(p) => {
                self.check_state(p)?;
                Ok(Some(&self.model.a * p))
            }
            None => Ok(None),
        }
    }

    fn dynamics(&self, x: &DVector<f64>, prior: Option<&DVector<f64>>) -> (f64, DVector<f64>) {
        match prior {
            Some(m) => {
                let d = x - m;
                let qd = &self.q_inv * &d;
                (0.5 * d.dot(&qd), qd)
            }
            None => (0.0, DVector::zeros(x.len())),
        }
    }

    /// Observation term alone (no dynamics).
    pub fn observation_objective(&self, frame: &Frame, loc: &Location, x: &DVector<f64>) -> Result<f64> {
        self.check_state(x)?;
        let template = self.model.predict_template(x)?;
        match self.config.feature {
            FeatureMode::Histogram => {
                let hy = features::frame_soft_histogram(frame, loc, &self.window, &self.binning)?;
                let ht = features::soft_histogram(template.as_slice(), &self.window, &self.binning)?;
                Ok(features::matusita(&hy, &ht)? / (2.0 * self.config.sigma_h2))
            }
            FeatureMode::Identity => {
                let f = frame.extract_patch(loc, self.model.geometry)?;
                Ok((f - template).norm_squared() / (2.0 * self.obs_variance))
            }
        }
    }

    /// Full objective; `prev` is the previous state estimate `x_{t-1}`, or
    /// `None` to drop the dynamics term.
    pub fn objective(&self, frame: &Frame, loc: &Location, x: &DVector<f64>, prev: Option<&DVector<f64>>) -> Result<f64> {
        let prior = self.prior_mean(prev)?;
        let obs = self.observation_objective(frame, loc, x)?;
        Ok(obs + self.dynamics(x, prior.as_ref()).0)
    }

    /// Objective, gradient and preconditioner blocks.
    pub fn evaluate(&self, frame: &Frame, loc: &Location, x: &DVector<f64>, prev: Option<&DVector<f64>>) -> Result<Evaluation> {
        let prior = self.prior_mean(prev)?;
        self.evaluate_with_prior(frame, loc, x, prior.as_ref())
    }

    fn evaluate_with_prior(
        &self,
        frame: &Frame,
        loc: &Location,
        x: &DVector<f64>,
        prior: Option<&DVector<f64>>,
    ) -> Result<Evaluation> {
        self.check_state(x)?;
        let n = self.model.order();
        let (dyn_value, d) = self.dynamics(x, prior);
        let (obs, g_l, g_obs_x, g_ll, g_xx) = match self.config.feature {
            FeatureMode::Histogram => {
                let s2 = self.config.sigma_h2;
                let (hy, l) = features::location_jacobian_l(frame, loc, &self.window, &self.binning, s2)?;
                let (ht, m) = features::state_jacobian_m(&self.model, x, &self.window, &self.binning, s2)?;
                let a = hy.sqrt() - ht.sqrt();
                let obs = a.norm_squared() / (2.0 * s2);
                let g_l = l.transpose() * &a;
                let g_x = -(m.transpose() * &a);
                // d sqrt(zeta) / d(l, x) = sigma_H^2 (L, -M)
                let g_ll = l.transpose() * &l * s2;
                let g_xx = m.transpose() * &m * s2;
                (obs, g_l, g_x, g_ll, g_xx)
            }
            FeatureMode::Identity => {
                let r = self.obs_variance;
                let f = frame.extract_patch(loc, self.model.geometry)?;
                let resid = f - self.model.predict_template(x)?;
                let j = features::identity_location_jacobian(frame, loc, self.model.geometry)?;
                let obs = resid.norm_squared() / (2.0 * r);
                let g_l = j.transpose() * &resid / r;
                let g_x = -(self.model.c.transpose() * &resid) / r;
                let g_ll = j.transpose() * &j / r;
                let g_xx = self.model.c.transpose() * &self.model.c / r;
                (obs, g_l, g_x, g_ll, g_xx)
            }
        };
        let curvature_state = if prior.is_some() { g_xx + &self.q_inv } else { g_xx };
        debug_assert_eq!(curvature_state.nrows(), n);
        Ok(Evaluation {
            objective: obs + dyn_value,
            grad_location: Vector2::new(g_l[0], g_l[1]),
            grad_state: g_obs_x + d,
            curvature_location: Matrix2::new(g_ll[(0, 0)], g_ll[(0, 1)], g_ll[(1, 0)], g_ll[(1, 1)]),
            curvature_state,
        })
    }

    /// Gradient descent with Armijo backtracking from `(init_loc, init_x)`.
    /// With `fix_location` only the state is updated.
    pub fn solve(
        &self,
        frame: &Frame,
        init_loc: &Location,
        init_x: &DVector<f64>,
        prev: Option<&DVector<f64>>,
        fix_location: bool,
    ) -> Result<TrackState> {
        let prior = self.prior_mean(prev)?;
        let prior = prior.as_ref();
        let geometry = self.model.geometry;
        let (mut loc, mut clamped) = geometry.clamp(init_loc, frame.width(), frame.height())?;
        let mut x = init_x.clone();
        self.check_state(&x)?;

        let mut eval = self.evaluate_with_prior(frame, &loc, &x, prior)?;
        let mut objective_trace = vec![eval.objective];
        let mut location_trace = vec![loc];
        let mut iterations = 0;
        let armijo = self.config.armijo;
        let stop = loop {
            let g_l = if fix_location { Vector2::zeros() } else { eval.grad_location };
            let gnorm = (g_l.norm_squared() + eval.grad_state.norm_squared()).sqrt();
            if gnorm <= self.config.grad_tol {
                break StopReason::GradientTolerance;
            }
            if iterations >= self.config.max_iters {
                break StopReason::MaxIterations;
            }
            let (p_l, p_x) = self.direction(&eval, fix_location);
            let slope_dir = g_l.dot(&p_l) + eval.grad_state.dot(&p_x);
            let (p_l, p_x) = if slope_dir < 0.0 {
                (p_l, p_x)
            } else {
                (-g_l, -eval.grad_state.clone())
            };

            let mut step = armijo.initial_step;
            let mut accepted = None;
            for _ in 0..=armijo.max_backtracks {
                let (trial_loc, hit) = geometry.clamp(&(loc + p_l * step), frame.width(), frame.height())?;
                let trial_x = &x + &p_x * step;
                let predicted = g_l.dot(&(trial_loc - loc)) + eval.grad_state.dot(&(&trial_x - &x));
                let value = self.observation_objective(frame, &trial_loc, &trial_x)? + self.dynamics(&trial_x, prior).0;
                if value.is_finite()
                    && value <= eval.objective
                    && value <= eval.objective + armijo.sufficient_decrease * predicted
                {
                    accepted = Some((trial_loc, trial_x, hit));
                    break;
                }
                step *= armijo.backtrack;
            }
            let Some((new_loc, new_x, hit)) = accepted else {
                break StopReason::StepFailure;
            };
            let old = eval.objective;
            loc = new_loc;
            x = new_x;
            clamped |= hit;
            iterations += 1;
            eval = self.evaluate_with_prior(frame, &loc, &x, prior)?;
            objective_trace.push(eval.objective);
            location_trace.push(loc);
            if old - eval.objective <= self.config.rel_tol * old.abs().max(f64::MIN_POSITIVE) {
                break StopReason::RelativeDecrease;
            }
        };
        Ok(TrackState {
            location: loc,
            state: x,
            objective: eval.objective,
            iterations,
            clamped,
            stop,
            objective_trace,
            location_trace,
        })
    }

    /// Block Gauss-Newton direction `-(G + lambda I)^-1 g` per block.
    fn direction(&self, eval: &Evaluation, fix_location: bool) -> (Vector2<f64>, DVector<f64>) {
        let p_l = if fix_location {
            Vector2::zeros()
        } else {
            let g = eval.curvature_location;
            let lambda = DAMPING * g.trace().abs() / 2.0 + 1e-12;
            let damped = g + Matrix2::identity() * lambda;
            match damped.try_inverse() {
                Some(inv) => -(inv * eval.grad_location),
                None => -eval.grad_location,
            }
        };
        let n = eval.grad_state.len();
        let p_x = if n == 0 {
            DVector::zeros(0)
        } else {
            let g = &eval.curvature_state;
            let lambda = DAMPING * g.trace().abs() / n as f64 + 1e-12;
            let damped = linalg::symmetrize(g) + DMatrix::identity(n, n) * lambda;
            match damped.cholesky() {
                Some(ch) => -ch.solve(&eval.grad_state),
                None => -eval.grad_state.clone(),
            }
        };
        (p_l, p_x)
    }

    /// Track a whole sequence starting from `initial_location` in frame 0.
    pub fn track(&self, frames: &FrameSequence, initial_location: &Location) -> Result<TrackResult> {
        let first = frames
            .get(0)
            .ok_or_else(|| Error::InvalidArgument("cannot track an empty sequence".into()))?;
        let geometry = self.model.geometry;
        let patch = first.extract_patch(initial_location, geometry)?;
        let x0 = self.model.init_state(&patch)?;
        let obj0 = self.observation_objective(first, initial_location, &x0)?;
        let mut states = vec![TrackState {
            location: *initial_location,
            state: x0,
            objective: obj0,
            iterations: 0,
            clamped: false,
            stop: StopReason::Initialization,
            objective_trace: vec![obj0],
            location_trace: vec![*initial_location],
        }];
        for frame in frames.iter().skip(1) {
            let prev = states.last().expect("non-empty");
            let init_x = &self.model.a * &prev.state;
            let s = self.solve(frame, &prev.location, &init_x, Some(&prev.state), false)?;
            states.push(s);
        }
        let mean_objective = if states.len() > 1 {
            states[1..].iter().map(|s| s.objective).sum::<f64>() / (states.len() - 1) as f64
        } else {
            states[0].objective
        };
        Ok(TrackResult {
            states,
            mean_objective,
            model_id: None,
        })
    }
}

/// Objective at `(loc, x)` given the previous state estimate.
pub fn objective(
    frame: &Frame,
    loc: &Location,
    x: &DVector<f64>,
    prev: &DVector<f64>,
    model: &LdsModel,
    config: &TrackerConfig,
) -> Result<f64> {
    Tracker::new(model, config)?.objective(frame, loc, x, Some(prev))
}

/// Gradient `(g_l, g_x)` of [`objective`].
pub fn gradient(
    frame: &Frame,
    loc: &Location,
    x: &DVector<f64>,
    prev: &DVector<f64>,
    model: &LdsModel,
    config: &TrackerConfig,
) -> Result<(Vector2<f64>, DVector<f64>)> {
    let e = Tracker::new(model, config)?.evaluate(frame, loc, x, Some(prev))?;
    Ok((e.grad_location, e.grad_state))
}

/// Minimise the objective for one frame from `(init_loc, init_x)`.
pub fn solve_frame(
    frame: &Frame,
    init_loc: &Location,
    init_x: &DVector<f64>,
    prev: &DVector<f64>,
    model: &LdsModel,
    config: &TrackerConfig,
) -> Result<TrackState> {
    Tracker::new(model, config)?.solve(frame, init_loc, init_x, Some(prev), false)
}

/// Track a sequence with warm-started per-frame solves.
pub fn track_sequence(
    frames: &FrameSequence,
    model: &LdsModel,
    initial_location: &Location,
    config: &TrackerConfig,
) -> Result<TrackResult> {
    Tracker::new(model, config)?.track(frames, initial_location)
}
