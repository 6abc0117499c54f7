//! Static-template kernel-histogram tracker.
//!
//! Minimises `1/(2 sigma_H^2) |sqrt(zeta(y(l))) - sqrt(rho)|^2` over `l` for a
//! fixed template histogram `rho`. The gradient is accumulated per pixel in
//! mean-shift form, `sum_z' (w(z') - w_bar) dK(z' - l)/dl / kappa(l)`, with
//! pixel weights `w(z') = sum_u c_u m_u(y(z'))`.

use nalgebra::{DVector, Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::features::{bin_inv_sqrt, epanechnikov, kernel_gradient, BinningSpec, KernelSpec};
use crate::frame::{Frame, Location, TemplateGeometry};

use super::{StopReason, TrackState, TrackerConfig, DAMPING};

#[derive(Debug, Clone)]
pub struct StaticTracker {
    geometry: TemplateGeometry,
    spec: KernelSpec,
    binning: BinningSpec,
    config: TrackerConfig,
    target_sqrt: Vec<f64>,
}

struct Pixel {
    k: f64,
    dk: Vector2<f64>,
    m: Vec<f64>,
}

impl StaticTracker {
    pub fn new(template: &DVector<f64>, geometry: TemplateGeometry, config: &TrackerConfig) -> Result<Self> {
        config.validate()?;
        if template.len() != geometry.len() {
            return Err(Error::dim("template length", geometry.len(), template.len()));
        }
        let spec = KernelSpec::for_geometry(geometry);
        let binning = config.binning();
        let mut rho = vec![0.0; binning.bins];
        let mut kappa = 0.0;
        let mut m = vec![0.0; binning.bins];
        for row in 0..geometry.rows {
            for col in 0..geometry.cols {
                let i = geometry.index(row, col);
                let k = epanechnikov(&geometry.offset(i), &spec);
                kappa += k;
                binning.memberships(template[i], &mut m);
                for u in 0..binning.bins {
                    rho[u] += k * m[u];
                }
            }
        }
        Ok(Self {
            geometry,
            spec,
            binning,
            config: *config,
            target_sqrt: rho.iter().map(|v| (v / kappa).max(0.0).sqrt()).collect(),
        })
    }

    fn pixels(&self, frame: &Frame, loc: &Location) -> Result<Vec<Pixel>> {
        if !self.geometry.fits(loc, frame.width(), frame.height()) {
            return Err(Error::OutOfFrame {
                x: loc.x,
                y: loc.y,
                width: frame.width(),
                height: frame.height(),
            });
        }
        let mut out = Vec::new();
        for y in 0..frame.height() {
            if (y as f64 - loc.y).abs() >= self.spec.half_height {
                continue;
            }
            for x in 0..frame.width() {
                let z = Vector2::new(x as f64 - loc.x, y as f64 - loc.y);
                let k = epanechnikov(&z, &self.spec);
                if k <= 0.0 {
                    continue;
                }
                let mut m = vec![0.0; self.binning.bins];
                self.binning.memberships(frame.get(x, y), &mut m);
                out.push(Pixel {
                    k,
                    dk: -kernel_gradient(&z, &self.spec),
                    m,
                });
            }
        }
        Ok(out)
    }

    fn histogram(&self, pixels: &[Pixel]) -> (Vec<f64>, f64) {
        let kappa: f64 = pixels.iter().map(|p| p.k).sum();
        let mut zeta = vec![0.0; self.binning.bins];
        for p in pixels {
            for (z, m) in zeta.iter_mut().zip(&p.m) {
                *z += p.k * m;
            }
        }
        zeta.iter_mut().for_each(|z| *z /= kappa);
        (zeta, kappa)
    }

    pub fn objective(&self, frame: &Frame, loc: &Location) -> Result<f64> {
        let (zeta, _) = self.histogram(&self.pixels(frame, loc)?);
        let s: f64 = zeta
            .iter()
            .zip(&self.target_sqrt)
            .map(|(z, t)| (z.max(0.0).sqrt() - t).powi(2))
            .sum();
        Ok(s / (2.0 * self.config.sigma_h2))
    }

    /// Objective, gradient and Gauss-Newton curvature at `loc`.
    pub fn evaluate(&self, frame: &Frame, loc: &Location) -> Result<(f64, Vector2<f64>, Matrix2<f64>)> {
        let s2 = self.config.sigma_h2;
        let pixels = self.pixels(frame, loc)?;
        let (zeta, kappa) = self.histogram(&pixels);
        let b = self.binning.bins;
        let mut objective = 0.0;
        let mut c = vec![0.0; b];
        let mut w_bar = 0.0;
        let mut inv2 = vec![0.0; b];
        for u in 0..b {
            let a = zeta[u].max(0.0).sqrt() - self.target_sqrt[u];
            objective += a * a;
            inv2[u] = 0.5 * bin_inv_sqrt(zeta[u]);
            c[u] = a * inv2[u] / s2;
            w_bar += c[u] * zeta[u];
        }
        objective /= 2.0 * s2;

        let mut grad = Vector2::zeros();
        let mut dk_sum = Vector2::zeros();
        let mut dzeta = vec![Vector2::zeros(); b];
        for p in &pixels {
            let w: f64 = p.m.iter().zip(&c).map(|(m, cu)| m * cu).sum();
            grad += p.dk * (w - w_bar);
            dk_sum += p.dk;
            for u in 0..b {
                dzeta[u] += p.dk * p.m[u];
            }
        }
        grad /= kappa;
        let mut curvature = Matrix2::zeros();
        for u in 0..b {
            let j = (dzeta[u] - dk_sum * zeta[u]) / kappa * inv2[u];
            curvature += j * j.transpose();
        }
        Ok((objective, grad, curvature / s2))
    }

    /// Descend from `init` with the same step rule as the joint tracker.
    pub fn solve(&self, frame: &Frame, init: &Location) -> Result<TrackState> {
        let (mut loc, mut clamped) = self.geometry.clamp(init, frame.width(), frame.height())?;
        let (mut value, mut grad, mut curv) = self.evaluate(frame, &loc)?;
        let mut objective_trace = vec![value];
        let mut location_trace = vec![loc];
        let mut iterations = 0;
        let armijo = self.config.armijo;
        let stop = loop {
            if grad.norm() <= self.config.grad_tol {
                break StopReason::GradientTolerance;
            }
            if iterations >= self.config.max_iters {
                break StopReason::MaxIterations;
            }
            let lambda = DAMPING * curv.trace().abs() / 2.0 + 1e-12;
            let mut p = match (curv + Matrix2::identity() * lambda).try_inverse() {
                Some(inv) => -(inv * grad),
                None => -grad,
            };
            if grad.dot(&p) >= 0.0 {
                p = -grad;
            }
            let mut step = armijo.initial_step;
            let mut accepted = None;
            for _ in 0..=armijo.max_backtracks {
                let (trial, hit) = self.geometry.clamp(&(loc + p * step), frame.width(), frame.height())?;
                let predicted = grad.dot(&(trial - loc));
                let v = self.objective(frame, &trial)?;
                if v.is_finite() && v <= value && v <= value + armijo.sufficient_decrease * predicted {
                    accepted = Some((trial, hit));
                    break;
                }
                step *= armijo.backtrack;
            }
            let Some((trial, hit)) = accepted else {
                break StopReason::StepFailure;
            };
            let old = value;
            loc = trial;
            clamped |= hit;
            iterations += 1;
            (value, grad, curv) = self.evaluate(frame, &loc)?;
            objective_trace.push(value);
            location_trace.push(loc);
            if old - value <= self.config.rel_tol * old.abs().max(f64::MIN_POSITIVE) {
                break StopReason::RelativeDecrease;
            }
        };
        Ok(TrackState {
            location: loc,
            state: DVector::zeros(0),
            objective: value,
            iterations,
            clamped,
            stop,
            objective_trace,
            location_trace,
        })
    }
}
