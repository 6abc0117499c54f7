//! Kernel-weighted intensity histograms and their derivatives.
//!
//! Histograms use `B` equal-width bins over `[0, 1]`. The hard variant counts
//! each pixel in the bin containing its intensity; the soft variant replaces
//! the indicator of bin `u` by a difference of sigmoids
//! `phi_{u-1}(s) - phi_u(s)` with `phi_u(s) = 1 / (1 + exp(-sigma (s - u/B)))`,
//! which makes the histogram differentiable in both the intensities and the
//! window location.
//!
//! A histogram of a frame window centred at a real-valued location `l` is
//! computed on the integer frame pixels `z'` by shifting the kernel,
//! `sum_z' K(z' - l) m(y(z')) / sum_z' K(z' - l)`. At lattice-aligned `l`
//! this is exactly the histogram of the extracted patch, and it is smooth in
//! `l` wherever the kernel is.

use nalgebra::{DMatrix, DVector, Vector2};

use crate::error::{Error, Result};
use crate::frame::{Frame, Location, TemplateGeometry};
use crate::lds::LdsModel;

/// Stand-in mass for empty bins in `diag(zeta)^(-1/2)`.
pub const ZERO_BIN_FLOOR: f64 = 1e-6;

/// `1 / sqrt(v)`, with empty (or rounding-negative) bins taken at
/// [`ZERO_BIN_FLOOR`]. Small positive bins are not floored: their mass
/// derivatives shrink with them, so the exact factor keeps the gradient
/// consistent with the objective.
pub fn bin_inv_sqrt(v: f64) -> f64 {
    if v > 0.0 {
        1.0 / v.sqrt()
    } else {
        1.0 / ZERO_BIN_FLOOR.sqrt()
    }
}

/// Epanechnikov kernel with bandwidth `H = diag(1 / half_width, 1 / half_height)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub half_width: f64,
    pub half_height: f64,
}

impl KernelSpec {
    pub fn new(half_width: f64, half_height: f64) -> Result<Self> {
        if !(half_width > 0.0 && half_height > 0.0) || !half_width.is_finite() || !half_height.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "kernel bandwidth must be positive, got ({half_width}, {half_height})"
            )));
        }
        Ok(Self {
            half_width,
            half_height,
        })
    }

    /// Support matching the template half-extents.
    pub fn for_geometry(geometry: TemplateGeometry) -> Self {
        let h = geometry.half_extents();
        Self {
            half_width: h.x,
            half_height: h.y,
        }
    }
}

/// `1 - |Hz|^2` inside the unit ellipse, zero outside.
pub fn epanechnikov(z: &Vector2<f64>, spec: &KernelSpec) -> f64 {
    let u = z.x / spec.half_width;
    let v = z.y / spec.half_height;
    let r2 = u * u + v * v;
    if r2 < 1.0 {
        1.0 - r2
    } else {
        0.0
    }
}

/// `grad K(z) = -2 H^T H z` inside the support, zero outside.
pub fn kernel_gradient(z: &Vector2<f64>, spec: &KernelSpec) -> Vector2<f64> {
    let u = z.x / spec.half_width;
    let v = z.y / spec.half_height;
    if u * u + v * v < 1.0 {
        Vector2::new(
            -2.0 * z.x / (spec.half_width * spec.half_width),
            -2.0 * z.y / (spec.half_height * spec.half_height),
        )
    } else {
        Vector2::zeros()
    }
}

/// Bin layout and sigmoid sharpness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinningSpec {
    pub bins: usize,
    pub sharpness: f64,
}

impl Default for BinningSpec {
    fn default() -> Self {
        Self {
            bins: 10,
            sharpness: 100.0,
        }
    }
}

impl BinningSpec {
    pub fn new(bins: usize, sharpness: f64) -> Result<Self> {
        if bins < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 bins, got {bins}")));
        }
        if !(sharpness > 0.0) || !sharpness.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "sigmoid sharpness must be positive, got {sharpness}"
            )));
        }
        Ok(Self { bins, sharpness })
    }

    /// Edge `u / B`, `u = 0..=B`.
    pub fn edge(&self, u: usize) -> f64 {
        u as f64 / self.bins as f64
    }

    /// Zero-based bin holding `s`: `[u/B, (u+1)/B)`, the last bin closed.
    /// Values outside `[0, 1]` fall in no bin.
    pub fn hard_bin(&self, s: f64) -> Option<usize> {
        if !(0.0..=1.0).contains(&s) {
            return None;
        }
        Some(((s * self.bins as f64).floor() as usize).min(self.bins - 1))
    }

    /// Sigmoid `phi_u(s)`.
    pub fn sigmoid(&self, u: usize, s: f64) -> f64 {
        1.0 / (1.0 + (-self.sharpness * (s - self.edge(u))).exp())
    }

    /// Soft bin memberships `phi_j(s) - phi_{j+1}(s)` for the zero-based bins.
    pub fn memberships(&self, s: f64, out: &mut [f64]) {
        self.for_each_sigmoid(s, |j, prev, next| out[j] = prev - next);
    }

    /// Intensity derivatives of the soft memberships.
    pub fn membership_derivatives(&self, s: f64, out: &mut [f64]) {
        let k = self.sharpness;
        self.for_each_sigmoid(s, |j, prev, next| out[j] = k * (prev * (1.0 - prev) - next * (1.0 - next)));
    }

    /// Calls `f(j, phi_j(s), phi_{j+1}(s))` for each bin. Uses
    /// `exp(-sigma (s - u/B)) = exp(-sigma s) exp(sigma / B)^u` so only two
    /// exponentials are evaluated per intensity.
    fn for_each_sigmoid(&self, s: f64, mut f: impl FnMut(usize, f64, f64)) {
        let ratio = (self.sharpness / self.bins as f64).exp();
        let mut e = (-self.sharpness * s).exp();
        let mut prev = 1.0 / (1.0 + e);
        for j in 0..self.bins {
            e *= ratio;
            let next = 1.0 / (1.0 + e);
            f(j, prev, next);
            prev = next;
        }
    }
}

/// A kernel-weighted histogram with its normalisation constant.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftHistogram {
    pub values: Vec<f64>,
    pub kappa: f64,
}

impl SoftHistogram {
    pub fn bins(&self) -> usize {
        self.values.len()
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn sqrt(&self) -> DVector<f64> {
        DVector::from_iterator(self.values.len(), self.values.iter().map(|v| v.max(0.0).sqrt()))
    }
}

/// Kernel weights over a template lattice, precomputed once per geometry.
#[derive(Debug, Clone)]
pub struct KernelWindow {
    pub geometry: TemplateGeometry,
    pub spec: KernelSpec,
    /// `K(z)` per column-wise template index.
    pub weights: Vec<f64>,
    pub kappa: f64,
}

impl KernelWindow {
    pub fn new(geometry: TemplateGeometry) -> Result<Self> {
        Self::with_spec(geometry, KernelSpec::for_geometry(geometry))
    }

    pub fn with_spec(geometry: TemplateGeometry, spec: KernelSpec) -> Result<Self> {
        let weights: Vec<f64> = (0..geometry.len())
            .map(|k| epanechnikov(&geometry.offset(k), &spec))
            .collect();
        let kappa: f64 = weights.iter().sum();
        if !(kappa > 0.0) {
            return Err(Error::InvalidArgument(
                "kernel has no mass on the template lattice".into(),
            ));
        }
        Ok(Self {
            geometry,
            spec,
            weights,
            kappa,
        })
    }

    fn check_patch(&self, len: usize) -> Result<()> {
        if len != self.geometry.len() {
            return Err(Error::dim("patch length", self.geometry.len(), len));
        }
        Ok(())
    }

    /// Frame pixels `(x, y, z' - l)` under the shifted kernel support.
    fn frame_support(&self, frame: &Frame, loc: &Location) -> Result<Vec<(usize, usize, Vector2<f64>)>> {
        if !self.geometry.fits(loc, frame.width(), frame.height()) {
            return Err(Error::OutOfFrame {
                x: loc.x,
                y: loc.y,
                width: frame.width(),
                height: frame.height(),
            });
        }
        let hw = self.spec.half_width;
        let hh = self.spec.half_height;
        let x_lo = ((loc.x - hw).floor() + 1.0).max(0.0) as usize;
        let x_hi = ((loc.x + hw).ceil() - 1.0).min(frame.width() as f64 - 1.0) as usize;
        let y_lo = ((loc.y - hh).floor() + 1.0).max(0.0) as usize;
        let y_hi = ((loc.y + hh).ceil() - 1.0).min(frame.height() as f64 - 1.0) as usize;
        let mut out = Vec::with_capacity((x_hi + 1 - x_lo) * (y_hi + 1 - y_lo));
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let z = Vector2::new(x as f64 - loc.x, y as f64 - loc.y);
                if epanechnikov(&z, &self.spec) > 0.0 {
                    out.push((x, y, z));
                }
            }
        }
        Ok(out)
    }
}

/// Hard kernel-weighted histogram of a template-sized patch.
pub fn hard_histogram(patch: &[f64], window: &KernelWindow, binning: &BinningSpec) -> Result<SoftHistogram> {
    window.check_patch(patch.len())?;
    let mut values = vec![0.0; binning.bins];
    for (s, w) in patch.iter().zip(&window.weights) {
        if let Some(u) = binning.hard_bin(*s) {
            values[u] += w;
        }
    }
    for v in &mut values {
        *v /= window.kappa;
    }
    Ok(SoftHistogram {
        values,
        kappa: window.kappa,
    })
}

/// Sigmoid-smoothed kernel-weighted histogram of a template-sized patch.
pub fn soft_histogram(patch: &[f64], window: &KernelWindow, binning: &BinningSpec) -> Result<SoftHistogram> {
    window.check_patch(patch.len())?;
    let mut values = vec![0.0; binning.bins];
    let mut m = vec![0.0; binning.bins];
    for (s, w) in patch.iter().zip(&window.weights) {
        if *w == 0.0 {
            continue;
        }
        binning.memberships(*s, &mut m);
        for (v, mj) in values.iter_mut().zip(&m) {
            *v += w * mj;
        }
    }
    for v in &mut values {
        *v /= window.kappa;
    }
    Ok(SoftHistogram {
        values,
        kappa: window.kappa,
    })
}

/// Hard histogram of the frame window centred at `loc`.
pub fn frame_hard_histogram(
    frame: &Frame,
    loc: &Location,
    window: &KernelWindow,
    binning: &BinningSpec,
) -> Result<SoftHistogram> {
    let mut values = vec![0.0; binning.bins];
    let mut kappa = 0.0;
    for (x, y, z) in window.frame_support(frame, loc)? {
        let k = epanechnikov(&z, &window.spec);
        kappa += k;
        if let Some(u) = binning.hard_bin(frame.get(x, y)) {
            values[u] += k;
        }
    }
    for v in &mut values {
        *v /= kappa;
    }
    Ok(SoftHistogram { values, kappa })
}

/// Soft histogram of the frame window centred at `loc`.
pub fn frame_soft_histogram(
    frame: &Frame,
    loc: &Location,
    window: &KernelWindow,
    binning: &BinningSpec,
) -> Result<SoftHistogram> {
    Ok(frame_soft_histogram_with_jacobian(frame, loc, window, binning)?.0)
}

/// Soft histogram of the frame window at `loc` and its `B x 2` derivative
/// with respect to `loc`.
pub fn frame_soft_histogram_with_jacobian(
    frame: &Frame,
    loc: &Location,
    window: &KernelWindow,
    binning: &BinningSpec,
) -> Result<(SoftHistogram, DMatrix<f64>)> {
    let b = binning.bins;
    let mut values = vec![0.0; b];
    let mut jac = DMatrix::zeros(b, 2);
    let mut m = vec![0.0; b];
    let mut kappa = 0.0;
    let mut dkappa = Vector2::zeros();
    for (x, y, z) in window.frame_support(frame, loc)? {
        let k = epanechnikov(&z, &window.spec);
        // d K(z' - l) / d l = -grad K(z' - l)
        let dk = -kernel_gradient(&z, &window.spec);
        kappa += k;
        dkappa += dk;
        binning.memberships(frame.get(x, y), &mut m);
        for (j, mj) in m.iter().enumerate() {
            values[j] += k * mj;
            jac[(j, 0)] += dk.x * mj;
            jac[(j, 1)] += dk.y * mj;
        }
    }
    for (j, v) in values.iter_mut().enumerate() {
        *v /= kappa;
        jac[(j, 0)] = (jac[(j, 0)] - *v * dkappa.x) / kappa;
        jac[(j, 1)] = (jac[(j, 1)] - *v * dkappa.y) / kappa;
    }
    Ok((SoftHistogram { values, kappa }, jac))
}

/// Squared Hellinger-type distance `sum (sqrt h1 - sqrt h2)^2`.
pub fn matusita(h1: &SoftHistogram, h2: &SoftHistogram) -> Result<f64> {
    if h1.bins() != h2.bins() {
        return Err(Error::dim("histogram bins", h1.bins(), h2.bins()));
    }
    Ok(h1
        .values
        .iter()
        .zip(&h2.values)
        .map(|(a, b)| {
            let d = a.max(0.0).sqrt() - b.max(0.0).sqrt();
            d * d
        })
        .sum())
}

/// Bhattacharyya coefficient `sum sqrt(h1 h2)`.
pub fn bhattacharyya(h1: &SoftHistogram, h2: &SoftHistogram) -> Result<f64> {
    if h1.bins() != h2.bins() {
        return Err(Error::dim("histogram bins", h1.bins(), h2.bins()));
    }
    Ok(h1
        .values
        .iter()
        .zip(&h2.values)
        .map(|(a, b)| (a.max(0.0) * b.max(0.0)).sqrt())
        .sum())
}

/// `N x B` soft bin memberships of each pixel.
pub fn sifting_matrix(patch: &[f64], binning: &BinningSpec) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(patch.len(), binning.bins);
    let mut m = vec![0.0; binning.bins];
    for (i, s) in patch.iter().enumerate() {
        binning.memberships(*s, &mut m);
        for (j, mj) in m.iter().enumerate() {
            out[(i, j)] = *mj;
        }
    }
    out
}

/// `N x B` intensity derivatives of [`sifting_matrix`].
pub fn sifting_derivative_matrix(patch: &[f64], binning: &BinningSpec) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(patch.len(), binning.bins);
    let mut m = vec![0.0; binning.bins];
    for (i, s) in patch.iter().enumerate() {
        binning.membership_derivatives(*s, &mut m);
        for (j, mj) in m.iter().enumerate() {
            out[(i, j)] = *mj;
        }
    }
    out
}

/// `diag(zeta)^(-1/2)` as a vector.
fn inv_sqrt_floored(h: &SoftHistogram) -> Vec<f64> {
    h.values.iter().map(|v| bin_inv_sqrt(*v)).collect()
}

/// `B x 2` matrix `L = (1 / (2 sigma_H^2)) diag(zeta)^(-1/2) U^T J_K` for the
/// frame window at `loc`, together with the window histogram. The derivative
/// of `sqrt(zeta)` with respect to `loc` is `sigma_H^2 L`.
pub fn location_jacobian_l(
    frame: &Frame,
    loc: &Location,
    window: &KernelWindow,
    binning: &BinningSpec,
    sigma_h2: f64,
) -> Result<(SoftHistogram, DMatrix<f64>)> {
    check_sigma(sigma_h2)?;
    let (hist, mut jac) = frame_soft_histogram_with_jacobian(frame, loc, window, binning)?;
    let inv = inv_sqrt_floored(&hist);
    let scale = 1.0 / (2.0 * sigma_h2);
    for (j, s) in inv.iter().enumerate() {
        jac[(j, 0)] *= scale * s;
        jac[(j, 1)] *= scale * s;
    }
    Ok((hist, jac))
}

/// `B x n` matrix `M = (1 / (2 sigma_H^2)) diag(zeta)^(-1/2) Phi'^T diag(K / kappa) C`
/// for the predicted template `mu + C x`, together with its histogram. The
/// derivative of `sqrt(zeta(mu + C x))` with respect to `x` is `sigma_H^2 M`.
pub fn state_jacobian_m(
    model: &LdsModel,
    x: &DVector<f64>,
    window: &KernelWindow,
    binning: &BinningSpec,
    sigma_h2: f64,
) -> Result<(SoftHistogram, DMatrix<f64>)> {
    check_sigma(sigma_h2)?;
    let template = model.predict_template(x)?;
    template_jacobian(template.as_slice(), &model.c, window, binning, sigma_h2)
}

/// [`state_jacobian_m`] for an explicit template and observation matrix.
pub fn template_jacobian(
    template: &[f64],
    c: &DMatrix<f64>,
    window: &KernelWindow,
    binning: &BinningSpec,
    sigma_h2: f64,
) -> Result<(SoftHistogram, DMatrix<f64>)> {
    window.check_patch(template.len())?;
    if c.nrows() != template.len() {
        return Err(Error::dim("C rows", template.len(), c.nrows()));
    }
    let b = binning.bins;
    let n = c.ncols();
    let mut values = vec![0.0; b];
    let mut jac = DMatrix::zeros(b, n);
    let mut m = vec![0.0; b];
    let mut dm = vec![0.0; b];
    for (i, (s, w)) in template.iter().zip(&window.weights).enumerate() {
        if *w == 0.0 {
            continue;
        }
        binning.memberships(*s, &mut m);
        binning.membership_derivatives(*s, &mut dm);
        for j in 0..b {
            values[j] += w * m[j];
            let coef = w * dm[j];
            if coef != 0.0 {
                for k in 0..n {
                    jac[(j, k)] += coef * c[(i, k)];
                }
            }
        }
    }
    for v in &mut values {
        *v /= window.kappa;
    }
    let hist = SoftHistogram {
        values,
        kappa: window.kappa,
    };
    let inv = inv_sqrt_floored(&hist);
    let scale = 1.0 / (2.0 * sigma_h2 * window.kappa);
    for j in 0..b {
        for k in 0..n {
            jac[(j, k)] *= scale * inv[j];
        }
    }
    Ok((hist, jac))
}

fn check_sigma(sigma_h2: f64) -> Result<()> {
    if !(sigma_h2 > 0.0) || !sigma_h2.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma_H^2 must be positive, got {sigma_h2}")));
    }
    Ok(())
}

/// The raw intensity feature map.
pub fn identity_feature(patch: &DVector<f64>) -> DVector<f64> {
    patch.clone()
}

/// `N x 2` derivative of the bilinearly sampled patch at `loc` with respect
/// to `loc`: the spatial image gradient at each template pixel.
pub fn identity_location_jacobian(frame: &Frame, loc: &Location, geometry: TemplateGeometry) -> Result<DMatrix<f64>> {
    if !geometry.fits(loc, frame.width(), frame.height()) {
        return Err(Error::OutOfFrame {
            x: loc.x,
            y: loc.y,
            width: frame.width(),
            height: frame.height(),
        });
    }
    let mut out = DMatrix::zeros(geometry.len(), 2);
    for k in 0..geometry.len() {
        let p = loc + geometry.offset(k);
        let g = frame.sample_gradient(p.x, p.y);
        out[(k, 0)] = g.x;
        out[(k, 1)] = g.y;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geometry() -> TemplateGeometry {
        TemplateGeometry::new(7, 9).unwrap()
    }

    #[test]
    fn kernel_values() {
        let spec = KernelSpec::new(2.0, 2.0).unwrap();
        assert_eq!(epanechnikov(&Vector2::zeros(), &spec), 1.0);
        assert_eq!(epanechnikov(&Vector2::new(2.0, 0.0), &spec), 0.0);
        assert!((epanechnikov(&Vector2::new(1.0, 1.0), &spec) - 0.5).abs() < 1e-15);
        let unit = KernelSpec::new(1.0, 1.0).unwrap();
        assert_eq!(kernel_gradient(&Vector2::new(0.5, 0.0), &unit), Vector2::new(-1.0, 0.0));
        assert_eq!(kernel_gradient(&Vector2::zeros(), &unit), Vector2::zeros());
        assert!(KernelSpec::new(0.0, 1.0).is_err());
    }

    #[test]
    fn constant_patch_lands_in_one_bin() {
        let g = geometry();
        let w = KernelWindow::new(g).unwrap();
        let b = BinningSpec::default();
        let patch = vec![0.45; g.len()];
        let hard = hard_histogram(&patch, &w, &b).unwrap();
        assert!((hard.values[4] - 1.0).abs() < 1e-12);
        let soft = soft_histogram(&patch, &w, &b).unwrap();
        // phi(0.05) - phi(-0.05) at sharpness 100
        let expected = 1.0 / (1.0 + (-5.0f64).exp()) - 1.0 / (1.0 + 5.0f64.exp());
        assert!((soft.values[4] - expected).abs() < 1e-12);
        assert!((expected - 0.98661).abs() < 1e-5);
    }

    #[test]
    fn matusita_basics() {
        let a = SoftHistogram {
            values: vec![1.0, 0.0],
            kappa: 1.0,
        };
        let b = SoftHistogram {
            values: vec![0.0, 1.0],
            kappa: 1.0,
        };
        assert_eq!(matusita(&a, &a).unwrap(), 0.0);
        assert_eq!(matusita(&a, &b).unwrap(), 2.0);
        let c = SoftHistogram {
            values: vec![1.0],
            kappa: 1.0,
        };
        assert!(matusita(&a, &c).is_err());
    }

    #[test]
    fn constant_frame_has_zero_location_jacobian() {
        let g = geometry();
        let w = KernelWindow::new(g).unwrap();
        let f = Frame::filled(30, 30, 0.37);
        let (_, l) = location_jacobian_l(&f, &Location::new(14.3, 12.8), &w, &BinningSpec::default(), 0.01).unwrap();
        assert!(l.amax() < 1e-12);
    }

    #[test]
    fn zero_c_gives_zero_m() {
        let g = geometry();
        let w = KernelWindow::new(g).unwrap();
        let t = vec![0.3; g.len()];
        let c = DMatrix::zeros(g.len(), 3);
        let (_, m) = template_jacobian(&t, &c, &w, &BinningSpec::default(), 0.01).unwrap();
        assert_eq!(m.shape(), (10, 3));
        assert_eq!(m.amax(), 0.0);
    }

    #[test]
    fn window_outside_frame_is_rejected() {
        let w = KernelWindow::new(geometry()).unwrap();
        let f = Frame::filled(20, 20, 0.5);
        assert!(matches!(
            frame_soft_histogram(&f, &Location::new(2.0, 10.0), &w, &BinningSpec::default()),
            Err(Error::OutOfFrame { .. })
        ));
    }
}
