//! Linear dynamical systems used as dynamic templates.
//!
//! A model `(mu, A, C, Q, R)` generates template appearances
//!
//! ```text
//! x_t = A x_{t-1} + B v_t,     B B^T = Q
//! I_t = mu + C x_t + w_t,      w_t ~ N(0, R I)
//! ```
//!
//! where `I_t` is the column-wise stack of an `r x c` patch.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Frame, FrameSequence, TemplateGeometry};
use crate::linalg;

/// Tolerance on `||C^T C - I||` for treating `C` as orthonormal.
const ORTHONORMAL_TOL: f64 = 1e-8;

/// A learned dynamic template.
#[derive(Debug, Clone, PartialEq)]
pub struct LdsModel {
    /// Mean template, length `N`.
    pub mu: DVector<f64>,
    /// State transition, `n x n`.
    pub a: DMatrix<f64>,
    /// Observation matrix, `N x n`.
    pub c: DMatrix<f64>,
    /// State noise covariance, `n x n`.
    pub q: DMatrix<f64>,
    /// Per-pixel observation noise variance.
    pub r: f64,
    pub geometry: TemplateGeometry,
}

impl LdsModel {
    pub fn new(
        mu: DVector<f64>,
        a: DMatrix<f64>,
        c: DMatrix<f64>,
        q: DMatrix<f64>,
        r: f64,
        geometry: TemplateGeometry,
    ) -> Result<Self> {
        let m = Self {
            mu,
            a,
            c,
            q,
            r,
            geometry,
        };
        m.validate()?;
        Ok(m)
    }

    /// State dimension `n`.
    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    /// Observation dimension `N`.
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Check dimensions, symmetry and semi-definiteness of `Q`.
    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        let big_n = self.geometry.len();
        if self.mu.len() != big_n {
            return Err(Error::dim("mu length", big_n, self.mu.len()));
        }
        if self.a.ncols() != n {
            return Err(Error::dim("A columns", n, self.a.ncols()));
        }
        if self.c.nrows() != big_n {
            return Err(Error::dim("C rows", big_n, self.c.nrows()));
        }
        if self.c.ncols() != n {
            return Err(Error::dim("C columns", n, self.c.ncols()));
        }
        if self.q.shape() != (n, n) {
            return Err(Error::dim("Q size", n, self.q.nrows()));
        }
        let finite = self.mu.iter().all(|v| v.is_finite())
            && self.a.iter().all(|v| v.is_finite())
            && self.c.iter().all(|v| v.is_finite())
            && self.q.iter().all(|v| v.is_finite())
            && self.r.is_finite();
        if !finite {
            return Err(Error::InvalidModel("non-finite parameter".into()));
        }
        if self.r < 0.0 {
            return Err(Error::InvalidModel(format!("negative R = {}", self.r)));
        }
        let scale = self.q.amax().max(1.0);
        if (&self.q - self.q.transpose()).amax() > 1e-9 * scale {
            return Err(Error::InvalidModel("Q is not symmetric".into()));
        }
        let min_eig = linalg::min_eigenvalue(&self.q);
        if min_eig < -1e-10 * scale {
            return Err(Error::InvalidModel(format!(
                "Q is not positive semi-definite (smallest eigenvalue {min_eig:e})"
            )));
        }
        Ok(())
    }

    pub fn has_orthonormal_c(&self) -> bool {
        self.c.ncols() == 0 || linalg::orthonormality_defect(&self.c) <= ORTHONORMAL_TOL
    }

    /// `mu + C x`.
    pub fn predict_template(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.order() {
            return Err(Error::dim("state", self.order(), x.len()));
        }
        Ok(&self.mu + &self.c * x)
    }

    /// Least-squares state for an observed patch, `C^+ (patch - mu)`.
    pub fn init_state(&self, patch: &DVector<f64>) -> Result<DVector<f64>> {
        if patch.len() != self.dim() {
            return Err(Error::dim("patch length", self.dim(), patch.len()));
        }
        let centered = patch - &self.mu;
        if self.has_orthonormal_c() {
            Ok(self.c.transpose() * centered)
        } else {
            Ok(linalg::pinv(&self.c) * centered)
        }
    }

    /// A factor `B` with `B B^T = Q`, negative eigenvalues clamped to zero.
    pub fn noise_factor(&self) -> DMatrix<f64> {
        linalg::psd_sqrt(&self.q)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&LdsModelFile::from(self)).expect("model serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, ModelParseError> {
        let file: LdsModelFile = serde_json::from_str(text).map_err(ModelParseError::Json)?;
        file.into_model().map_err(ModelParseError::Model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path.as_ref(), self.to_json().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            ModelParseError::Json(j) => crate::io::json_error(path, &text, &j),
            ModelParseError::Model(m) => crate::io::prefix_path(path, m),
        })
    }
}

#[derive(Debug)]
pub enum ModelParseError {
    Json(serde_json::Error),
    Model(Error),
}

/// On-disk layout of a model; matrices are nested row-major arrays.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LdsModelFile {
    rows: usize,
    cols: usize,
    order: usize,
    mu: Vec<f64>,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    c: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    q: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    r: f64,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().cloned().collect()).collect()
}

fn matrix_from_rows(name: &'static str, rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if rows.len() != nrows {
        return Err(Error::dim(name, nrows, rows.len()));
    }
    for r in rows {
        if r.len() != ncols {
            return Err(Error::dim(name, ncols, r.len()));
        }
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl From<&LdsModel> for LdsModelFile {
    fn from(m: &LdsModel) -> Self {
        Self {
            rows: m.geometry.rows,
            cols: m.geometry.cols,
            order: m.order(),
            mu: m.mu.iter().cloned().collect(),
            a: rows_of(&m.a),
            c: rows_of(&m.c),
            q: rows_of(&m.q),
            r: m.r,
        }
    }
}

impl LdsModelFile {
    fn into_model(self) -> Result<LdsModel> {
        let geometry = TemplateGeometry::new(self.rows, self.cols)?;
        let n = self.order;
        let big_n = geometry.len();
        if self.mu.len() != big_n {
            return Err(Error::dim("mu length", big_n, self.mu.len()));
        }
        LdsModel::new(
            DVector::from_vec(self.mu),
            matrix_from_rows("A", &self.a, n, n)?,
            matrix_from_rows("C", &self.c, big_n, n)?,
            matrix_from_rows("Q", &self.q, n, n)?,
            self.r,
            geometry,
        )
    }
}

/// Hidden states `x_1 .. x_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSequence {
    pub states: Vec<DVector<f64>>,
    pub order: usize,
}

impl StateSequence {
    pub fn new(states: Vec<DVector<f64>>, order: usize) -> Result<Self> {
        for s in &states {
            if s.len() != order {
                return Err(Error::dim("state", order, s.len()));
            }
        }
        Ok(Self { states, order })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn to_json(&self) -> String {
        let rows: Vec<Vec<f64>> = self.states.iter().map(|s| s.iter().cloned().collect()).collect();
        serde_json::to_string_pretty(&serde_json::json!({ "order": self.order, "states": rows }))
            .expect("states serialize")
    }
}

/// Options for [`simulate`].
#[derive(Debug, Clone)]
pub struct SimulateOptions {
    pub frames: usize,
    pub seed: u64,
    pub process_noise: bool,
    /// Per-pixel observation noise standard deviation.
    pub obs_noise_sigma: f64,
    /// State of the first frame. Drawn from `N(0, Q)` when absent.
    pub initial_state: Option<DVector<f64>>,
}

impl SimulateOptions {
    pub fn new(frames: usize, seed: u64) -> Self {
        Self {
            frames,
            seed,
            process_noise: true,
            obs_noise_sigma: 0.0,
            initial_state: None,
        }
    }
}

/// Output of [`simulate`]: raw (unclamped) templates and their states.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub geometry: TemplateGeometry,
    pub templates: Vec<DVector<f64>>,
    pub states: StateSequence,
}

impl Simulation {
    pub fn frames(&self) -> FrameSequence {
        FrameSequence::from_templates(self.geometry, &self.templates).expect("consistent geometry")
    }

    /// Templates clamped to `[0, 1]`.
    pub fn display_frames(&self) -> FrameSequence {
        FrameSequence::new(self.frames().iter().map(Frame::to_display).collect()).expect("consistent geometry")
    }
}

fn standard_normal_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Run the model forward for `opts.frames` steps.
pub fn simulate(model: &LdsModel, opts: &SimulateOptions) -> Result<Simulation> {
    if opts.frames < 1 {
        return Err(Error::InvalidArgument("simulate needs at least one frame".into()));
    }
    if !(opts.obs_noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "observation noise sigma must be >= 0, got {}",
            opts.obs_noise_sigma
        )));
    }
    model.validate()?;
    let n = model.order();
    let big_n = model.dim();
    let b = model.noise_factor();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut x = match &opts.initial_state {
        Some(x0) => {
            if x0.len() != n {
                return Err(Error::dim("initial state", n, x0.len()));
            }
            x0.clone()
        }
        None => &b * standard_normal_vec(&mut rng, n),
    };
    let mut templates = Vec::with_capacity(opts.frames);
    let mut states = Vec::with_capacity(opts.frames);
    for t in 0..opts.frames {
        if t > 0 {
            x = &model.a * &x;
            if opts.process_noise {
                x += &b * standard_normal_vec(&mut rng, n);
            }
        }
        let mut img = &model.mu + &model.c * &x;
        if opts.obs_noise_sigma > 0.0 {
            img += standard_normal_vec(&mut rng, big_n) * opts.obs_noise_sigma;
        }
        templates.push(img);
        states.push(x.clone());
    }
    Ok(Simulation {
        geometry: model.geometry,
        templates,
        states: StateSequence::new(states, n)?,
    })
}

/// Result of [`identify`].
#[derive(Debug, Clone)]
pub struct Identification {
    pub model: LdsModel,
    pub requested_order: usize,
    /// Numerical rank of the mean-subtracted data matrix.
    pub rank: usize,
    pub singular_values: Vec<f64>,
    /// Identified states `X = Sigma V^T`, one column per frame.
    pub states: DMatrix<f64>,
}

impl Identification {
    pub fn order_reduced(&self) -> bool {
        self.model.order() < self.requested_order
    }
}

/// Learn `(mu, A, C, Q, R)` from a sequence of patches with a rank-`order`
/// SVD of the mean-subtracted data followed by least squares for `A`.
pub fn identify(templates: &[DVector<f64>], geometry: TemplateGeometry, order: usize) -> Result<Identification> {
    let frames = templates.len();
    if frames <= order {
        return Err(Error::Identification(format!(
            "need more than {order} frames for order {order}, got {frames}"
        )));
    }
    let big_n = geometry.len();
    for t in templates {
        if t.len() != big_n {
            return Err(Error::dim("patch length", big_n, t.len()));
        }
    }
    let mut mu = DVector::zeros(big_n);
    for t in templates {
        mu += t;
    }
    mu /= frames as f64;
    let centered = DMatrix::from_fn(big_n, frames, |i, j| templates[j][i] - mu[i]);

    let svd = linalg::sorted_svd(&centered);
    // Relative to the raw data scale, so round-off in the mean subtraction of
    // a constant sequence does not count as signal.
    let raw_norm = templates.iter().map(|t| t.norm_squared()).sum::<f64>().sqrt();
    let sigma_max = svd.singular_values.first().copied().unwrap_or(0.0);
    let threshold = linalg::RANK_TOL * sigma_max.max(raw_norm);
    let rank = svd.singular_values.iter().filter(|&&s| s > threshold).count();
    let n = order.min(rank);
    if n < order {
        log::warn!("identify: data rank {rank} below requested order {order}; order reduced to {n}");
    }
    let c = svd.u.columns(0, n).into_owned();
    let x = DMatrix::from_fn(n, frames, |i, j| svd.singular_values[i] * svd.v_t[(i, j)]);

    let x_prev = x.columns(0, frames - 1).into_owned();
    let x_next = x.columns(1, frames - 1).into_owned();
    let a = &x_next * linalg::pinv(&x_prev);
    let resid = &x_next - &a * &x_prev;
    let q = linalg::symmetrize(&(&resid * resid.transpose() / (frames - 1) as f64));

    let recon = &centered - &c * &x;
    let r = recon.norm_squared() / (big_n * frames) as f64;

    let model = LdsModel::new(mu, a, c, q, r, geometry)?;
    Ok(Identification {
        model,
        requested_order: order,
        rank,
        singular_values: svd.singular_values,
        states: x,
    })
}

/// [`identify`] on a sequence whose frames are the patches themselves.
pub fn identify_frames(frames: &FrameSequence, order: usize) -> Result<Identification> {
    let geometry = TemplateGeometry::new(frames.height(), frames.width())?;
    let patches: Vec<DVector<f64>> = frames
        .iter()
        .map(|f| {
            DVector::from_fn(geometry.len(), |k, _| {
                let (row, col) = geometry.position(k);
                f.get(col, row)
            })
        })
        .collect();
    identify(&patches, geometry, order)
}

/// Bilinear resampling of a column-wise `src` image to `target`, optionally
/// mirrored left-right.
fn resample(src: &[f64], from: TemplateGeometry, target: TemplateGeometry, reflect: bool) -> DVector<f64> {
    let img = Frame::new(from.cols, from.rows, {
        let mut row_major = vec![0.0; from.len()];
        for (k, &v) in src.iter().enumerate() {
            let (row, col) = from.position(k);
            row_major[row * from.cols + col] = v;
        }
        row_major
    })
    .expect("non-empty geometry");
    let sy = from.rows as f64 / target.rows as f64;
    let sx = from.cols as f64 / target.cols as f64;
    DVector::from_fn(target.len(), |k, _| {
        let (row, mut col) = target.position(k);
        if reflect {
            col = target.cols - 1 - col;
        }
        let y = (row as f64 + 0.5) * sy - 0.5;
        let x = (col as f64 + 0.5) * sx - 0.5;
        img.sample(x, y)
    })
}

/// Resample `mu` and the basis images of `C` to a new window size (and
/// optionally mirror them). `C` is re-orthonormalised by a thin QR and the
/// triangular factor is absorbed into the state basis, so `A` and `Q` are
/// conjugated accordingly: `x' = R x`.
pub fn transform_model(model: &LdsModel, target: TemplateGeometry, reflect_horizontal: bool) -> Result<LdsModel> {
    if target.is_empty() {
        return Err(Error::InvalidArgument("target geometry has zero area".into()));
    }
    let n = model.order();
    if target.len() < n {
        return Err(Error::InvalidArgument(format!(
            "target window of {} pixels cannot hold an order-{n} model",
            target.len()
        )));
    }
    let src = model.geometry;
    let mu = resample(model.mu.as_slice(), src, target, reflect_horizontal);
    let mut c_interp = DMatrix::zeros(target.len(), n);
    for j in 0..n {
        let col: Vec<f64> = model.c.column(j).iter().cloned().collect();
        c_interp.set_column(j, &resample(&col, src, target, reflect_horizontal));
    }
    let (c, r) = linalg::thin_qr(&c_interp);
    let (a, q) = if n == 0 {
        (model.a.clone(), model.q.clone())
    } else {
        let r_inv = r.clone().try_inverse().ok_or_else(|| {
            Error::InvalidModel("resampled observation matrix lost rank".into())
        })?;
        let diag_min = (0..n).map(|k| r[(k, k)].abs()).fold(f64::INFINITY, f64::min);
        let diag_max = (0..n).map(|k| r[(k, k)].abs()).fold(0.0, f64::max);
        if diag_min <= linalg::RANK_TOL * diag_max {
            return Err(Error::InvalidModel("resampled observation matrix lost rank".into()));
        }
        (&r * &model.a * r_inv, linalg::symmetrize(&(&r * &model.q * r.transpose())))
    };
    LdsModel::new(mu, a, c, q, model.r, target)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_model() -> LdsModel {
        let g = TemplateGeometry::new(3, 2).unwrap();
        let c = linalg::thin_qr(&DMatrix::from_row_slice(
            6,
            2,
            &[1.0, 0.2, 0.3, 1.0, -0.5, 0.1, 0.2, 0.7, 0.9, -0.3, 0.4, 0.4],
        ))
        .0;
        LdsModel::new(
            DVector::from_vec(vec![0.5, 0.4, 0.6, 0.3, 0.5, 0.7]),
            DMatrix::from_row_slice(2, 2, &[0.8, 0.1, -0.2, 0.7]),
            c,
            DMatrix::from_row_slice(2, 2, &[0.01, 0.0, 0.0, 0.02]),
            0.0,
            g,
        )
        .unwrap()
    }

    #[test]
    fn zero_state_reproduces_mean() {
        let mut m = toy_model();
        m.q = DMatrix::zeros(2, 2);
        let sim = simulate(&m, &SimulateOptions::new(5, 1)).unwrap();
        for t in &sim.templates {
            assert_eq!(t, &m.mu);
        }
    }

    #[test]
    fn simulate_is_deterministic() {
        let m = toy_model();
        let opts = SimulateOptions {
            obs_noise_sigma: 0.01,
            ..SimulateOptions::new(10, 42)
        };
        let a = simulate(&m, &opts).unwrap();
        let b = simulate(&m, &opts).unwrap();
        assert_eq!(a.templates, b.templates);
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn simulate_rejects_bad_input() {
        let mut m = toy_model();
        assert!(simulate(&m, &SimulateOptions::new(0, 1)).is_err());
        m.q = DMatrix::from_row_slice(2, 2, &[0.01, 0.0, 0.0, -0.5]);
        assert!(matches!(
            simulate(&m, &SimulateOptions::new(3, 1)),
            Err(Error::InvalidModel(_))
        ));
    }

    #[test]
    fn constant_sequence_reduces_order_to_zero() {
        let g = TemplateGeometry::new(2, 2).unwrap();
        let mu = DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
        let id = identify(&vec![mu.clone(); 6], g, 3).unwrap();
        assert_eq!(id.rank, 0);
        assert_eq!(id.model.order(), 0);
        assert!(id.order_reduced());
        assert!((&id.model.mu - &mu).amax() < 1e-15);
    }

    #[test]
    fn identify_needs_more_frames_than_order() {
        let g = TemplateGeometry::new(2, 2).unwrap();
        let p = DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
        assert!(matches!(identify(&[p.clone(), p], g, 2), Err(Error::Identification(_))));
    }

    #[test]
    fn init_state_inverts_on_column_space() {
        let m = toy_model();
        let x = DVector::from_vec(vec![0.3, -0.2]);
        assert!(m.init_state(&m.mu).unwrap().amax() < 1e-15);
        let patch = m.predict_template(&x).unwrap();
        assert!((m.init_state(&patch).unwrap() - &x).amax() < 1e-14);
        assert!(m.init_state(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn predict_template_basics() {
        let m = toy_model();
        assert_eq!(m.predict_template(&DVector::zeros(2)).unwrap(), m.mu);
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        let p = m.predict_template(&e1).unwrap();
        assert!((p - (&m.mu + m.c.column(0))).amax() < 1e-15);
        assert!(m.predict_template(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn json_roundtrip_and_field_names() {
        let m = toy_model();
        let text = m.to_json();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["mu", "A", "C", "Q", "R", "rows", "cols", "order"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["C"].as_array().unwrap().len(), 6);
        let back = LdsModel::from_json(&text).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn json_rejects_unknown_keys_and_bad_dims() {
        let m = toy_model();
        let mut v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        v["extra"] = serde_json::json!(1);
        assert!(LdsModel::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        v["order"] = serde_json::json!(3);
        assert!(LdsModel::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn transform_identity_keeps_model() {
        let m = toy_model();
        let t = transform_model(&m, m.geometry, false).unwrap();
        assert!((&t.mu - &m.mu).amax() < 1e-15);
        assert!((&t.c - &m.c).amax() < 1e-12);
        assert!((&t.a - &m.a).amax() < 1e-12);
        assert!((&t.q - &m.q).amax() < 1e-12);
    }

    #[test]
    fn reflection_is_an_involution_on_mu() {
        let m = toy_model();
        let once = transform_model(&m, m.geometry, true).unwrap();
        assert!((&once.mu - &m.mu).amax() > 0.0);
        let twice = transform_model(&once, m.geometry, true).unwrap();
        assert!((&twice.mu - &m.mu).amax() < 1e-15);
    }

    #[test]
    fn transform_rejects_degenerate_target() {
        let m = toy_model();
        let tiny = TemplateGeometry { rows: 1, cols: 1 };
        assert!(transform_model(&m, tiny, false).is_err());
        let empty = TemplateGeometry { rows: 0, cols: 4 };
        assert!(transform_model(&m, empty, false).is_err());
    }
}
