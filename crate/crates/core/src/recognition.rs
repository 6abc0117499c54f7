//! Martin distance between LDS models and tracking-based recognition.
//!
//! Three strategies share one tracking pass per training model:
//!
//! * [`Strategy::TrackReconstruct`] ranks models by their mean tracking
//!   objective.
//! * [`Strategy::TrackThenClassify`] identifies a model from the winning
//!   track and runs 1-NN on Martin distances.
//! * [`Strategy::ClassifierCost`] identifies a model from every candidate's
//!   own track and ranks by its Martin distance to that candidate.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{FrameSequence, Location, TemplateGeometry};
use crate::lds::{identify, transform_model, LdsModel};
use crate::linalg;
use crate::tracker::{TrackResult, Tracker, TrackerConfig};

/// Floor applied to `cos^2` of each principal angle.
pub const COS2_FLOOR: f64 = 1e-12;
/// Relative margin a mirrored model must win by to replace the original.
pub const ORIENTATION_TIE: f64 = 1e-9;
/// Longest observability horizon.
pub const MAX_HORIZON: usize = 50;

/// Observability horizon used for a pair of orders.
pub fn horizon(n1: usize, n2: usize) -> usize {
    (10 * n1.max(n2)).clamp(1, MAX_HORIZON)
}

/// `[C; CA; ...; CA^(m-1)]`.
pub fn observability_matrix(model: &LdsModel, m: usize) -> DMatrix<f64> {
    let (p, n) = model.c.shape();
    let mut out = DMatrix::zeros(p * m, n);
    let mut block = model.c.clone();
    for k in 0..m {
        out.view_mut((k * p, 0), (p, n)).copy_from(&block);
        block = &block * &model.a;
    }
    out
}

/// Cosines of the principal angles between the column spans of `a` and `b`,
/// largest first. Spans are taken at their numerical ranks.
pub fn principal_cosines(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Vec<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::dim("principal angle operands", a.nrows(), b.nrows()));
    }
    let qa = linalg::orthonormal_basis(a, linalg::RANK_TOL);
    let qb = linalg::orthonormal_basis(b, linalg::RANK_TOL);
    if qa.ncols() < a.ncols() || qb.ncols() < b.ncols() {
        log::warn!(
            "rank-deficient observability: ranks {}/{} and {}/{}",
            qa.ncols(),
            a.ncols(),
            qb.ncols(),
            b.ncols()
        );
    }
    let k = qa.ncols().min(qb.ncols());
    if k == 0 {
        return Ok(Vec::new());
    }
    let s = linalg::sorted_svd(&(qa.transpose() * qb));
    Ok(s.singular_values.iter().take(k).map(|c| c.clamp(0.0, 1.0)).collect())
}

/// Martin distance `-ln prod cos^2(theta_i)` between the finite-horizon
/// observability subspaces of two models.
pub fn martin_distance(m1: &LdsModel, m2: &LdsModel) -> Result<f64> {
    if m1.dim() != m2.dim() {
        return Err(Error::dim("martin distance observation size", m1.dim(), m2.dim()));
    }
    let m = horizon(m1.order(), m2.order());
    let cosines = principal_cosines(&observability_matrix(m1, m), &observability_matrix(m2, m))?;
    let d: f64 = cosines.iter().map(|c| -(c * c).max(COS2_FLOOR).ln()).sum();
    Ok(d.max(0.0))
}

/// Pairwise distance matrix.
pub fn martin_matrix(models: &[LdsModel]) -> Result<DMatrix<f64>> {
    let k = models.len();
    let mut d = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in (i + 1)..k {
            let v = martin_distance(&models[i], &models[j])?;
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    Ok(d)
}

/// One labelled training model.
#[derive(Debug, Clone)]
pub struct TrainingModel {
    pub id: String,
    pub label: String,
    pub model: LdsModel,
}

#[derive(Debug, Clone)]
pub struct TrainingSet {
    models: Vec<TrainingModel>,
}

impl TrainingSet {
    pub fn new(models: Vec<TrainingModel>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        Ok(Self { models })
    }

    pub fn models(&self) -> &[TrainingModel] {
        &self.models
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// Sorted label vocabulary.
    pub fn labels(&self) -> Vec<String> {
        let mut l: Vec<String> = self.models.iter().map(|m| m.label.clone()).collect();
        l.sort();
        l.dedup();
        l
    }

    /// Copy without entry `index` (leave-one-out).
    pub fn without(&self, index: usize) -> Result<Self> {
        if index >= self.models.len() {
            return Err(Error::InvalidArgument(format!(
                "index {index} outside a training set of {}",
                self.models.len()
            )));
        }
        let models = self
            .models
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != index)
            .map(|(_, m)| m.clone())
            .collect();
        Self::new(models)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "tr-r")]
    TrackReconstruct,
    #[serde(rename = "t+r")]
    TrackThenClassify,
    #[serde(rename = "tr-c")]
    ClassifierCost,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Self::TrackReconstruct, Self::TrackThenClassify, Self::ClassifierCost];

    pub fn name(&self) -> &'static str {
        match self {
            Self::TrackReconstruct => "tr-r",
            Self::TrackThenClassify => "t+r",
            Self::ClassifierCost => "tr-c",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy `{s}` (expected tr-r, t+r or tr-c)")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecognitionConfig {
    pub tracker: TrackerConfig,
    /// Order of models identified from tracked patches.
    pub order: usize,
    /// Also try each training model mirrored left to right.
    pub reflections: bool,
}

impl Default for RecognitionConfig {
    fn default() -> Self {
        Self {
            tracker: TrackerConfig::default(),
            order: 5,
            reflections: true,
        }
    }
}

/// A training model tracked over the test sequence.
#[derive(Debug, Clone)]
pub struct Candidate {
    /// The training model resampled to the test window, in the orientation
    /// that was kept.
    pub model: LdsModel,
    pub reflected: bool,
    pub track: TrackResult,
    /// Mean tracking objective, `+inf` if the track touched the border.
    pub reconstruction_cost: f64,
}

/// Track `frames` once per training model, keeping the cheaper orientation.
pub fn track_candidates(
    frames: &FrameSequence,
    initial_location: &Location,
    window: TemplateGeometry,
    training: &TrainingSet,
    config: &RecognitionConfig,
) -> Result<Vec<Candidate>> {
    let mut out = Vec::with_capacity(training.len());
    for entry in training.models() {
        let mut best: Option<Candidate> = None;
        let orientations: &[bool] = if config.reflections { &[false, true] } else { &[false] };
        for &reflected in orientations {
            let model = transform_model(&entry.model, window, reflected)?;
            let mut track = Tracker::new(&model, &config.tracker)?.track(frames, initial_location)?;
            track.model_id = Some(entry.id.clone());
            let cost = if track.any_clamped() || !track.mean_objective.is_finite() {
                f64::INFINITY
            } else {
                track.mean_objective
            };
            // Mirroring leaves kernel histograms unchanged, so the two costs
            // often differ only by rounding; keep the original then.
            let better = best.as_ref().is_none_or(|b| {
                cost < b.reconstruction_cost - ORIENTATION_TIE * b.reconstruction_cost.abs()
            });
            if better {
                best = Some(Candidate {
                    model,
                    reflected,
                    track,
                    reconstruction_cost: cost,
                });
            }
        }
        out.push(best.expect("at least one orientation"));
    }
    Ok(out)
}

/// Index and label of the lowest cost; ties go to the lowest index.
pub fn nn_classify(costs: &[f64], labels: &[String]) -> Result<(usize, String)> {
    if costs.len() != labels.len() {
        return Err(Error::dim("labels", costs.len(), labels.len()));
    }
    let mut best: Option<usize> = None;
    for (i, c) in costs.iter().enumerate() {
        if !c.is_finite() {
            continue;
        }
        if best.is_none_or(|b| *c < costs[b]) {
            best = Some(i);
        }
    }
    let k = best.ok_or(Error::NoFiniteCost(costs.len()))?;
    Ok((k, labels[k].clone()))
}

#[derive(Debug, Clone)]
pub struct RecognitionResult {
    pub strategy: Strategy,
    /// One cost per training model.
    pub costs: Vec<f64>,
    pub winner: usize,
    pub label: String,
    /// Tracks reported for the test sequence.
    pub tracks: TrackResult,
    pub candidates: Vec<Candidate>,
    /// Model identified from the tracked patches (T+R only).
    pub identified: Option<LdsModel>,
}

fn identify_along(frames: &FrameSequence, track: &TrackResult, window: TemplateGeometry, order: usize) -> Result<LdsModel> {
    let patches = frames.extract_patches(&track.locations(), window)?;
    Ok(identify(&patches, window, order)?.model)
}

/// Rank already-tracked candidates with the given strategy.
pub fn recognize_from_candidates(
    frames: &FrameSequence,
    window: TemplateGeometry,
    training: &TrainingSet,
    candidates: Vec<Candidate>,
    strategy: Strategy,
    order: usize,
) -> Result<RecognitionResult> {
    if candidates.len() != training.len() {
        return Err(Error::dim("candidates", training.len(), candidates.len()));
    }
    let labels: Vec<String> = training.models().iter().map(|m| m.label.clone()).collect();
    let reconstruction: Vec<f64> = candidates.iter().map(|c| c.reconstruction_cost).collect();
    match strategy {
        Strategy::TrackReconstruct => {
            let (winner, label) = nn_classify(&reconstruction, &labels)?;
            Ok(RecognitionResult {
                strategy,
                tracks: candidates[winner].track.clone(),
                costs: reconstruction,
                winner,
                label,
                candidates,
                identified: None,
            })
        }
        Strategy::TrackThenClassify => {
            let (best, _) = nn_classify(&reconstruction, &labels)?;
            let tracks = candidates[best].track.clone();
            let identified = identify_along(frames, &tracks, window, order)?;
            let costs = candidates
                .iter()
                .map(|c| martin_distance(&identified, &c.model))
                .collect::<Result<Vec<_>>>()?;
            let (winner, label) = nn_classify(&costs, &labels)?;
            Ok(RecognitionResult {
                strategy,
                costs,
                winner,
                label,
                tracks,
                candidates,
                identified: Some(identified),
            })
        }
        Strategy::ClassifierCost => {
            let mut costs = Vec::with_capacity(candidates.len());
            for c in &candidates {
                if !c.reconstruction_cost.is_finite() {
                    costs.push(f64::INFINITY);
                    continue;
                }
                let cost = match identify_along(frames, &c.track, window, order) {
                    Ok(m) => martin_distance(&m, &c.model)?,
                    Err(e) => {
                        log::warn!("identification along candidate track failed: {e}");
                        f64::INFINITY
                    }
                };
                costs.push(cost);
            }
            let (winner, label) = nn_classify(&costs, &labels)?;
            Ok(RecognitionResult {
                strategy,
                tracks: candidates[winner].track.clone(),
                costs,
                winner,
                label,
                candidates,
                identified: None,
            })
        }
    }
}

/// Track and recognise one test sequence.
pub fn recognize(
    frames: &FrameSequence,
    initial_location: &Location,
    window: TemplateGeometry,
    training: &TrainingSet,
    strategy: Strategy,
    config: &RecognitionConfig,
) -> Result<RecognitionResult> {
    let candidates = track_candidates(frames, initial_location, window, training, config)?;
    recognize_from_candidates(frames, window, training, candidates, strategy, config.order)
}

pub fn recognize_reconstruction(
    frames: &FrameSequence,
    initial_location: &Location,
    window: TemplateGeometry,
    training: &TrainingSet,
    config: &RecognitionConfig,
) -> Result<RecognitionResult> {
    recognize(frames, initial_location, window, training, Strategy::TrackReconstruct, config)
}

pub fn recognize_track_then_classify(
    frames: &FrameSequence,
    initial_location: &Location,
    window: TemplateGeometry,
    training: &TrainingSet,
    config: &RecognitionConfig,
) -> Result<RecognitionResult> {
    recognize(frames, initial_location, window, training, Strategy::TrackThenClassify, config)
}

pub fn recognize_classifier_cost(
    frames: &FrameSequence,
    initial_location: &Location,
    window: TemplateGeometry,
    training: &TrainingSet,
    config: &RecognitionConfig,
) -> Result<RecognitionResult> {
    recognize(frames, initial_location, window, training, Strategy::ClassifierCost, config)
}

/// One line of a recognition report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub test_id: String,
    pub model_id: String,
    pub label: String,
    pub cost: f64,
    pub strategy: String,
}

impl RecognitionResult {
    pub fn report_rows(&self, test_id: &str, training: &TrainingSet) -> Vec<ReportRow> {
        training
            .models()
            .iter()
            .zip(&self.costs)
            .map(|(m, c)| ReportRow {
                test_id: test_id.to_string(),
                model_id: m.id.clone(),
                label: m.label.clone(),
                cost: *c,
                strategy: self.strategy.name().to_string(),
            })
            .collect()
    }
}

/// Counts of (true label, predicted label) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    /// `counts[i][j]`: truth `labels[i]` predicted as `labels[j]`.
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>) -> Self {
        let k = labels.len();
        Self {
            labels,
            counts: vec![vec![0; k]; k],
        }
    }

    fn slot(&mut self, label: &str) -> usize {
        match self.labels.iter().position(|l| l == label) {
            Some(i) => i,
            None => {
                self.labels.push(label.to_string());
                for row in &mut self.counts {
                    row.push(0);
                }
                self.counts.push(vec![0; self.labels.len()]);
                self.labels.len() - 1
            }
        }
    }

    pub fn record(&mut self, truth: &str, predicted: &str) {
        let i = self.slot(truth);
        let j = self.slot(predicted);
        self.counts[i][j] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return f64::NAN;
        }
        let hits: usize = (0..self.labels.len()).map(|i| self.counts[i][i]).sum();
        hits as f64 / total as f64
    }

    /// CSV with a `truth` column followed by one column per predicted label.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let err = |e: csv::Error| Error::Csv {
            path: "<memory>".into(),
            source: e,
        };
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["truth".to_string()];
        header.extend(self.labels.iter().cloned());
        w.write_record(&header).map_err(err)?;
        for (label, row) in self.labels.iter().zip(&self.counts) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(|c| c.to_string()));
            w.write_record(&rec).map_err(err)?;
        }
        w.into_inner().map_err(|e| err(e.into_error().into()))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path.as_ref(), &self.to_csv()?)
    }
}
