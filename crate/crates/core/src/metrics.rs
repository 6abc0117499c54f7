//! Pixel-error summaries for tracks against ground truth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Location;

/// Median; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("median of an empty list".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Robust standard error `sqrt(median((e - median(e))^2))`.
pub fn robust_standard_error(values: &[f64]) -> Result<f64> {
    let m = median(values)?;
    let dev: Vec<f64> = values.iter().map(|e| (e - m).powi(2)).collect();
    Ok(median(&dev)?.sqrt())
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("mean of an empty list".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Euclidean per-frame distances.
pub fn pixel_errors(tracks: &[Location], truth: &[Location]) -> Result<Vec<f64>> {
    if tracks.len() != truth.len() {
        return Err(Error::dim("track length", truth.len(), tracks.len()));
    }
    Ok(tracks.iter().zip(truth).map(|(a, b)| (a - b).norm()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frames: usize,
    pub median: f64,
    pub rse: f64,
    pub mean: f64,
    pub std: f64,
    pub errors: Vec<f64>,
}

pub fn compute_metrics(tracks: &[Location], truth: &[Location]) -> Result<MetricsReport> {
    let errors = pixel_errors(tracks, truth)?;
    let (mean, std) = mean_std(&errors)?;
    Ok(MetricsReport {
        frames: errors.len(),
        median: median(&errors)?,
        rse: robust_standard_error(&errors)?,
        mean,
        std,
        errors,
    })
}
