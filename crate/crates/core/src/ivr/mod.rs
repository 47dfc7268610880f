//! IVR/URA head removal on the agent channel.
//!
//! The agent channel is cut into fixed windows, each window is summarised
//! by an 8-dimensional acoustic feature vector, the windows are clustered
//! with k-means (k = 2) and the first sustained run of non-IVR windows marks
//! the transition to human speech. Everything before it is dropped from
//! both channels.

mod boundary;
mod features;
mod kmeans;

pub use boundary::{detect_ivr_boundary, scan_assignments, trim_ivr, IvrDecision, IvrDecisionRecord, TrimOutcome};
pub use features::{extract_feature_windows, FeatureWindow, FEATURE_DIM};
pub use kmeans::{kmeans, ClusterModel, KmeansParams, Normalization};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum IvrError {
    #[error("clip of {duration_s:.3}s is shorter than one {window_s}s window")]
    ClipTooShort { duration_s: f64, window_s: f64 },
    #[error("invalid window parameters: window {window_s}s, hop {hop_s}s")]
    BadWindow { window_s: f64, hop_s: f64 },
    #[error("need at least k = {k} points, got {n}")]
    TooFewPoints { n: usize, k: usize },
    #[error("points must have at least one dimension and equal length")]
    BadDimension,
    #[error("non-finite feature value at point {point}, dimension {dim}")]
    NonFinite { point: usize, dim: usize },
    #[error("boundary detection requires k = 2, model has k = {0}")]
    WrongK(usize),
    #[error("model has no assignments")]
    NoAssignments,
    #[error("boundary {boundary_s}s lies beyond clip duration {duration_s:.3}s")]
    BoundaryBeyondClip { boundary_s: f64, duration_s: f64 },
}

/// End-to-end detection for one call: features on the agent channel,
/// clustering, then boundary scan.
pub fn detect_for_clip(
    agent: &crate::audio::AudioClip,
    window_s: f64,
    hop_s: f64,
    params: &KmeansParams,
    head_windows: usize,
    consec_m: usize,
) -> Result<(IvrDecision, ClusterModel), IvrError> {
    let windows = extract_feature_windows(agent, window_s, hop_s)?;
    let points: Vec<Vec<f64>> = windows.iter().map(|w| w.features.to_vec()).collect();
    let model = kmeans(&points, params)?;
    let decision = detect_ivr_boundary(&model, hop_s, head_windows, consec_m)?;
    Ok((decision, model))
}
