//! Embedding geometry and identity resolution.
//!
//! The face encoder itself runs in an external backend; this module only
//! sees its output vectors. Identity is resolved by exact cosine search over
//! the enrolled users, and [`contrastive_loss`] provides the symmetric
//! InfoNCE objective (with analytic gradient) used to train such encoders.

use crate::domain::EmbeddingVector;
use crate::persistence::{IndexError, ScoredKey, VectorIndex};

/// Default minimum cosine score for re-identifying an enrolled user.
pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.85;
/// Default InfoNCE temperature.
pub const DEFAULT_CONTRASTIVE_TEMPERATURE: f64 = 0.07;

const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EncoderError {
    #[error("vector norm below {ZERO_NORM:e}")]
    ZeroVector,
    #[error("vector contains non-finite entries")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("contrastive batch needs at least 2 pairs, got {0}")]
    BatchTooSmall(usize),
    #[error("anchors ({anchors}) and positives ({positives}) differ in length")]
    BatchShape { anchors: usize, positives: usize },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("empty user id")]
    EmptyUserId,
    #[error("identity store: {0}")]
    Storage(String),
}

impl From<IndexError> for EncoderError {
    fn from(err: IndexError) -> Self {
        match err {
            IndexError::DimensionMismatch { expected, actual } => EncoderError::DimensionMismatch { expected, actual },
            IndexError::ZeroVector => EncoderError::ZeroVector,
            IndexError::Storage(msg) => EncoderError::Storage(msg),
        }
    }
}

/// Scales `v` to unit L2 norm.
pub fn normalize(v: &EmbeddingVector) -> Result<EmbeddingVector, EncoderError> {
    if !v.is_finite() {
        return Err(EncoderError::NonFinite);
    }
    let norm = v.norm();
    if norm < ZERO_NORM {
        return Err(EncoderError::ZeroVector);
    }
    Ok(EmbeddingVector(v.0.iter().map(|x| x / norm).collect()))
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EncoderError> {
    cosine_slices(a.as_slice(), b.as_slice())
}

pub(crate) fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64, EncoderError> {
    if a.len() != b.len() {
        return Err(EncoderError::DimensionMismatch { expected: a.len(), actual: b.len() });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < ZERO_NORM || nb < ZERO_NORM {
        return Err(EncoderError::ZeroVector);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityMatch {
    pub user_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Resolution {
    Match(IdentityMatch),
    NoMatch,
}

impl Resolution {
    pub fn user_id(&self) -> Option<&str> {
        match self {
            Resolution::Match(m) => Some(&m.user_id),
            Resolution::NoMatch => None,
        }
    }
}

/// Finds the enrolled user most similar to `probe`.
///
/// Returns a match only if the best score reaches `threshold`. Equal scores
/// go to the user enrolled first. An empty store never matches.
pub fn resolve_identity(
    probe: &EmbeddingVector,
    identities: &VectorIndex,
    threshold: f64,
) -> Result<Resolution, EncoderError> {
    if !probe.is_finite() {
        return Err(EncoderError::NonFinite);
    }
    let best = identities.query(probe, None, 1)?;
    Ok(match best.into_iter().next() {
        Some(ScoredKey { key, score, .. }) if score >= threshold => {
            Resolution::Match(IdentityMatch { user_id: key, score })
        }
        _ => Resolution::NoMatch,
    })
}

/// Record of a stored identity vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Enrollment {
    pub user_id: String,
    pub embedding: EmbeddingVector,
    /// Position in enrollment order; kept across re-enrollment.
    pub sequence: u64,
}

/// Stores the normalized embedding for `user_id`, replacing any previous one.
pub fn enroll(user_id: &str, e: &EmbeddingVector, identities: &VectorIndex) -> Result<Enrollment, EncoderError> {
    if user_id.is_empty() {
        return Err(EncoderError::EmptyUserId);
    }
    let unit = normalize(e)?;
    let entry = identities.upsert(user_id, "", unit)?;
    Ok(Enrollment { user_id: user_id.to_string(), embedding: entry.vector, sequence: entry.sequence })
}

/// Matched anchor/positive pairs for the contrastive objective.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub anchors: Vec<EmbeddingVector>,
    pub positives: Vec<EmbeddingVector>,
    pub temperature: f64,
}

#[derive(Debug, Clone)]
pub struct ContrastiveOutput {
    pub loss: f64,
    /// d loss / d anchor entries, one vector per anchor.
    pub anchor_gradients: Vec<EmbeddingVector>,
}

/// Symmetric InfoNCE over in-batch negatives.
///
/// With logits `s[i][j] = cos(a_i, p_j) / t`, the loss averages the
/// cross-entropy of each row softmax (anchor to positives, target `j = i`)
/// and each column softmax (positive to anchors, target `i = j`), then takes
/// the mean of the two directions.
pub fn contrastive_loss(batch: &ContrastiveBatch) -> Result<ContrastiveOutput, EncoderError> {
    let b = batch.anchors.len();
    if b != batch.positives.len() {
        return Err(EncoderError::BatchShape { anchors: b, positives: batch.positives.len() });
    }
    if b < 2 {
        return Err(EncoderError::BatchTooSmall(b));
    }
    let t = batch.temperature;
    if t <= 0.0 || !t.is_finite() {
        return Err(EncoderError::NonPositiveTemperature(t));
    }
    let dim = batch.anchors[0].dim();
    for v in batch.anchors.iter().chain(&batch.positives) {
        if v.dim() != dim {
            return Err(EncoderError::DimensionMismatch { expected: dim, actual: v.dim() });
        }
        if !v.is_finite() {
            return Err(EncoderError::NonFinite);
        }
    }

    let a_norms: Vec<f64> = batch.anchors.iter().map(EmbeddingVector::norm).collect();
    let p_norms: Vec<f64> = batch.positives.iter().map(EmbeddingVector::norm).collect();
    if a_norms.iter().chain(&p_norms).any(|n| *n < ZERO_NORM) {
        return Err(EncoderError::ZeroVector);
    }

    // cosine matrix and logits
    let mut cos = vec![vec![0.0; b]; b];
    for i in 0..b {
        for j in 0..b {
            let dot: f64 = batch.anchors[i].0.iter().zip(&batch.positives[j].0).map(|(x, y)| x * y).sum();
            cos[i][j] = dot / (a_norms[i] * p_norms[j]);
        }
    }
    let logits: Vec<Vec<f64>> = cos.iter().map(|row| row.iter().map(|c| c / t).collect()).collect();

    let row_softmax: Vec<Vec<f64>> = logits.iter().map(|row| softmax(row)).collect();
    let col_softmax: Vec<Vec<f64>> =
        (0..b).map(|j| softmax(&(0..b).map(|i| logits[i][j]).collect::<Vec<_>>())).collect();

    let mut row_loss = 0.0;
    let mut col_loss = 0.0;
    #[allow(clippy::needless_range_loop)]
    for i in 0..b {
        row_loss += log_sum_exp(&logits[i]) - logits[i][i];
        let column: Vec<f64> = (0..b).map(|r| logits[r][i]).collect();
        col_loss += log_sum_exp(&column) - logits[i][i];
    }
    let loss = 0.5 * (row_loss + col_loss) / b as f64;

    // dL/ds_ij, then chain through the cosine to the anchor entries.
    let scale = 0.5 / b as f64;
    let mut grads = Vec::with_capacity(b);
    for i in 0..b {
        let a = &batch.anchors[i].0;
        let mut g = vec![0.0; dim];
        for j in 0..b {
            let delta = if i == j { 1.0 } else { 0.0 };
            let dl_ds = scale * ((row_softmax[i][j] - delta) + (col_softmax[j][i] - delta));
            let dl_dcos = dl_ds / t;
            let p = &batch.positives[j].0;
            let inv = 1.0 / (a_norms[i] * p_norms[j]);
            let along = cos[i][j] / (a_norms[i] * a_norms[i]);
            for d in 0..dim {
                g[d] += dl_dcos * (p[d] * inv - along * a[d]);
            }
        }
        grads.push(EmbeddingVector(g));
    }

    Ok(ContrastiveOutput { loss, anchor_gradients: grads })
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
