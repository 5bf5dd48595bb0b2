//! Likelihood-inversion probe: given original and hallucinated captions
//! with model log-likelihoods and embeddings, count per-type inversions
//! (hallucinated caption scored more likely than the original) and measure
//! how often cosine scoring ranks the original back on top.
//!
//! Log-likelihoods are treated as opaque comparable scalars. Both
//! comparisons are strict: ties resolve against the model and against the
//! scorer.

use crate::embedding::{clip_score, EmbeddingError};
use crate::store::EmbeddingStore;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("no embedding found for {record_id}")]
    MissingEmbedding { record_id: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: schema error: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HallucinationType {
    Existence,
    Attribute,
    Relationship,
}

impl HallucinationType {
    pub const ALL: [HallucinationType; 3] = [
        HallucinationType::Existence,
        HallucinationType::Attribute,
        HallucinationType::Relationship,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HallucinationType::Existence => "existence",
            HallucinationType::Attribute => "attribute",
            HallucinationType::Relationship => "relationship",
        }
    }
}

/// One value per hallucination type.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PerType<T> {
    pub existence: T,
    pub attribute: T,
    pub relationship: T,
}

impl<T> PerType<T> {
    pub fn get(&self, t: HallucinationType) -> &T {
        match t {
            HallucinationType::Existence => &self.existence,
            HallucinationType::Attribute => &self.attribute,
            HallucinationType::Relationship => &self.relationship,
        }
    }

    pub fn get_mut(&mut self, t: HallucinationType) -> &mut T {
        match t {
            HallucinationType::Existence => &mut self.existence,
            HallucinationType::Attribute => &mut self.attribute,
            HallucinationType::Relationship => &mut self.relationship,
        }
    }
}

/// A caption with its model log-likelihood and the id of its embedding row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCaption {
    pub text: String,
    pub model_loglik: f64,
    pub embedding_ref: String,
}

/// A hallucinated variant of the original caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HallucinatedCaption {
    #[serde(rename = "type")]
    pub hallu_type: HallucinationType,
    pub text: String,
    pub model_loglik: f64,
    pub embedding_ref: String,
}

/// Original caption plus up to three hallucinated variants, at most one
/// per type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub image_id: String,
    pub original: ProbeCaption,
    pub hallucinated: Vec<HallucinatedCaption>,
}

/// Per-type counts of records where the model scores the hallucinated
/// caption strictly above the original.
pub fn likelihood_inversions(records: &[ProbeRecord]) -> PerType<usize> {
    let mut counts = PerType::default();
    for record in records {
        for h in &record.hallucinated {
            if h.model_loglik > record.original.model_loglik {
                *counts.get_mut(h.hallu_type) += 1;
            }
        }
    }
    counts
}

/// Per-type percentage of inverted records where the image-text score of
/// the original caption strictly beats the hallucinated one. `None` for
/// types with no inversions. The store holds image rows keyed by image_id
/// and caption rows keyed by embedding_ref.
pub fn clip_correction_rate(
    records: &[ProbeRecord],
    store: &EmbeddingStore,
) -> Result<PerType<Option<f64>>, ProbeError> {
    let mut inverted = PerType::<usize>::default();
    let mut corrected = PerType::<usize>::default();
    for record in records {
        let image = store
            .vector(&record.image_id)
            .ok_or_else(|| ProbeError::MissingEmbedding {
                record_id: record.image_id.clone(),
            })?;
        let original = store
            .vector(&record.original.embedding_ref)
            .ok_or_else(|| ProbeError::MissingEmbedding {
                record_id: record.original.embedding_ref.clone(),
            })?;
        for h in &record.hallucinated {
            if h.model_loglik <= record.original.model_loglik {
                continue;
            }
            *inverted.get_mut(h.hallu_type) += 1;
            let hallucinated =
                store
                    .vector(&h.embedding_ref)
                    .ok_or_else(|| ProbeError::MissingEmbedding {
                        record_id: h.embedding_ref.clone(),
                    })?;
            let original_score = clip_score(&image, &original)?;
            let hallucinated_score = clip_score(&image, &hallucinated)?;
            if original_score.value() > hallucinated_score.value() {
                *corrected.get_mut(h.hallu_type) += 1;
            }
        }
    }
    let mut rates = PerType::<Option<f64>>::default();
    for t in HallucinationType::ALL {
        let n = *inverted.get(t);
        *rates.get_mut(t) = (n > 0).then(|| 100.0 * *corrected.get(t) as f64 / n as f64);
    }
    Ok(rates)
}

/// Load probe records, rejecting duplicate hallucination types per record.
pub fn load_probe_records(path: impl AsRef<Path>) -> Result<Vec<ProbeRecord>, ProbeError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ProbeError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (ix, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            return Err(ProbeError::Schema {
                path: path.to_path_buf(),
                line: ix + 1,
                message: "blank line".into(),
            });
        }
        let record: ProbeRecord = serde_json::from_str(line).map_err(|e| ProbeError::Schema {
            path: path.to_path_buf(),
            line: ix + 1,
            message: e.to_string(),
        })?;
        let mut seen = std::collections::HashSet::new();
        for h in &record.hallucinated {
            if !seen.insert(h.hallu_type) {
                return Err(ProbeError::Schema {
                    path: path.to_path_buf(),
                    line: ix + 1,
                    message: format!(
                        "duplicate hallucination type {} for image {}",
                        h.hallu_type.name(),
                        record.image_id
                    ),
                });
            }
        }
        out.push(record);
    }
    Ok(out)
}
