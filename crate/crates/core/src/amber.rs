//! Hallucination metrics over response/annotation files: the generative
//! set (CHAIR, Cover, Hal, Cog), the discriminative set (Acc, P, R, F1),
//! and the composite score combining both.
//!
//! Object extraction from free text happens upstream; inputs here are
//! pre-extracted mention sets. All metrics are percentages in [0, 100].

use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AmberError {
    #[error("no annotation for image {image_id}")]
    MissingAnnotation { image_id: String },
    #[error("input is empty")]
    EmptyInput,
    #[error("{name} = {value} is outside [0, 100]")]
    OutOfRange { name: &'static str, value: f64 },
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
}

/// Ground truth for one image: the annotated object set and the
/// hallucination-prone distractor set. The two are disjoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmberAnnotation {
    pub image_id: String,
    pub truth_objects: BTreeSet<String>,
    pub hallu_targets: BTreeSet<String>,
}

/// Pre-extracted object mentions from one generated response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerativeResponse {
    pub image_id: String,
    pub mentioned_objects: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum YesNo {
    Yes,
    No,
}

/// One discriminative (yes/no) judgement with its gold label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminativeResponse {
    pub question_id: String,
    pub predicted: YesNo,
    pub gold: YesNo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerativeMetrics {
    pub chair: f64,
    pub cover: f64,
    pub hal: f64,
    pub cog: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminativeMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// The hallucination predicate: a response hallucinates when any mention
/// falls outside the annotated object set. Isolated here so the predicate
/// can be swapped against a benchmark reference implementation if needed.
pub fn response_hallucinated(mentions: &BTreeSet<String>, truth: &BTreeSet<String>) -> bool {
    mentions.iter().any(|m| !truth.contains(m))
}

/// Per-response generative metrics, averaged over responses:
/// - chair(r) = 1 - |M ∩ T| / |M| (0 for empty M)
/// - cover(r) = |M ∩ T| / |T| (0 for empty T)
/// - hal: fraction of responses with chair(r) > 0
/// - cog(r) = |M ∩ H| / |M| (0 for empty M)
///
/// Empty-mention responses contribute 0 to CHAIR, Cog, and Hal: perfect
/// abstention is not hallucinatory.
pub fn generative_metrics(
    responses: &[GenerativeResponse],
    annotations: &[AmberAnnotation],
) -> Result<GenerativeMetrics, AmberError> {
    if responses.is_empty() {
        return Err(AmberError::EmptyInput);
    }
    let by_image: HashMap<&str, &AmberAnnotation> = annotations
        .iter()
        .map(|a| (a.image_id.as_str(), a))
        .collect();
    let mut chair_sum = 0.0f64;
    let mut cover_sum = 0.0f64;
    let mut cog_sum = 0.0f64;
    let mut hallucinated = 0usize;
    for response in responses {
        let annotation = by_image.get(response.image_id.as_str()).ok_or_else(|| {
            AmberError::MissingAnnotation {
                image_id: response.image_id.clone(),
            }
        })?;
        let mentions = &response.mentioned_objects;
        let truth = &annotation.truth_objects;
        let true_mentions = mentions.intersection(truth).count();
        if !mentions.is_empty() {
            let m = mentions.len() as f64;
            chair_sum += 1.0 - true_mentions as f64 / m;
            cog_sum += mentions.intersection(&annotation.hallu_targets).count() as f64 / m;
        }
        if !truth.is_empty() {
            cover_sum += true_mentions as f64 / truth.len() as f64;
        }
        if response_hallucinated(mentions, truth) {
            hallucinated += 1;
        }
    }
    let n = responses.len() as f64;
    Ok(GenerativeMetrics {
        chair: 100.0 * chair_sum / n,
        cover: 100.0 * cover_sum / n,
        hal: 100.0 * hallucinated as f64 / n,
        cog: 100.0 * cog_sum / n,
    })
}

/// Standard binary metrics with "yes" as the positive class. Degenerate
/// denominators report 0.
pub fn discriminative_metrics(
    responses: &[DiscriminativeResponse],
) -> Result<DiscriminativeMetrics, AmberError> {
    if responses.is_empty() {
        return Err(AmberError::EmptyInput);
    }
    let mut tp = 0usize;
    let mut tn = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for r in responses {
        match (r.predicted, r.gold) {
            (YesNo::Yes, YesNo::Yes) => tp += 1,
            (YesNo::No, YesNo::No) => tn += 1,
            (YesNo::Yes, YesNo::No) => fp += 1,
            (YesNo::No, YesNo::Yes) => fn_ += 1,
        }
    }
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(DiscriminativeMetrics {
        accuracy: 100.0 * (tp + tn) as f64 / responses.len() as f64,
        precision: 100.0 * precision,
        recall: 100.0 * recall,
        f1: 100.0 * f1,
    })
}

/// The raw composite: ((100 - CHAIR) + F1) / 2, both inputs in [0, 100].
pub fn amber_composite(chair: f64, f1: f64) -> Result<f64, AmberError> {
    for (name, value) in [("CHAIR", chair), ("F1", f1)] {
        if !(0.0..=100.0).contains(&value) {
            return Err(AmberError::OutOfRange { name, value });
        }
    }
    Ok(((100.0 - chair) + f1) / 2.0)
}

/// The composite score as reported: one decimal, round-half-up.
pub fn amber_score(chair: f64, f1: f64) -> Result<f64, AmberError> {
    Ok(round_half_up_1dp(amber_composite(chair, f1)?))
}

/// Round a non-negative value half-up to one decimal. The 1e-9 nudge
/// absorbs binary representation error in values like 81.35 so the decimal
/// half-up convention holds.
pub fn round_half_up_1dp(x: f64) -> f64 {
    ((x * 10.0) + 0.5 + 1e-9).floor() / 10.0
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, AmberError> {
    let text = std::fs::read_to_string(path).map_err(|source| AmberError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (ix, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            return Err(AmberError::Schema {
                path: path.to_path_buf(),
                line: ix + 1,
                message: "blank line".into(),
            });
        }
        out.push(serde_json::from_str(line).map_err(|e| AmberError::Schema {
            path: path.to_path_buf(),
            line: ix + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Load annotations, rejecting overlap between truth and distractor sets.
pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<AmberAnnotation>, AmberError> {
    let path = path.as_ref();
    let annotations: Vec<AmberAnnotation> = read_jsonl(path)?;
    for (ix, a) in annotations.iter().enumerate() {
        if let Some(overlap) = a.truth_objects.intersection(&a.hallu_targets).next() {
            return Err(AmberError::Schema {
                path: path.to_path_buf(),
                line: ix + 1,
                message: format!(
                    "truth_objects and hallu_targets overlap on {overlap:?} for image {}",
                    a.image_id
                ),
            });
        }
    }
    Ok(annotations)
}

pub fn load_generative_responses(
    path: impl AsRef<Path>,
) -> Result<Vec<GenerativeResponse>, AmberError> {
    let path = path.as_ref();
    let responses: Vec<GenerativeResponse> = read_jsonl(path)?;
    for (ix, r) in responses.iter().enumerate() {
        if r.image_id.is_empty() {
            return Err(AmberError::Schema {
                path: path.to_path_buf(),
                line: ix + 1,
                message: "image_id must be non-empty".into(),
            });
        }
    }
    Ok(responses)
}

pub fn load_discriminative_responses(
    path: impl AsRef<Path>,
) -> Result<Vec<DiscriminativeResponse>, AmberError> {
    read_jsonl(path.as_ref())
}
