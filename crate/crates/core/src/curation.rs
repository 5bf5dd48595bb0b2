//! CLIP ranking and global filtering: per-image caption ranking, category
//! assignment with seeded text down-sampling, caption score/length
//! thresholds, and question score thresholds.
//!
//! Thresholds are strict-less-than drops: a caption at exactly the minimum
//! score is kept. A caption failing both the score and length checks
//! reports the score drop (checks run score-first).

use crate::embedding::{assign_category, clip_score, EmbeddingError, ImageCategory, PrototypeSet};
use crate::hash::{hash_with_seed, unit_f64};
use crate::records::{CaptionRecord, CaptionStatus, ImageRecord, QARecord, QaStatus};
use crate::store::EmbeddingStore;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("no embedding found for record {record_id}")]
    MissingEmbedding { record_id: String },
    #[error(
        "image {image_id} has embedding_ref {embedding_ref} outside the store (len {store_len})"
    )]
    OrphanEmbeddingRef {
        image_id: String,
        embedding_ref: usize,
        store_len: usize,
    },
    #[error("caption {caption_id} belongs to image {found}, expected {expected}")]
    MismatchedImage {
        caption_id: String,
        expected: String,
        found: String,
    },
    #[error("caption {caption_id} has no score; rank it before filtering")]
    UnscoredCaption { caption_id: String },
    #[error("record {record_id} has status {status} and cannot enter this stage")]
    InvalidStatus { record_id: String, status: String },
    #[error("invalid curation config: {message}")]
    InvalidConfig { message: String },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Thresholds and knobs for global filtering.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationConfig {
    /// Captions scoring strictly below this are dropped.
    pub caption_score_min: f32,
    /// Questions scoring strictly below this are dropped.
    pub question_score_min: f32,
    /// Captions longer than this many whitespace words are dropped.
    pub caption_max_words: usize,
    /// Seed for the per-image text down-sampling draw. The pipeline sets
    /// this from the run seed; standalone callers may set it directly.
    pub text_downsample_seed: u64,
    /// Keep probability for text-category images. `None` resolves per run
    /// to the ratio that caps text at the mean count of the other three
    /// categories.
    pub text_cap_ratio: Option<f32>,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            caption_score_min: 28.0,
            question_score_min: 25.0,
            caption_max_words: 60,
            text_downsample_seed: 0,
            text_cap_ratio: None,
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<(), CurationError> {
        let bad = |message: String| Err(CurationError::InvalidConfig { message });
        if self.caption_score_min < 0.0 || self.question_score_min < 0.0 {
            return bad("score thresholds must be non-negative".into());
        }
        if self.caption_max_words == 0 {
            return bad("caption_max_words must be positive".into());
        }
        if let Some(r) = self.text_cap_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return bad(format!("text_cap_ratio {r} must be in (0, 1]"));
            }
        }
        Ok(())
    }
}

/// Score every caption of one image and sort by score descending, ties by
/// caption_id ascending. Output is a permutation of the input with statuses
/// advanced to scored.
pub fn rank_captions(
    image: &ImageRecord,
    mut captions: Vec<CaptionRecord>,
    images: &EmbeddingStore,
    texts: &EmbeddingStore,
) -> Result<Vec<CaptionRecord>, CurationError> {
    let image_vec =
        images
            .vector_at(image.embedding_ref)
            .ok_or_else(|| CurationError::OrphanEmbeddingRef {
                image_id: image.image_id.clone(),
                embedding_ref: image.embedding_ref,
                store_len: images.len(),
            })?;
    for caption in &mut captions {
        if caption.image_id != image.image_id {
            return Err(CurationError::MismatchedImage {
                caption_id: caption.caption_id.clone(),
                expected: image.image_id.clone(),
                found: caption.image_id.clone(),
            });
        }
        if !matches!(caption.status, CaptionStatus::Raw | CaptionStatus::Scored) {
            return Err(CurationError::InvalidStatus {
                record_id: caption.caption_id.clone(),
                status: format!("{:?}", caption.status),
            });
        }
        let text_vec =
            texts
                .vector(&caption.caption_id)
                .ok_or_else(|| CurationError::MissingEmbedding {
                    record_id: caption.caption_id.clone(),
                })?;
        caption.score = Some(clip_score(&image_vec, &text_vec)?);
        caption.status = CaptionStatus::Scored;
    }
    captions.sort_by(|a, b| {
        let sa = a.score.expect("scored above").value();
        let sb = b.score.expect("scored above").value();
        sb.partial_cmp(&sa)
            .expect("scores are finite")
            .then_with(|| a.caption_id.cmp(&b.caption_id))
    });
    Ok(captions)
}

/// Result of category assignment plus text down-sampling.
#[derive(Debug, Clone)]
pub struct DownsampleOutcome {
    /// Kept images in input order, with `category` populated.
    pub kept: Vec<ImageRecord>,
    /// Count of text-category images removed by the seeded draw.
    pub dropped_text: usize,
    /// Pre-downsampling counts per category.
    pub category_counts: BTreeMap<ImageCategory, usize>,
    /// The keep probability actually applied to text images.
    pub resolved_ratio: f32,
}

/// Assign every image a category, then keep text-category images with a
/// seeded per-image Bernoulli draw. The draw depends only on
/// (seed, image_id), never on iteration order, so identical seeds give
/// identical kept sets.
pub fn categorize_and_downsample(
    images: Vec<ImageRecord>,
    protos: &PrototypeSet,
    cfg: &CurationConfig,
    store: &EmbeddingStore,
) -> Result<DownsampleOutcome, CurationError> {
    cfg.validate()?;
    let mut categorized = Vec::with_capacity(images.len());
    let mut category_counts: BTreeMap<ImageCategory, usize> = BTreeMap::new();
    for mut image in images {
        let vec = store.vector_at(image.embedding_ref).ok_or_else(|| {
            CurationError::OrphanEmbeddingRef {
                image_id: image.image_id.clone(),
                embedding_ref: image.embedding_ref,
                store_len: store.len(),
            }
        })?;
        let category = assign_category(&vec, protos)?;
        image.category = Some(category);
        *category_counts.entry(category).or_insert(0) += 1;
        categorized.push(image);
    }

    let resolved_ratio = match cfg.text_cap_ratio {
        Some(r) => r,
        None => auto_text_ratio(&category_counts),
    };

    let mut kept = Vec::with_capacity(categorized.len());
    let mut dropped_text = 0;
    for image in categorized {
        if image.category == Some(ImageCategory::Text) {
            let draw = unit_f64(hash_with_seed(
                cfg.text_downsample_seed,
                image.image_id.as_bytes(),
            ));
            if draw >= f64::from(resolved_ratio) {
                dropped_text += 1;
                continue;
            }
        }
        kept.push(image);
    }
    Ok(DownsampleOutcome {
        kept,
        dropped_text,
        category_counts,
        resolved_ratio,
    })
}

/// Default text keep-ratio: cap text at the mean count of the other three
/// categories. 1.0 when there is no text surplus.
fn auto_text_ratio(counts: &BTreeMap<ImageCategory, usize>) -> f32 {
    let text = *counts.get(&ImageCategory::Text).unwrap_or(&0);
    if text == 0 {
        return 1.0;
    }
    let others: usize = ImageCategory::ALL
        .iter()
        .filter(|&&c| c != ImageCategory::Text)
        .map(|c| *counts.get(c).unwrap_or(&0))
        .sum();
    let mean_others = others as f64 / 3.0;
    (mean_others / text as f64).min(1.0) as f32
}

/// Apply the score and length thresholds to scored captions. Statuses move
/// scored -> {kept | dropped_score | dropped_length}; kept and dropped are
/// terminal and pass through unchanged, so the operation is idempotent and
/// never moves a status backwards.
pub fn filter_captions(
    captions: Vec<CaptionRecord>,
    cfg: &CurationConfig,
) -> Result<Vec<CaptionRecord>, CurationError> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(captions.len());
    for mut caption in captions {
        match caption.status {
            CaptionStatus::Raw => {
                return Err(CurationError::UnscoredCaption {
                    caption_id: caption.caption_id,
                });
            }
            CaptionStatus::Scored => {
                let score = caption
                    .score
                    .ok_or_else(|| CurationError::UnscoredCaption {
                        caption_id: caption.caption_id.clone(),
                    })?
                    .value();
                caption.status = if score < cfg.caption_score_min {
                    CaptionStatus::DroppedScore
                } else if caption.word_count > cfg.caption_max_words {
                    CaptionStatus::DroppedLength
                } else {
                    CaptionStatus::Kept
                };
            }
            CaptionStatus::Kept | CaptionStatus::DroppedScore | CaptionStatus::DroppedLength => {}
        }
        out.push(caption);
    }
    Ok(out)
}

/// Score each question against its image and drop generic (low-scoring)
/// questions. Statuses move raw -> {scored | dropped_question}; the answer
/// check happens later, in pair building.
pub fn filter_questions(
    qas: Vec<QARecord>,
    images: &EmbeddingStore,
    texts: &EmbeddingStore,
    cfg: &CurationConfig,
) -> Result<Vec<QARecord>, CurationError> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(qas.len());
    for mut qa in qas {
        match qa.status {
            QaStatus::Raw | QaStatus::Scored => {
                let image_vec =
                    images
                        .vector(&qa.image_id)
                        .ok_or_else(|| CurationError::MissingEmbedding {
                            record_id: qa.image_id.clone(),
                        })?;
                let question_vec =
                    texts
                        .vector(&qa.qa_id)
                        .ok_or_else(|| CurationError::MissingEmbedding {
                            record_id: qa.qa_id.clone(),
                        })?;
                let score = clip_score(&image_vec, &question_vec)?;
                qa.question_score = Some(score);
                qa.status = if score.value() < cfg.question_score_min {
                    QaStatus::DroppedQuestion
                } else {
                    QaStatus::Scored
                };
            }
            QaStatus::DroppedQuestion | QaStatus::DroppedAnswer | QaStatus::Kept => {}
        }
        out.push(qa);
    }
    Ok(out)
}
