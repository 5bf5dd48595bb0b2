//! Vector normalization, cosine scoring, batch score matrices, and category
//! prototypes: the numeric substrate of every pipeline stage.
//!
//! Values are stored as f32 (matching the embedding file format) while dot
//! products and means accumulate in f64 with a fixed index order, so the
//! batch and scalar scoring paths agree bit for bit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Unit-norm tolerance enforced at scoring time. Vectors are re-normalized
/// at ingestion; scoring only refuses inputs that drifted past this bound.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-3;

/// Norms at or below this are treated as zero vectors.
pub const ZERO_NORM_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("embedding has no entries")]
    Empty,
    #[error("embedding entry {index} is not finite")]
    NonFinite { index: usize },
    #[error("cannot normalize a zero vector (norm {norm:.3e})")]
    ZeroVector { norm: f64 },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("vector is not unit-normalized (norm {norm})")]
    NotNormalized { norm: f64 },
}

/// A dense embedding vector. Construction rejects empty and non-finite
/// inputs; unit norm is a property of *normalized* vectors, not of the type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::Empty);
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite { index });
        }
        Ok(Self { values })
    }

    /// Axis-aligned unit vector, handy in tests and prototypes.
    pub fn unit_axis(dim: usize, axis: usize) -> Self {
        let mut values = vec![0.0; dim.max(1)];
        let ix = axis.min(values.len() - 1);
        values[ix] = 1.0;
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        dot(&self.values, &self.values).sqrt()
    }

    pub fn is_unit(&self, tolerance: f64) -> bool {
        (self.norm() - 1.0).abs() <= tolerance
    }

    /// Unit-normalized copy; direction preserved.
    pub fn normalized(&self) -> Result<Self, EmbeddingError> {
        let norm = self.norm();
        if norm <= ZERO_NORM_THRESHOLD {
            return Err(EmbeddingError::ZeroVector { norm });
        }
        let inv = 1.0 / norm;
        Ok(Self {
            values: self
                .values
                .iter()
                .map(|&v| (f64::from(v) * inv) as f32)
                .collect(),
        })
    }
}

/// Cosine similarity reported on the x100 scale, so curation thresholds
/// like 28.0 / 25.0 / 2.0 apply unchanged. Nominal range [-100, 100].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClipScore(pub f32);

impl ClipScore {
    pub fn value(self) -> f32 {
        self.0
    }

    fn from_cosine(cosine: f64) -> Self {
        ClipScore((100.0 * cosine) as f32)
    }
}

impl std::fmt::Display for ClipScore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The four generic image categories used by global filtering. The variant
/// order is the tie-break order for [`assign_category`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageCategory {
    Text,
    People,
    Objects,
    Scenes,
}

impl ImageCategory {
    pub const ALL: [ImageCategory; 4] = [
        ImageCategory::Text,
        ImageCategory::People,
        ImageCategory::Objects,
        ImageCategory::Scenes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ImageCategory::Text => "text",
            ImageCategory::People => "people",
            ImageCategory::Objects => "objects",
            ImageCategory::Scenes => "scenes",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.name() == name)
    }
}

impl std::fmt::Display for ImageCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One unit-normalized prototype per category, in [`ImageCategory::ALL`] order.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    prototypes: Vec<EmbeddingVector>,
}

impl PrototypeSet {
    /// Build from one prototype per category, given in `ImageCategory::ALL`
    /// order. Prototypes must be unit vectors of a shared dimension.
    pub fn new(prototypes: [EmbeddingVector; 4]) -> Result<Self, EmbeddingError> {
        let dim = prototypes[0].dim();
        for p in &prototypes {
            if p.dim() != dim {
                return Err(EmbeddingError::DimensionMismatch {
                    left: dim,
                    right: p.dim(),
                });
            }
            if !p.is_unit(UNIT_NORM_TOLERANCE) {
                return Err(EmbeddingError::NotNormalized { norm: p.norm() });
            }
        }
        Ok(Self {
            prototypes: prototypes.into(),
        })
    }

    /// Build each prototype from that category's description embeddings,
    /// given in `ImageCategory::ALL` order.
    pub fn from_description_sets(
        descriptions: &[Vec<EmbeddingVector>; 4],
    ) -> Result<Self, EmbeddingError> {
        let mut prototypes = Vec::with_capacity(4);
        for set in descriptions {
            prototypes.push(build_prototype(set)?);
        }
        Ok(Self { prototypes })
    }

    pub fn get(&self, category: ImageCategory) -> &EmbeddingVector {
        let ix = ImageCategory::ALL
            .iter()
            .position(|&c| c == category)
            .unwrap();
        &self.prototypes[ix]
    }

    pub fn dim(&self) -> usize {
        self.prototypes[0].dim()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ImageCategory, &EmbeddingVector)> {
        ImageCategory::ALL
            .iter()
            .copied()
            .zip(self.prototypes.iter())
    }
}

/// Dot product with f64 accumulation in index order. Every scoring path in
/// the crate goes through this one kernel so batch and scalar results match
/// exactly.
fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for i in 0..a.len() {
        acc += f64::from(a[i]) * f64::from(b[i]);
    }
    acc
}

fn check_pair(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<(), EmbeddingError> {
    if a.dim() != b.dim() {
        return Err(EmbeddingError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    for v in [a, b] {
        if !v.is_unit(UNIT_NORM_TOLERANCE) {
            return Err(EmbeddingError::NotNormalized { norm: v.norm() });
        }
    }
    Ok(())
}

/// Unit-normalize `v`, preserving direction.
pub fn normalize(v: &EmbeddingVector) -> Result<EmbeddingVector, EmbeddingError> {
    v.normalized()
}

/// 100 x cosine of two unit vectors. Symmetric in its arguments.
pub fn clip_score(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<ClipScore, EmbeddingError> {
    check_pair(a, b)?;
    Ok(ClipScore::from_cosine(dot(a.values(), b.values())))
}

/// Batch scores: entry (i, j) equals `clip_score(images[i], texts[j])`
/// bit-for-bit with the scalar path. Rows may be computed on worker
/// threads; per-row summation order is fixed by the shared dot kernel.
pub fn score_matrix(
    images: &[EmbeddingVector],
    texts: &[EmbeddingVector],
) -> Result<Vec<Vec<ClipScore>>, EmbeddingError> {
    let dim = match images.first().or_else(|| texts.first()) {
        Some(v) => v.dim(),
        None => return Ok(Vec::new()),
    };
    for v in images.iter().chain(texts.iter()) {
        if v.dim() != dim {
            return Err(EmbeddingError::DimensionMismatch {
                left: dim,
                right: v.dim(),
            });
        }
        if !v.is_unit(UNIT_NORM_TOLERANCE) {
            return Err(EmbeddingError::NotNormalized { norm: v.norm() });
        }
    }
    Ok(images
        .par_iter()
        .map(|img| {
            texts
                .iter()
                .map(|t| ClipScore::from_cosine(dot(img.values(), t.values())))
                .collect()
        })
        .collect())
}

/// Normalized mean of normalized description embeddings. Order-independent
/// up to floating-point commutativity of the fixed-order sum.
pub fn build_prototype(
    descriptions: &[EmbeddingVector],
) -> Result<EmbeddingVector, EmbeddingError> {
    let first = descriptions.first().ok_or(EmbeddingError::Empty)?;
    let dim = first.dim();
    let mut acc = vec![0.0f64; dim];
    for d in descriptions {
        if d.dim() != dim {
            return Err(EmbeddingError::DimensionMismatch {
                left: dim,
                right: d.dim(),
            });
        }
        let n = d.normalized()?;
        for (a, &v) in acc.iter_mut().zip(n.values()) {
            *a += f64::from(v);
        }
    }
    let count = descriptions.len() as f64;
    let mean: Vec<f32> = acc.iter().map(|&a| (a / count) as f32).collect();
    EmbeddingVector::new(mean)?.normalized()
}

/// Argmax category for an image embedding; ties break in
/// `ImageCategory::ALL` order (text, people, objects, scenes).
pub fn assign_category(
    image: &EmbeddingVector,
    protos: &PrototypeSet,
) -> Result<ImageCategory, EmbeddingError> {
    let mut best: Option<(ImageCategory, f32)> = None;
    for (category, proto) in protos.iter() {
        let score = clip_score(image, proto)?.value();
        match best {
            Some((_, s)) if score <= s => {}
            _ => best = Some((category, score)),
        }
    }
    Ok(best.expect("prototype set is never empty").0)
}
