//! Caption-based zero-shot classification: assign an image to the class
//! whose text prototype best matches the embedding of a generated caption,
//! plus the classic image-text baseline.
//!
//! The module is scorer-agnostic: whichever embedding store or encoder the
//! run config supplies provides the vectors.

use crate::embedding::{build_prototype, clip_score, EmbeddingError, EmbeddingVector};
use crate::encoder::{EncoderError, TextEmbedder};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ZeroshotError {
    #[error("class bank is empty")]
    EmptyBank,
    #[error("duplicate class name {name}")]
    DuplicateClass { name: String },
    #[error("input is empty")]
    EmptyInput,
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
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Prompt strings for one class, used to build its text prototype.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTemplate {
    pub class: String,
    pub prompts: Vec<String>,
}

impl ClassTemplate {
    /// The standard prompt family used when a dataset ships no templates.
    pub fn default_for(class: &str) -> Self {
        Self {
            class: class.to_string(),
            prompts: vec![
                format!("a photo of a {class}."),
                format!("a photo of the {class}."),
                format!("a picture of a {class}."),
            ],
        }
    }
}

/// Ordered (class name, prototype) bank; names unique, prototypes unit.
#[derive(Debug, Clone)]
pub struct ClassPrototypeBank {
    classes: Vec<(String, EmbeddingVector)>,
}

impl ClassPrototypeBank {
    pub fn new(classes: Vec<(String, EmbeddingVector)>) -> Result<Self, ZeroshotError> {
        let mut seen = HashSet::new();
        for (name, proto) in &classes {
            if !seen.insert(name.clone()) {
                return Err(ZeroshotError::DuplicateClass { name: name.clone() });
            }
            if !proto.is_unit(crate::embedding::UNIT_NORM_TOLERANCE) {
                return Err(EmbeddingError::NotNormalized { norm: proto.norm() }.into());
            }
        }
        Ok(Self { classes })
    }

    /// Build prototypes from class templates: each class's prompts are
    /// embedded and aggregated with the standard normalized-mean
    /// construction.
    pub fn from_templates(
        templates: &[ClassTemplate],
        embedder: &dyn TextEmbedder,
    ) -> Result<Self, ZeroshotError> {
        let mut classes = Vec::with_capacity(templates.len());
        for t in templates {
            let embedded = embedder.embed_texts(&t.prompts)?;
            classes.push((t.class.clone(), build_prototype(&embedded)?));
        }
        Self::new(classes)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class_names(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().map(|(name, _)| name.as_str())
    }

    fn argmax(&self, embedding: &EmbeddingVector) -> Result<&str, ZeroshotError> {
        if self.classes.is_empty() {
            return Err(ZeroshotError::EmptyBank);
        }
        let mut best: Option<(&str, f32)> = None;
        for (name, proto) in &self.classes {
            let score = clip_score(embedding, proto)?.value();
            match best {
                Some((_, s)) if score <= s => {}
                _ => best = Some((name.as_str(), score)),
            }
        }
        Ok(best.expect("bank checked non-empty").0)
    }
}

/// Argmax over text-text (caption-class) scores; ties break by class order.
pub fn classify_by_caption<'b>(
    caption_embedding: &EmbeddingVector,
    bank: &'b ClassPrototypeBank,
) -> Result<&'b str, ZeroshotError> {
    bank.argmax(caption_embedding)
}

/// Argmax over image-text scores; same scoring, image embedding input.
pub fn classify_by_image<'b>(
    image_embedding: &EmbeddingVector,
    bank: &'b ClassPrototypeBank,
) -> Result<&'b str, ZeroshotError> {
    bank.argmax(image_embedding)
}

/// Top-1 accuracy over (predicted, gold) pairs, as a percentage.
pub fn top1_accuracy<P: AsRef<str>, G: AsRef<str>>(
    predictions: &[(P, G)],
) -> Result<f64, ZeroshotError> {
    if predictions.is_empty() {
        return Err(ZeroshotError::EmptyInput);
    }
    let correct = predictions
        .iter()
        .filter(|(p, g)| p.as_ref() == g.as_ref())
        .count();
    Ok(100.0 * correct as f64 / predictions.len() as f64)
}

/// One line of the prediction dump emitted for audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub predicted: String,
    pub gold: String,
}

/// One line of a gold-label file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldLabel {
    pub image_id: String,
    pub gold: String,
}

pub fn load_class_templates(path: impl AsRef<Path>) -> Result<Vec<ClassTemplate>, ZeroshotError> {
    read_jsonl(path.as_ref())
}

pub fn load_gold_labels(path: impl AsRef<Path>) -> Result<Vec<GoldLabel>, ZeroshotError> {
    read_jsonl(path.as_ref())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, ZeroshotError> {
    let text = std::fs::read_to_string(path).map_err(|source| ZeroshotError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (ix, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            return Err(ZeroshotError::Schema {
                path: path.to_path_buf(),
                line: ix + 1,
                message: "blank line".into(),
            });
        }
        out.push(
            serde_json::from_str(line).map_err(|e| ZeroshotError::Schema {
                path: path.to_path_buf(),
                line: ix + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}
