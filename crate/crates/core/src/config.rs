//! Run configuration: one TOML file describing inputs, outputs, and every
//! stage's knobs. Precedence is defaults < config file < CLI flags; the
//! effective config is hashed into each run summary.

use crate::curation::CurationConfig;
use crate::encoder::EncoderEndpoint;
use crate::hash::hash_bytes;
use crate::loss::LossConfig;
use crate::pairs::PairConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("config error: {message}")]
    Invalid { message: String },
    #[error("missing required path: {field}")]
    MissingPath { field: &'static str },
    #[error("{field} does not exist: {path}")]
    PathNotFound { field: &'static str, path: PathBuf },
}

/// Zero-shot evaluation scoring mode: classify the embedding of the
/// generated caption (text-text) or the image embedding (image-text).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ZeroshotMode {
    #[default]
    Caption,
    Image,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ZeroshotConfig {
    pub mode: ZeroshotMode,
}

/// Every file the run may touch. Curation inputs are required by the
/// pipeline commands; evaluator inputs only by their command.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunPaths {
    pub manifest: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub captions: Option<PathBuf>,
    pub qas: Option<PathBuf>,
    pub image_store: Option<PathBuf>,
    pub text_store: Option<PathBuf>,
    /// JSONL of {category, descriptions: [...]} used to build prototypes.
    pub category_descriptions: Option<PathBuf>,
    /// Store keyed by exact description text.
    pub category_store: Option<PathBuf>,
    /// Question parse rules; built-in defaults apply when absent.
    pub question_rules: Option<PathBuf>,
    pub loss_samples: Option<PathBuf>,
    pub amber_annotations: Option<PathBuf>,
    pub amber_generative: Option<PathBuf>,
    pub amber_discriminative: Option<PathBuf>,
    pub class_templates: Option<PathBuf>,
    /// Store keyed by exact class-prompt text.
    pub class_prompt_store: Option<PathBuf>,
    /// Store keyed by image_id holding caption or image embeddings,
    /// depending on the zero-shot mode.
    pub zeroshot_eval_store: Option<PathBuf>,
    pub zeroshot_labels: Option<PathBuf>,
    pub probe_records: Option<PathBuf>,
    pub probe_store: Option<PathBuf>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for every deterministic draw in the run.
    pub seed: u64,
    /// Work is grouped into shards by image id hash; embedding calls batch
    /// per shard.
    pub shard_count: usize,
    /// Worker threads. Not part of the run's semantic identity: outputs
    /// are byte-identical for any worker count, so this field is excluded
    /// from the config hash.
    pub worker_count: usize,
    pub paths: RunPaths,
    pub curation: CurationConfig,
    pub pairs: PairConfig,
    pub loss: LossConfig,
    pub zeroshot: ZeroshotConfig,
    /// Synthetic-caption embedding source; pair building falls back to the
    /// text store when absent.
    pub encoder: Option<EncoderEndpoint>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            shard_count: 16,
            worker_count: 1,
            paths: RunPaths {
                out_dir: PathBuf::from("out"),
                ..RunPaths::default()
            },
            curation: CurationConfig::default(),
            pairs: PairConfig::default(),
            loss: LossConfig::default(),
            zeroshot: ZeroshotConfig::default(),
            encoder: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        // Relative paths resolve against the config file's directory; the
        // encoder address is a path only for the file-stub kind.
        if let Some(base) = path.parent() {
            config.paths.resolve_relative(base);
            if let Some(endpoint) = &mut config.encoder {
                if endpoint.kind == crate::encoder::EndpointKind::FileStub {
                    let address = PathBuf::from(&endpoint.address);
                    if address.is_relative() {
                        endpoint.address = base.join(address).to_string_lossy().into_owned();
                    }
                }
            }
        }
        Ok(config)
    }

    /// Structural checks that need no files: counts positive, sub-configs
    /// coherent. The seed is propagated into the curation draw here.
    pub fn finalize(mut self) -> Result<Self, ConfigError> {
        if self.shard_count == 0 {
            return Err(ConfigError::Invalid {
                message: "shard_count must be positive".into(),
            });
        }
        if self.worker_count == 0 {
            return Err(ConfigError::Invalid {
                message: "worker_count must be positive".into(),
            });
        }
        self.curation.text_downsample_seed = self.seed;
        self.curation.validate().map_err(|e| ConfigError::Invalid {
            message: e.to_string(),
        })?;
        self.pairs.validate().map_err(|e| ConfigError::Invalid {
            message: e.to_string(),
        })?;
        self.loss.validate().map_err(|e| ConfigError::Invalid {
            message: e.to_string(),
        })?;
        Ok(self)
    }

    /// Digest of the semantic config: everything except `worker_count`,
    /// which cannot affect outputs.
    pub fn config_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.worker_count = 1;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        format!("{:016x}", hash_bytes(json.as_bytes()))
    }

    pub fn require(path: &Option<PathBuf>, field: &'static str) -> Result<PathBuf, ConfigError> {
        let path = path.clone().ok_or(ConfigError::MissingPath { field })?;
        if !path.exists() {
            return Err(ConfigError::PathNotFound { field, path });
        }
        Ok(path)
    }
}

impl RunPaths {
    fn resolve_relative(&mut self, base: &Path) {
        let fields = [
            &mut self.manifest,
            &mut self.images,
            &mut self.captions,
            &mut self.qas,
            &mut self.image_store,
            &mut self.text_store,
            &mut self.category_descriptions,
            &mut self.category_store,
            &mut self.question_rules,
            &mut self.loss_samples,
            &mut self.amber_annotations,
            &mut self.amber_generative,
            &mut self.amber_discriminative,
            &mut self.class_templates,
            &mut self.class_prompt_store,
            &mut self.zeroshot_eval_store,
            &mut self.zeroshot_labels,
            &mut self.probe_records,
            &mut self.probe_store,
        ];
        for p in fields.into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&p);
            }
        }
        if self.out_dir.as_os_str().is_empty() {
            self.out_dir = PathBuf::from("out");
        }
        if self.out_dir.is_relative() {
            self.out_dir = base.join(&self.out_dir);
        }
    }
}

/// JSONL line of a category-description file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryDescriptions {
    pub category: crate::embedding::ImageCategory,
    pub descriptions: Vec<String>,
}
