//! Deterministic pipeline runner: rank -> global filter -> pair building,
//! sharded by image-id hash with worker parallelism inside each shard and
//! order-fixed merges. Identical config and seed produce byte-identical
//! outputs for any worker count.

use crate::config::{CategoryDescriptions, ConfigError, RunConfig};
use crate::curation::{
    categorize_and_downsample, filter_captions, filter_questions, rank_captions, CurationError,
    DownsampleOutcome,
};
use crate::embedding::{EmbeddingError, ImageCategory, PrototypeSet};
use crate::encoder::{EncoderClient, EncoderError, TextEmbedder};
use crate::hash::hash_bytes;
use crate::loss::LossError;
use crate::pairs::{
    build_caption_pairs, finish_qa_pair, synthesize_caption, PairError, QuestionParseRules,
};
use crate::records::{
    captions_by_image, emit_pairs, load_caption_records, load_image_records, load_manifest,
    load_qa_records, write_jsonl, CaptionRecord, CaptionStatus, ImageRecord, IngestError,
    PreferencePair, QARecord, QaStatus,
};
use crate::store::{EmbeddingStore, StoreError};
use crate::summary::{PairCounts, RunSummary, StageSummary, SummaryError};
use rayon::prelude::*;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const FILE_CAPTIONS_RANKED: &str = "captions_ranked.jsonl";
pub const FILE_IMAGES_KEPT: &str = "images_kept.jsonl";
pub const FILE_CAPTIONS_FILTERED: &str = "captions_filtered.jsonl";
pub const FILE_QAS_FILTERED: &str = "qas_filtered.jsonl";
pub const FILE_QAS_FINAL: &str = "qas_final.jsonl";
pub const FILE_PAIRS: &str = "pairs.jsonl";

#[derive(Debug, Error)]
#[error("stage {stage}: {source}")]
pub struct PipelineError {
    pub stage: &'static str,
    #[source]
    pub source: PipelineErrorKind,
}

impl PipelineError {
    pub fn new(stage: &'static str, source: impl Into<PipelineErrorKind>) -> Self {
        Self {
            stage,
            source: source.into(),
        }
    }

    /// The record id the failure points at, when one exists.
    pub fn record_id(&self) -> Option<String> {
        self.source.record_id()
    }

    /// Process exit code: 1 for configuration/input validation failures,
    /// 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match &self.source {
            PipelineErrorKind::Config(_)
            | PipelineErrorKind::Ingest(_)
            | PipelineErrorKind::Store(_)
            | PipelineErrorKind::Validation { .. } => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineErrorKind {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Curation(#[from] CurationError),
    #[error(transparent)]
    Pair(#[from] PairError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Summary(#[from] SummaryError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("record {record:?}: {message}")]
    Validation {
        record: Option<String>,
        message: String,
    },
    #[error("{0}")]
    Other(String),
}

impl PipelineErrorKind {
    fn record_id(&self) -> Option<String> {
        match self {
            PipelineErrorKind::Validation { record, .. } => record.clone(),
            PipelineErrorKind::Curation(e) => match e {
                CurationError::MissingEmbedding { record_id } => Some(record_id.clone()),
                CurationError::OrphanEmbeddingRef { image_id, .. } => Some(image_id.clone()),
                CurationError::MismatchedImage { caption_id, .. } => Some(caption_id.clone()),
                CurationError::UnscoredCaption { caption_id } => Some(caption_id.clone()),
                CurationError::InvalidStatus { record_id, .. } => Some(record_id.clone()),
                _ => None,
            },
            PipelineErrorKind::Ingest(e) => match e {
                IngestError::UnknownImageId { record_id, .. } => Some(record_id.clone()),
                IngestError::DuplicateRecordId { id, .. } => Some(id.clone()),
                IngestError::TooManyQaRecords { image_id, .. } => Some(image_id.clone()),
                IngestError::InvariantViolation { pair_id, .. } => Some(pair_id.clone()),
                _ => None,
            },
            PipelineErrorKind::Pair(PairError::InvalidStatus { qa_id, .. }) => Some(qa_id.clone()),
            PipelineErrorKind::Encoder(EncoderError::UnknownText(t)) => Some(t.clone()),
            _ => None,
        }
    }
}

fn at<E: Into<PipelineErrorKind>>(stage: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::new(stage, e)
}

/// Everything a curation run needs, loaded once and immutable afterwards.
pub struct PipelineContext {
    pub config: RunConfig,
    pub images: Vec<ImageRecord>,
    pub captions: Vec<CaptionRecord>,
    pub qas: Vec<QARecord>,
    pub image_store: EmbeddingStore,
    pub text_store: EmbeddingStore,
    pub prototypes: Option<PrototypeSet>,
    pub rules: QuestionParseRules,
    encoder_client: Option<EncoderClient>,
    pool: rayon::ThreadPool,
}

pub struct PipelineOutputs {
    pub ranked_captions: Vec<CaptionRecord>,
    pub images_kept: Vec<ImageRecord>,
    pub captions_final: Vec<CaptionRecord>,
    pub qas_filtered: Vec<QARecord>,
    pub qas_final: Vec<QARecord>,
    pub pairs: Vec<PreferencePair>,
    pub summary: RunSummary,
}

impl PipelineContext {
    pub fn load(config: RunConfig) -> Result<Self, PipelineError> {
        let stage = "load";
        let err = at::<PipelineErrorKind>(stage);
        let config = config.finalize().map_err(at(stage))?;

        let images_path =
            RunConfig::require(&config.paths.images, "paths.images").map_err(at(stage))?;
        let captions_path =
            RunConfig::require(&config.paths.captions, "paths.captions").map_err(at(stage))?;
        let image_store_path = RunConfig::require(&config.paths.image_store, "paths.image_store")
            .map_err(at(stage))?;
        let text_store_path =
            RunConfig::require(&config.paths.text_store, "paths.text_store").map_err(at(stage))?;

        let images = load_image_records(&images_path).map_err(at(stage))?;
        let image_ids: HashSet<String> = images.iter().map(|i| i.image_id.clone()).collect();
        let captions = load_caption_records(&captions_path, Some(&image_ids)).map_err(at(stage))?;
        let qas = match &config.paths.qas {
            Some(_) => {
                let path = RunConfig::require(&config.paths.qas, "paths.qas").map_err(at(stage))?;
                load_qa_records(path, Some(&image_ids)).map_err(at(stage))?
            }
            None => Vec::new(),
        };

        let image_store = EmbeddingStore::load(&image_store_path).map_err(at(stage))?;
        let text_store = EmbeddingStore::load(&text_store_path).map_err(at(stage))?;
        if image_store.dim() != text_store.dim() {
            return Err(err(PipelineErrorKind::Other(format!(
                "image store dim {} != text store dim {}",
                image_store.dim(),
                text_store.dim()
            ))));
        }

        let prototypes = match (
            &config.paths.category_descriptions,
            &config.paths.category_store,
        ) {
            (Some(descriptions_path), Some(store_path)) => Some(load_prototypes(
                descriptions_path,
                store_path,
                image_store.dim(),
            )?),
            (None, None) => None,
            _ => {
                return Err(err(PipelineErrorKind::Other(
                    "category_descriptions and category_store must be configured together".into(),
                )))
            }
        };

        let rules = match &config.paths.question_rules {
            Some(path) => QuestionParseRules::load(path).map_err(at(stage))?,
            None => QuestionParseRules::default_rules(),
        };

        let encoder_client = match &config.encoder {
            Some(endpoint) => Some(EncoderClient::connect(endpoint.clone()).map_err(at(stage))?),
            None => None,
        };

        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.worker_count)
            .build()
            .map_err(|e| err(PipelineErrorKind::Other(e.to_string())))?;

        Ok(Self {
            config,
            images,
            captions,
            qas,
            image_store,
            text_store,
            prototypes,
            rules,
            encoder_client,
            pool,
        })
    }

    /// The embedding source for synthetic captions: the configured encoder
    /// endpoint, or the text store keyed by exact text when none is set.
    pub fn synthetic_embedder(&self) -> &dyn TextEmbedder {
        match &self.encoder_client {
            Some(client) => client,
            None => &self.text_store,
        }
    }

    fn shard_of(&self, image_id: &str) -> usize {
        (hash_bytes(image_id.as_bytes()) % self.config.shard_count as u64) as usize
    }

    /// Group images into shards; within a shard images are sorted by id.
    fn shards<'a>(&self, images: &[&'a ImageRecord]) -> Vec<Vec<&'a ImageRecord>> {
        let mut sorted: Vec<&ImageRecord> = images.to_vec();
        sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let mut shards = vec![Vec::new(); self.config.shard_count];
        for image in sorted {
            shards[self.shard_of(&image.image_id)].push(image);
        }
        shards
    }

    /// Cross-checks beyond per-file schema validation: embedding refs
    /// resolve and agree with store ids, caption/question embeddings exist,
    /// datasets appear in the manifest when one is configured.
    pub fn validate_cross_references(&self) -> Result<Vec<StageSummary>, PipelineError> {
        let stage = "validate";
        let fail = |record: Option<String>, message: String| {
            PipelineError::new(stage, PipelineErrorKind::Validation { record, message })
        };
        for image in &self.images {
            match self.image_store.id_at(image.embedding_ref) {
                None => {
                    return Err(fail(
                        Some(image.image_id.clone()),
                        format!(
                            "embedding_ref {} outside image store (len {})",
                            image.embedding_ref,
                            self.image_store.len()
                        ),
                    ))
                }
                Some(id) if id != image.image_id => {
                    return Err(fail(
                        Some(image.image_id.clone()),
                        format!(
                            "embedding_ref {} points at store id {id}",
                            image.embedding_ref
                        ),
                    ))
                }
                Some(_) => {}
            }
        }
        for caption in &self.captions {
            if !self.text_store.contains(&caption.caption_id) {
                return Err(fail(
                    Some(caption.caption_id.clone()),
                    "caption has no embedding in the text store".into(),
                ));
            }
        }
        for qa in &self.qas {
            if !self.text_store.contains(&qa.qa_id) {
                return Err(fail(
                    Some(qa.qa_id.clone()),
                    "question has no embedding in the text store".into(),
                ));
            }
        }
        if let Some(manifest_path) = &self.config.paths.manifest {
            let manifest = load_manifest(manifest_path).map_err(at(stage))?;
            for image in &self.images {
                if !manifest.contains(&image.dataset) {
                    return Err(fail(
                        Some(image.image_id.clone()),
                        format!("dataset {:?} is not in the manifest", image.dataset),
                    ));
                }
            }
        }
        Ok(vec![
            StageSummary::new("validate_images", self.images.len(), self.images.len()),
            StageSummary::new(
                "validate_captions",
                self.captions.len(),
                self.captions.len(),
            ),
            StageSummary::new("validate_qas", self.qas.len(), self.qas.len()),
        ])
    }

    /// Score and rank every caption, sharded and parallel per image.
    pub fn rank_stage(
        &self,
        captions: Vec<CaptionRecord>,
    ) -> Result<(Vec<CaptionRecord>, StageSummary), PipelineError> {
        let stage = "caption_rank";
        let records_in = captions.len();
        let mut groups: HashMap<String, Vec<CaptionRecord>> = HashMap::new();
        for caption in captions {
            groups
                .entry(caption.image_id.clone())
                .or_default()
                .push(caption);
        }
        let image_refs: Vec<&ImageRecord> = self.images.iter().collect();
        let mut out = Vec::with_capacity(records_in);
        for shard in self.shards(&image_refs) {
            let work: Vec<(&ImageRecord, Vec<CaptionRecord>)> = shard
                .iter()
                .filter_map(|image| {
                    groups
                        .remove(image.image_id.as_str())
                        .map(|captions| (*image, captions))
                })
                .collect();
            let ranked: Result<Vec<Vec<CaptionRecord>>, PipelineError> = self.pool.install(|| {
                work.into_par_iter()
                    .map(|(image, captions)| {
                        rank_captions(image, captions, &self.image_store, &self.text_store)
                            .map_err(at(stage))
                    })
                    .collect()
            });
            for group in ranked? {
                out.extend(group);
            }
        }
        debug_assert!(
            groups.is_empty(),
            "captions cross-validated against images at load"
        );
        let summary = StageSummary::new(stage, records_in, out.len());
        Ok((out, summary))
    }

    /// Assign categories and down-sample text images.
    pub fn downsample_stage(
        &self,
        images: Vec<ImageRecord>,
    ) -> Result<(DownsampleOutcome, StageSummary), PipelineError> {
        let stage = "image_downsample";
        let prototypes = self.prototypes.as_ref().ok_or_else(|| {
            PipelineError::new(
                stage,
                PipelineErrorKind::Config(ConfigError::MissingPath {
                    field: "paths.category_descriptions",
                }),
            )
        })?;
        let records_in = images.len();
        let outcome =
            categorize_and_downsample(images, prototypes, &self.config.curation, &self.image_store)
                .map_err(at(stage))?;
        let summary = StageSummary::new(stage, records_in, outcome.kept.len())
            .drop_reason("text_downsampled", outcome.dropped_text);
        Ok((outcome, summary))
    }

    /// Apply score/length thresholds to captions of kept images; captions
    /// of down-sampled images pass through still scored and are accounted
    /// under image_downsampled.
    pub fn caption_filter_stage(
        &self,
        captions: Vec<CaptionRecord>,
        kept_images: &HashSet<String>,
    ) -> Result<(Vec<CaptionRecord>, StageSummary), PipelineError> {
        let stage = "caption_filter";
        let records_in = captions.len();
        let (mine, orphaned): (Vec<CaptionRecord>, Vec<CaptionRecord>) = captions
            .into_iter()
            .partition(|c| kept_images.contains(&c.image_id));
        let filtered = filter_captions(mine, &self.config.curation).map_err(at(stage))?;
        let mut kept = 0;
        let mut dropped_score = 0;
        let mut dropped_length = 0;
        for caption in &filtered {
            match caption.status {
                CaptionStatus::Kept => kept += 1,
                CaptionStatus::DroppedScore => dropped_score += 1,
                CaptionStatus::DroppedLength => dropped_length += 1,
                _ => {}
            }
        }
        let summary = StageSummary::new(stage, records_in, kept)
            .drop_reason("dropped_score", dropped_score)
            .drop_reason("dropped_length", dropped_length)
            .drop_reason("image_downsampled", orphaned.len());
        let mut out = filtered;
        out.extend(orphaned);
        Ok((out, summary))
    }

    /// Score questions of kept images and drop generic ones; questions of
    /// down-sampled images pass through raw.
    pub fn question_filter_stage(
        &self,
        qas: Vec<QARecord>,
        kept_images: &HashSet<String>,
    ) -> Result<(Vec<QARecord>, StageSummary), PipelineError> {
        let stage = "question_filter";
        let records_in = qas.len();
        let (mine, orphaned): (Vec<QARecord>, Vec<QARecord>) = qas
            .into_iter()
            .partition(|q| kept_images.contains(&q.image_id));
        let evaluated = filter_questions(
            mine,
            &self.image_store,
            &self.text_store,
            &self.config.curation,
        )
        .map_err(at(stage))?;
        let mut scored = 0;
        let mut dropped_question = 0;
        for qa in &evaluated {
            match qa.status {
                QaStatus::Scored => scored += 1,
                QaStatus::DroppedQuestion => dropped_question += 1,
                _ => {}
            }
        }
        let summary = StageSummary::new(stage, records_in, scored)
            .drop_reason("dropped_question", dropped_question)
            .drop_reason("image_downsampled", orphaned.len());
        let mut out = evaluated;
        out.extend(orphaned);
        Ok((out, summary))
    }

    /// Build caption and QA preference pairs over kept images. Synthetic
    /// captions are embedded in one batched call per shard.
    #[allow(clippy::type_complexity)]
    pub fn pair_stage(
        &self,
        kept_images: &[ImageRecord],
        captions: &[CaptionRecord],
        qas: Vec<QARecord>,
    ) -> Result<
        (
            Vec<PreferencePair>,
            Vec<QARecord>,
            StageSummary,
            StageSummary,
        ),
        PipelineError,
    > {
        let stage = "caption_pairs";
        let images_by_id: HashMap<&str, &ImageRecord> = kept_images
            .iter()
            .map(|i| (i.image_id.as_str(), i))
            .collect();
        let caption_groups = captions_by_image(captions);

        // caption pairs: one shot per image, parallel inside shards
        let image_refs: Vec<&ImageRecord> = kept_images.iter().collect();
        let mut pairs: Vec<PreferencePair> = Vec::new();
        for shard in self.shards(&image_refs) {
            let shard_pairs: Vec<Option<PreferencePair>> = self.pool.install(|| {
                shard
                    .par_iter()
                    .map(|image| {
                        let group = caption_groups.get(image.image_id.as_str());
                        let owned: Vec<CaptionRecord> = group
                            .map(|refs| refs.iter().map(|&c| c.clone()).collect())
                            .unwrap_or_default();
                        build_caption_pairs(&image.image_id, &owned, &self.config.pairs)
                    })
                    .collect()
            });
            pairs.extend(shard_pairs.into_iter().flatten());
        }
        let caption_pair_count = pairs.len();
        let caption_summary = StageSummary::new(stage, kept_images.len(), caption_pair_count)
            .drop_reason("no_qualifying_pair", kept_images.len() - caption_pair_count);

        // qa pairs: parse, batch-embed per shard, gate by synthetic score
        let qa_stage = "qa_pairs";
        let mut scored_by_shard: Vec<Vec<QARecord>> = vec![Vec::new(); self.config.shard_count];
        let mut passthrough: Vec<QARecord> = Vec::new();
        let mut scored_in = 0usize;
        for qa in qas {
            if qa.status == QaStatus::Scored {
                scored_in += 1;
                if !images_by_id.contains_key(qa.image_id.as_str()) {
                    return Err(PipelineError::new(
                        qa_stage,
                        PipelineErrorKind::Validation {
                            record: Some(qa.qa_id.clone()),
                            message: "scored qa references an image outside the kept set".into(),
                        },
                    ));
                }
                scored_by_shard[self.shard_of(&qa.image_id)].push(qa);
            } else {
                passthrough.push(qa);
            }
        }

        let mut qa_out: Vec<QARecord> = passthrough;
        let mut parse_failed = 0usize;
        let mut low_score = 0usize;
        let mut qa_pair_count = 0usize;
        for mut shard in scored_by_shard {
            shard.sort_by(|a, b| {
                a.image_id
                    .cmp(&b.image_id)
                    .then_with(|| a.qa_id.cmp(&b.qa_id))
            });
            let mut pending: Vec<QARecord> = Vec::new();
            let mut synthetic_texts: Vec<String> = Vec::new();
            for mut qa in shard {
                match synthesize_caption(&qa, &self.rules) {
                    Some(text) => {
                        qa.synthetic_caption = Some(text.clone());
                        synthetic_texts.push(text);
                        pending.push(qa);
                    }
                    None => {
                        qa.status = QaStatus::DroppedAnswer;
                        parse_failed += 1;
                        qa_out.push(qa);
                    }
                }
            }
            if pending.is_empty() {
                continue;
            }
            let embedded = self
                .synthetic_embedder()
                .embed_texts(&synthetic_texts)
                .map_err(at(qa_stage))?;
            for (qa, synthetic_vec) in pending.into_iter().zip(embedded) {
                let image = images_by_id[qa.image_id.as_str()];
                let image_vec =
                    self.image_store
                        .vector_at(image.embedding_ref)
                        .ok_or_else(|| {
                            PipelineError::new(
                                qa_stage,
                                PipelineErrorKind::Curation(CurationError::OrphanEmbeddingRef {
                                    image_id: image.image_id.clone(),
                                    embedding_ref: image.embedding_ref,
                                    store_len: self.image_store.len(),
                                }),
                            )
                        })?;
                let score = crate::embedding::clip_score(&image_vec, &synthetic_vec)
                    .map_err(at(qa_stage))?;
                let (qa, pair) = finish_qa_pair(qa, score, &self.config.pairs);
                match pair {
                    Some(pair) => {
                        qa_pair_count += 1;
                        pairs.push(pair);
                    }
                    None => low_score += 1,
                }
                qa_out.push(qa);
            }
        }
        let qa_summary = StageSummary::new(qa_stage, scored_in, qa_pair_count)
            .drop_reason("parse_failed", parse_failed)
            .drop_reason("low_synthetic_score", low_score);
        Ok((pairs, qa_out, caption_summary, qa_summary))
    }

    /// The full chain: rank -> categorize/down-sample -> filter -> pairs.
    pub fn run_pipeline(&self, command: &str) -> Result<PipelineOutputs, PipelineError> {
        let (ranked, rank_summary) = self.rank_stage(self.captions.clone())?;
        let (outcome, downsample_summary) = self.downsample_stage(self.images.clone())?;
        let kept_ids: HashSet<String> = outcome.kept.iter().map(|i| i.image_id.clone()).collect();
        let (captions_final, caption_filter_summary) =
            self.caption_filter_stage(ranked.clone(), &kept_ids)?;
        let (qas_filtered, question_filter_summary) =
            self.question_filter_stage(self.qas.clone(), &kept_ids)?;
        let (pairs, qas_final, caption_pair_summary, qa_pair_summary) =
            self.pair_stage(&outcome.kept, &captions_final, qas_filtered.clone())?;

        let mut summary = self.new_summary(command);
        for stage in [
            rank_summary,
            downsample_summary,
            caption_filter_summary,
            question_filter_summary,
            caption_pair_summary,
            qa_pair_summary,
        ] {
            summary.push_stage(stage).map_err(at("summary"))?;
        }
        let caption_pairs = pairs
            .iter()
            .filter(|p| p.source == crate::records::PairSource::Caption)
            .count();
        summary.pair_counts = Some(PairCounts {
            caption: caption_pairs,
            qa: pairs.len() - caption_pairs,
            total: pairs.len(),
        });
        Ok(PipelineOutputs {
            ranked_captions: ranked,
            images_kept: outcome.kept,
            captions_final,
            qas_filtered,
            qas_final,
            pairs,
            summary,
        })
    }

    pub fn new_summary(&self, command: &str) -> RunSummary {
        RunSummary::new(
            command,
            self.config.config_hash(),
            self.config.seed,
            self.config.shard_count,
        )
    }

    pub fn out_path(&self, file: &str) -> PathBuf {
        self.config.paths.out_dir.join(file)
    }

    /// Write every pipeline artifact with deterministic ordering.
    pub fn write_outputs(&self, outputs: &PipelineOutputs) -> Result<(), PipelineError> {
        let stage = "write";
        std::fs::create_dir_all(&self.config.paths.out_dir).map_err(|source| {
            PipelineError::new(
                stage,
                PipelineErrorKind::Ingest(IngestError::Io {
                    path: self.config.paths.out_dir.clone(),
                    source,
                }),
            )
        })?;
        write_caption_records(
            self.out_path(FILE_CAPTIONS_RANKED),
            &outputs.ranked_captions,
        )
        .map_err(at(stage))?;
        write_image_records(self.out_path(FILE_IMAGES_KEPT), &outputs.images_kept)
            .map_err(at(stage))?;
        write_caption_records(
            self.out_path(FILE_CAPTIONS_FILTERED),
            &outputs.captions_final,
        )
        .map_err(at(stage))?;
        write_qa_records(self.out_path(FILE_QAS_FILTERED), &outputs.qas_filtered)
            .map_err(at(stage))?;
        write_qa_records(self.out_path(FILE_QAS_FINAL), &outputs.qas_final).map_err(at(stage))?;
        emit_pairs(
            &outputs.pairs,
            self.config.pairs.margin_min,
            self.out_path(FILE_PAIRS),
        )
        .map_err(at(stage))?;
        Ok(())
    }
}

fn load_prototypes(
    descriptions_path: &Path,
    store_path: &Path,
    expected_dim: usize,
) -> Result<PrototypeSet, PipelineError> {
    let stage = "load_prototypes";
    let store =
        EmbeddingStore::load_with_dim(store_path, Some(expected_dim as u32)).map_err(at(stage))?;
    let text = std::fs::read_to_string(descriptions_path).map_err(|source| {
        PipelineError::new(
            stage,
            PipelineErrorKind::Ingest(IngestError::Io {
                path: descriptions_path.to_path_buf(),
                source,
            }),
        )
    })?;
    let mut by_category: BTreeMap<ImageCategory, Vec<String>> = BTreeMap::new();
    for (ix, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: CategoryDescriptions = serde_json::from_str(line).map_err(|e| {
            PipelineError::new(
                stage,
                PipelineErrorKind::Ingest(IngestError::Schema {
                    path: descriptions_path.to_path_buf(),
                    line: ix + 1,
                    message: e.to_string(),
                }),
            )
        })?;
        by_category
            .entry(entry.category)
            .or_default()
            .extend(entry.descriptions);
    }
    let mut sets: Vec<Vec<crate::embedding::EmbeddingVector>> = Vec::with_capacity(4);
    for category in ImageCategory::ALL {
        let descriptions = by_category
            .get(&category)
            .filter(|d| !d.is_empty())
            .ok_or_else(|| {
                PipelineError::new(
                    stage,
                    PipelineErrorKind::Validation {
                        record: Some(category.name().to_string()),
                        message: "category has no descriptions".into(),
                    },
                )
            })?;
        let embedded = TextEmbedder::embed_texts(&store, descriptions).map_err(at(stage))?;
        sets.push(embedded);
    }
    let sets: [Vec<crate::embedding::EmbeddingVector>; 4] =
        sets.try_into().expect("exactly four categories");
    PrototypeSet::from_description_sets(&sets).map_err(at(stage))
}

/// Images sorted by image_id.
pub fn write_image_records(
    path: impl AsRef<Path>,
    images: &[ImageRecord],
) -> Result<(), IngestError> {
    let mut sorted: Vec<&ImageRecord> = images.iter().collect();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    write_jsonl(path.as_ref(), &sorted)
}

/// Captions sorted by (image_id, score desc, caption_id); unscored records
/// sort after scored ones.
pub fn write_caption_records(
    path: impl AsRef<Path>,
    captions: &[CaptionRecord],
) -> Result<(), IngestError> {
    let mut sorted: Vec<&CaptionRecord> = captions.iter().collect();
    sorted.sort_by(|a, b| {
        a.image_id.cmp(&b.image_id).then_with(|| {
            let sa = a.score.map(|s| s.value()).unwrap_or(f32::NEG_INFINITY);
            let sb = b.score.map(|s| s.value()).unwrap_or(f32::NEG_INFINITY);
            sb.partial_cmp(&sa)
                .expect("finite scores")
                .then_with(|| a.caption_id.cmp(&b.caption_id))
        })
    });
    write_jsonl(path.as_ref(), &sorted)
}

/// QA records sorted by (image_id, qa_id).
pub fn write_qa_records(path: impl AsRef<Path>, qas: &[QARecord]) -> Result<(), IngestError> {
    let mut sorted: Vec<&QARecord> = qas.iter().collect();
    sorted.sort_by(|a, b| {
        a.image_id
            .cmp(&b.image_id)
            .then_with(|| a.qa_id.cmp(&b.qa_id))
    });
    write_jsonl(path.as_ref(), &sorted)
}
