//! Command-line front end: orchestrates the curation pipeline end to end
//! and exposes every evaluator.
//!
//! Config precedence is defaults < `--config` file < flags; flags mirror the
//! config field paths with dotted names. Exit codes: 0 ok, 1 validation
//! error, 2 runtime error. Every run writes a machine-readable summary next
//! to its outputs so two runs can be diffed.

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Read;
use std::path::PathBuf;
use std::process::ExitCode;

use vlpref::amber::{
    self, amber_score, discriminative_metrics, generative_metrics, round_half_up_1dp,
};
use vlpref::config::{ConfigError, RunConfig, ZeroshotMode};
use vlpref::embedding::{assign_category, ImageCategory};
use vlpref::encoder::{
    decode_request, encode_response, hash_embedding, EncoderError, TextEmbedder,
};
use vlpref::loss::{batch_loss, load_loss_samples};
use vlpref::pipeline::{
    write_caption_records, write_image_records, write_qa_records, PipelineContext, PipelineError,
    PipelineErrorKind, FILE_CAPTIONS_FILTERED, FILE_CAPTIONS_RANKED, FILE_IMAGES_KEPT, FILE_PAIRS,
    FILE_QAS_FILTERED, FILE_QAS_FINAL,
};
use vlpref::probe::{clip_correction_rate, likelihood_inversions, load_probe_records};
use vlpref::records::{
    emit_pairs, load_caption_records, load_image_records, load_pairs, load_qa_records,
    CaptionStatus, PairSource,
};
use vlpref::store::EmbeddingStore;
use vlpref::summary::{PairCounts, StageSummary};
use vlpref::zeroshot::{
    classify_by_caption, classify_by_image, load_class_templates, load_gold_labels, top1_accuracy,
    ClassPrototypeBank, PredictionRecord,
};

#[derive(Parser)]
#[command(
    name = "vlpref",
    version,
    about = "Preference-pair curation and evaluation toolkit"
)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flag overrides mirroring the run-config field paths.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// Run config file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long = "shard_count", global = true)]
    shard_count: Option<usize>,
    #[arg(long = "worker_count", global = true)]
    worker_count: Option<usize>,

    #[arg(long = "paths.manifest", global = true)]
    paths_manifest: Option<PathBuf>,
    #[arg(long = "paths.images", global = true)]
    paths_images: Option<PathBuf>,
    #[arg(long = "paths.captions", global = true)]
    paths_captions: Option<PathBuf>,
    #[arg(long = "paths.qas", global = true)]
    paths_qas: Option<PathBuf>,
    #[arg(long = "paths.image_store", global = true)]
    paths_image_store: Option<PathBuf>,
    #[arg(long = "paths.text_store", global = true)]
    paths_text_store: Option<PathBuf>,
    #[arg(long = "paths.category_descriptions", global = true)]
    paths_category_descriptions: Option<PathBuf>,
    #[arg(long = "paths.category_store", global = true)]
    paths_category_store: Option<PathBuf>,
    #[arg(long = "paths.question_rules", global = true)]
    paths_question_rules: Option<PathBuf>,
    #[arg(long = "paths.loss_samples", global = true)]
    paths_loss_samples: Option<PathBuf>,
    #[arg(long = "paths.amber_annotations", global = true)]
    paths_amber_annotations: Option<PathBuf>,
    #[arg(long = "paths.amber_generative", global = true)]
    paths_amber_generative: Option<PathBuf>,
    #[arg(long = "paths.amber_discriminative", global = true)]
    paths_amber_discriminative: Option<PathBuf>,
    #[arg(long = "paths.class_templates", global = true)]
    paths_class_templates: Option<PathBuf>,
    #[arg(long = "paths.class_prompt_store", global = true)]
    paths_class_prompt_store: Option<PathBuf>,
    #[arg(long = "paths.zeroshot_eval_store", global = true)]
    paths_zeroshot_eval_store: Option<PathBuf>,
    #[arg(long = "paths.zeroshot_labels", global = true)]
    paths_zeroshot_labels: Option<PathBuf>,
    #[arg(long = "paths.probe_records", global = true)]
    paths_probe_records: Option<PathBuf>,
    #[arg(long = "paths.probe_store", global = true)]
    paths_probe_store: Option<PathBuf>,
    #[arg(long = "paths.out_dir", global = true)]
    paths_out_dir: Option<PathBuf>,

    #[arg(long = "curation.caption_score_min", global = true)]
    curation_caption_score_min: Option<f32>,
    #[arg(long = "curation.question_score_min", global = true)]
    curation_question_score_min: Option<f32>,
    #[arg(long = "curation.caption_max_words", global = true)]
    curation_caption_max_words: Option<usize>,
    #[arg(long = "curation.text_cap_ratio", global = true)]
    curation_text_cap_ratio: Option<f32>,

    #[arg(long = "pairs.margin_min", global = true)]
    pairs_margin_min: Option<f32>,
    #[arg(long = "pairs.length_ratio_max", global = true)]
    pairs_length_ratio_max: Option<f64>,
    #[arg(long = "pairs.synthetic_score_min", global = true)]
    pairs_synthetic_score_min: Option<f32>,
    #[arg(long = "pairs.caption_prompt_template", global = true)]
    pairs_caption_prompt_template: Option<String>,
    #[arg(long = "pairs.qa_prompt_template", global = true)]
    pairs_qa_prompt_template: Option<String>,

    #[arg(long = "loss.variant", global = true)]
    loss_variant: Option<String>,
    #[arg(long = "loss.beta", global = true)]
    loss_beta: Option<f64>,
    #[arg(long = "loss.label_smoothing", global = true)]
    loss_label_smoothing: Option<f64>,
    #[arg(long = "loss.slic_delta", global = true)]
    loss_slic_delta: Option<f64>,
    #[arg(long = "loss.kto_lambda_pos", global = true)]
    loss_kto_lambda_pos: Option<f64>,
    #[arg(long = "loss.kto_lambda_neg", global = true)]
    loss_kto_lambda_neg: Option<f64>,
    #[arg(long = "loss.kto_reference_point", global = true)]
    loss_kto_reference_point: Option<f64>,

    #[arg(long = "zeroshot.mode", global = true)]
    zeroshot_mode: Option<String>,

    #[arg(long = "encoder.kind", global = true)]
    encoder_kind: Option<String>,
    #[arg(long = "encoder.address", global = true)]
    encoder_address: Option<String>,
    #[arg(long = "encoder.model_tag", global = true)]
    encoder_model_tag: Option<String>,
    #[arg(long = "encoder.timeout_ms", global = true)]
    encoder_timeout_ms: Option<u64>,
    #[arg(long = "encoder.expected_dim", global = true)]
    encoder_expected_dim: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Schema and cross-reference checks over every configured input.
    Validate,
    /// Score and rank captions per image.
    Rank,
    /// Global filtering: category down-sampling plus caption/question thresholds.
    Filter,
    /// Pair building and emission from filtered records.
    Pairs,
    /// rank -> filter -> pairs in one run.
    Pipeline,
    /// Batch loss and gradient report over a sample file.
    LossEval,
    /// Hallucination metrics from annotation/response files.
    EvalAmber,
    /// Zero-shot classification from class templates and an embedding store.
    EvalZeroshot,
    /// Likelihood-inversion probe over probe records.
    Probe,
    /// Category distribution, drop accounting, and pair counts of a finished run.
    Stats,
    /// Serve one embedding request from stdin to stdout (sidecar reference).
    EncoderStub {
        /// Answer from an embedding-store file keyed by exact text.
        #[arg(long = "store")]
        store: Option<PathBuf>,
        /// Answer with deterministic hash embeddings of this dimension.
        #[arg(long = "hash_dim")]
        hash_dim: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            let report = serde_json::json!({
                "stage": error.stage,
                "record": error.record_id(),
                "error": error.source.to_string(),
            });
            eprintln!("{report}");
            ExitCode::from(error.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let config = effective_config(&cli.overrides)?;
    match cli.command {
        Command::Validate => cmd_validate(config),
        Command::Rank => cmd_rank(config),
        Command::Filter => cmd_filter(config),
        Command::Pairs => cmd_pairs(config),
        Command::Pipeline => cmd_pipeline(config),
        Command::LossEval => cmd_loss_eval(config),
        Command::EvalAmber => cmd_eval_amber(config),
        Command::EvalZeroshot => cmd_eval_zeroshot(config),
        Command::Probe => cmd_probe(config),
        Command::Stats => cmd_stats(config),
        Command::EncoderStub { store, hash_dim } => cmd_encoder_stub(store, hash_dim),
    }
}

fn bad_config(message: String) -> PipelineError {
    PipelineError::new(
        "config",
        PipelineErrorKind::Config(ConfigError::Invalid { message }),
    )
}

fn effective_config(overrides: &Overrides) -> Result<RunConfig, PipelineError> {
    let mut config = match &overrides.config {
        Some(path) => RunConfig::load(path).map_err(|e| PipelineError::new("config", e))?,
        None => RunConfig::default(),
    };
    let o = overrides;
    macro_rules! set {
        ($field:expr, $value:expr) => {
            if let Some(v) = $value.clone() {
                $field = v;
            }
        };
    }
    macro_rules! set_opt {
        ($field:expr, $value:expr) => {
            if let Some(v) = $value.clone() {
                $field = Some(v);
            }
        };
    }
    set!(config.seed, o.seed);
    set!(config.shard_count, o.shard_count);
    set!(config.worker_count, o.worker_count);
    set_opt!(config.paths.manifest, o.paths_manifest);
    set_opt!(config.paths.images, o.paths_images);
    set_opt!(config.paths.captions, o.paths_captions);
    set_opt!(config.paths.qas, o.paths_qas);
    set_opt!(config.paths.image_store, o.paths_image_store);
    set_opt!(config.paths.text_store, o.paths_text_store);
    set_opt!(
        config.paths.category_descriptions,
        o.paths_category_descriptions
    );
    set_opt!(config.paths.category_store, o.paths_category_store);
    set_opt!(config.paths.question_rules, o.paths_question_rules);
    set_opt!(config.paths.loss_samples, o.paths_loss_samples);
    set_opt!(config.paths.amber_annotations, o.paths_amber_annotations);
    set_opt!(config.paths.amber_generative, o.paths_amber_generative);
    set_opt!(
        config.paths.amber_discriminative,
        o.paths_amber_discriminative
    );
    set_opt!(config.paths.class_templates, o.paths_class_templates);
    set_opt!(config.paths.class_prompt_store, o.paths_class_prompt_store);
    set_opt!(
        config.paths.zeroshot_eval_store,
        o.paths_zeroshot_eval_store
    );
    set_opt!(config.paths.zeroshot_labels, o.paths_zeroshot_labels);
    set_opt!(config.paths.probe_records, o.paths_probe_records);
    set_opt!(config.paths.probe_store, o.paths_probe_store);
    set!(config.paths.out_dir, o.paths_out_dir);
    set!(
        config.curation.caption_score_min,
        o.curation_caption_score_min
    );
    set!(
        config.curation.question_score_min,
        o.curation_question_score_min
    );
    set!(
        config.curation.caption_max_words,
        o.curation_caption_max_words
    );
    set_opt!(config.curation.text_cap_ratio, o.curation_text_cap_ratio);
    set!(config.pairs.margin_min, o.pairs_margin_min);
    set!(config.pairs.length_ratio_max, o.pairs_length_ratio_max);
    set!(
        config.pairs.synthetic_score_min,
        o.pairs_synthetic_score_min
    );
    set!(
        config.pairs.caption_prompt_template,
        o.pairs_caption_prompt_template
    );
    set!(config.pairs.qa_prompt_template, o.pairs_qa_prompt_template);
    if let Some(variant) = &o.loss_variant {
        config.loss.variant = serde_json::from_value(serde_json::json!(variant))
            .map_err(|_| bad_config(format!("unknown loss variant {variant:?}")))?;
    }
    set!(config.loss.beta, o.loss_beta);
    set!(config.loss.label_smoothing, o.loss_label_smoothing);
    set!(config.loss.slic_delta, o.loss_slic_delta);
    set!(config.loss.kto_lambda_pos, o.loss_kto_lambda_pos);
    set!(config.loss.kto_lambda_neg, o.loss_kto_lambda_neg);
    set_opt!(config.loss.kto_reference_point, o.loss_kto_reference_point);
    if let Some(mode) = &o.zeroshot_mode {
        config.zeroshot.mode = serde_json::from_value(serde_json::json!(mode))
            .map_err(|_| bad_config(format!("unknown zeroshot mode {mode:?}")))?;
    }
    if o.encoder_kind.is_some()
        || o.encoder_address.is_some()
        || o.encoder_model_tag.is_some()
        || o.encoder_timeout_ms.is_some()
        || o.encoder_expected_dim.is_some()
    {
        let mut endpoint = config
            .encoder
            .take()
            .unwrap_or_else(|| vlpref::encoder::EncoderEndpoint::file_stub(String::new(), 0));
        if let Some(kind) = &o.encoder_kind {
            endpoint.kind = serde_json::from_value(serde_json::json!(kind))
                .map_err(|_| bad_config(format!("unknown encoder kind {kind:?}")))?;
        }
        set!(endpoint.address, o.encoder_address);
        set!(endpoint.model_tag, o.encoder_model_tag);
        set!(endpoint.timeout_ms, o.encoder_timeout_ms);
        set!(endpoint.expected_dim, o.encoder_expected_dim);
        config.encoder = Some(endpoint);
    }
    Ok(config)
}

fn ensure_out_dir(config: &RunConfig) -> Result<(), PipelineError> {
    std::fs::create_dir_all(&config.paths.out_dir).map_err(|e| {
        PipelineError::new(
            "write",
            PipelineErrorKind::Other(format!(
                "cannot create out_dir {}: {e}",
                config.paths.out_dir.display()
            )),
        )
    })
}

fn write_summary(
    config: &RunConfig,
    command: &str,
    stages: Vec<StageSummary>,
    pair_counts: Option<PairCounts>,
) -> Result<(), PipelineError> {
    let mut summary = vlpref::summary::RunSummary::new(
        command,
        config.config_hash(),
        config.seed,
        config.shard_count,
    );
    for stage in stages {
        summary
            .push_stage(stage)
            .map_err(|e| PipelineError::new("summary", e))?;
    }
    summary.pair_counts = pair_counts;
    let path = config.paths.out_dir.join(format!("summary_{command}.json"));
    summary
        .write(path)
        .map_err(|e| PipelineError::new("summary", e))
}

fn write_report<T: Serialize>(
    config: &RunConfig,
    name: &str,
    report: &T,
) -> Result<PathBuf, PipelineError> {
    let path = config.paths.out_dir.join(name);
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(&path, json + "\n").map_err(|e| {
        PipelineError::new(
            "write",
            PipelineErrorKind::Other(format!("{}: {e}", path.display())),
        )
    })?;
    Ok(path)
}

fn cmd_validate(config: RunConfig) -> Result<(), PipelineError> {
    let ctx = PipelineContext::load(config)?;
    let stages = ctx.validate_cross_references()?;
    ensure_out_dir(&ctx.config)?;
    println!(
        "validate: {} images, {} captions, {} qas ok (config {})",
        ctx.images.len(),
        ctx.captions.len(),
        ctx.qas.len(),
        ctx.config.config_hash()
    );
    write_summary(&ctx.config, "validate", stages, None)
}

fn cmd_rank(config: RunConfig) -> Result<(), PipelineError> {
    let ctx = PipelineContext::load(config)?;
    let (ranked, stage) = ctx.rank_stage(ctx.captions.clone())?;
    ensure_out_dir(&ctx.config)?;
    write_caption_records(ctx.out_path(FILE_CAPTIONS_RANKED), &ranked)
        .map_err(|e| PipelineError::new("write", e))?;
    println!(
        "rank: scored {} captions over {} images",
        ranked.len(),
        ctx.images.len()
    );
    write_summary(&ctx.config, "rank", vec![stage], None)
}

fn cmd_filter(config: RunConfig) -> Result<(), PipelineError> {
    let ctx = PipelineContext::load(config)?;
    let image_ids = ctx.images.iter().map(|i| i.image_id.clone()).collect();
    let ranked = load_caption_records(ctx.out_path(FILE_CAPTIONS_RANKED), Some(&image_ids))
        .map_err(|e| PipelineError::new("filter", e))?;
    let (outcome, s1) = ctx.downsample_stage(ctx.images.clone())?;
    let kept_ids = outcome.kept.iter().map(|i| i.image_id.clone()).collect();
    let (captions, s2) = ctx.caption_filter_stage(ranked, &kept_ids)?;
    let (qas, s3) = ctx.question_filter_stage(ctx.qas.clone(), &kept_ids)?;
    ensure_out_dir(&ctx.config)?;
    write_image_records(ctx.out_path(FILE_IMAGES_KEPT), &outcome.kept)
        .map_err(|e| PipelineError::new("write", e))?;
    write_caption_records(ctx.out_path(FILE_CAPTIONS_FILTERED), &captions)
        .map_err(|e| PipelineError::new("write", e))?;
    write_qa_records(ctx.out_path(FILE_QAS_FILTERED), &qas)
        .map_err(|e| PipelineError::new("write", e))?;
    println!(
        "filter: kept {}/{} images (text ratio {:.4}), {} captions kept",
        outcome.kept.len(),
        ctx.images.len(),
        outcome.resolved_ratio,
        captions
            .iter()
            .filter(|c| c.status == CaptionStatus::Kept)
            .count()
    );
    write_summary(&ctx.config, "filter", vec![s1, s2, s3], None)
}

fn cmd_pairs(config: RunConfig) -> Result<(), PipelineError> {
    let ctx = PipelineContext::load(config)?;
    let kept_images = load_image_records(ctx.out_path(FILE_IMAGES_KEPT))
        .map_err(|e| PipelineError::new("pairs", e))?;
    let image_ids = ctx.images.iter().map(|i| i.image_id.clone()).collect();
    let captions = load_caption_records(ctx.out_path(FILE_CAPTIONS_FILTERED), Some(&image_ids))
        .map_err(|e| PipelineError::new("pairs", e))?;
    let qas = load_qa_records(ctx.out_path(FILE_QAS_FILTERED), Some(&image_ids))
        .map_err(|e| PipelineError::new("pairs", e))?;
    let (pairs, qas_final, s4, s5) = ctx.pair_stage(&kept_images, &captions, qas)?;
    ensure_out_dir(&ctx.config)?;
    let caption_pairs = pairs
        .iter()
        .filter(|p| p.source == PairSource::Caption)
        .count();
    let counts = PairCounts {
        caption: caption_pairs,
        qa: pairs.len() - caption_pairs,
        total: pairs.len(),
    };
    emit_pairs(
        &pairs,
        ctx.config.pairs.margin_min,
        ctx.out_path(FILE_PAIRS),
    )
    .map_err(|e| PipelineError::new("write", e))?;
    write_qa_records(ctx.out_path(FILE_QAS_FINAL), &qas_final)
        .map_err(|e| PipelineError::new("write", e))?;
    println!(
        "pairs: emitted {} ({} caption, {} qa)",
        counts.total, counts.caption, counts.qa
    );
    write_summary(&ctx.config, "pairs", vec![s4, s5], Some(counts))
}

fn cmd_pipeline(config: RunConfig) -> Result<(), PipelineError> {
    let ctx = PipelineContext::load(config)?;
    let outputs = ctx.run_pipeline("pipeline")?;
    ctx.write_outputs(&outputs)?;
    outputs
        .summary
        .write(ctx.out_path("summary_pipeline.json"))
        .map_err(|e| PipelineError::new("summary", e))?;
    let counts = outputs.summary.pair_counts.unwrap_or_default();
    println!(
        "pipeline: {} images in, {} kept; {} pairs out ({} caption, {} qa)",
        ctx.images.len(),
        outputs.images_kept.len(),
        counts.total,
        counts.caption,
        counts.qa
    );
    Ok(())
}

#[derive(Serialize)]
struct LossReport {
    variant: String,
    beta: f64,
    label_smoothing: f64,
    slic_delta: f64,
    kto_lambda_pos: f64,
    kto_lambda_neg: f64,
    kto_reference_point: Option<f64>,
    sample_count: usize,
    mean_loss: f64,
}

#[derive(Serialize)]
struct LossGradRecord<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    id: &'a Option<String>,
    loss: f64,
    grad: [f64; 4],
}

fn cmd_loss_eval(config: RunConfig) -> Result<(), PipelineError> {
    let path = RunConfig::require(&config.paths.loss_samples, "paths.loss_samples")
        .map_err(|e| PipelineError::new("loss_eval", e))?;
    let records = load_loss_samples(&path).map_err(|e| PipelineError::new("loss_eval", e))?;
    let samples: Vec<_> = records.iter().map(|r| r.sample()).collect();
    let (mean_loss, outputs) =
        batch_loss(&samples, &config.loss).map_err(|e| PipelineError::new("loss_eval", e))?;
    ensure_out_dir(&config)?;
    let report = LossReport {
        variant: config.loss.variant.name().to_string(),
        beta: config.loss.beta,
        label_smoothing: config.loss.label_smoothing,
        slic_delta: config.loss.slic_delta,
        kto_lambda_pos: config.loss.kto_lambda_pos,
        kto_lambda_neg: config.loss.kto_lambda_neg,
        kto_reference_point: config.loss.kto_reference_point,
        sample_count: samples.len(),
        mean_loss,
    };
    write_report(&config, "loss_report.json", &report)?;
    let grads: Vec<LossGradRecord> = records
        .iter()
        .zip(&outputs)
        .map(|(r, o)| LossGradRecord {
            id: &r.id,
            loss: o.loss,
            grad: o.grad,
        })
        .collect();
    vlpref::records::write_jsonl(&config.paths.out_dir.join("loss_grads.jsonl"), &grads)
        .map_err(|e| PipelineError::new("write", e))?;
    println!(
        "loss-eval: {} samples, variant {}, mean loss {:.6}",
        samples.len(),
        config.loss.variant.name(),
        mean_loss
    );
    write_summary(
        &config,
        "loss_eval",
        vec![StageSummary::new("loss_eval", samples.len(), samples.len())],
        None,
    )
}

#[derive(Serialize)]
struct AmberReport {
    generative: vlpref::amber::GenerativeMetrics,
    discriminative: vlpref::amber::DiscriminativeMetrics,
    amber_score: f64,
}

fn cmd_eval_amber(config: RunConfig) -> Result<(), PipelineError> {
    let stage = "eval_amber";
    let fail = |e: amber::AmberError| {
        PipelineError::new("eval_amber", PipelineErrorKind::Other(e.to_string()))
    };
    let annotations_path =
        RunConfig::require(&config.paths.amber_annotations, "paths.amber_annotations")
            .map_err(|e| PipelineError::new(stage, e))?;
    let generative_path =
        RunConfig::require(&config.paths.amber_generative, "paths.amber_generative")
            .map_err(|e| PipelineError::new(stage, e))?;
    let discriminative_path = RunConfig::require(
        &config.paths.amber_discriminative,
        "paths.amber_discriminative",
    )
    .map_err(|e| PipelineError::new(stage, e))?;
    let annotations = amber::load_annotations(&annotations_path).map_err(fail)?;
    let generative = amber::load_generative_responses(&generative_path).map_err(fail)?;
    let discriminative =
        amber::load_discriminative_responses(&discriminative_path).map_err(fail)?;
    let gm = generative_metrics(&generative, &annotations).map_err(fail)?;
    let dm = discriminative_metrics(&discriminative).map_err(fail)?;
    let score = amber_score(gm.chair, dm.f1).map_err(fail)?;
    ensure_out_dir(&config)?;
    let report = AmberReport {
        generative: gm,
        discriminative: dm,
        amber_score: score,
    };
    write_report(&config, "amber_report.json", &report)?;
    // flat one-decimal table, diffable against published result rows
    let r1 = round_half_up_1dp;
    let table = format!(
        "CHAIR\tCover\tHal\tCog\tAcc\tP\tR\tF1\tAMBER\n{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
        r1(gm.chair),
        r1(gm.cover),
        r1(gm.hal),
        r1(gm.cog),
        r1(dm.accuracy),
        r1(dm.precision),
        r1(dm.recall),
        r1(dm.f1),
        score
    );
    std::fs::write(config.paths.out_dir.join("amber_table.tsv"), &table)
        .map_err(|e| PipelineError::new("write", PipelineErrorKind::Other(e.to_string())))?;
    print!("{table}");
    write_summary(
        &config,
        "eval_amber",
        vec![
            StageSummary::new("amber_generative", generative.len(), generative.len()),
            StageSummary::new(
                "amber_discriminative",
                discriminative.len(),
                discriminative.len(),
            ),
        ],
        None,
    )
}

#[derive(Serialize)]
struct ZeroshotReport {
    mode: String,
    class_count: usize,
    total: usize,
    correct: usize,
    top1_accuracy: f64,
    top1_accuracy_1dp: f64,
}

fn cmd_eval_zeroshot(config: RunConfig) -> Result<(), PipelineError> {
    let stage = "eval_zeroshot";
    let cfg_err = |e: ConfigError| PipelineError::new(stage, e);
    let zs_err = |e: vlpref::zeroshot::ZeroshotError| {
        PipelineError::new(stage, PipelineErrorKind::Other(e.to_string()))
    };
    let templates_path = RunConfig::require(&config.paths.class_templates, "paths.class_templates")
        .map_err(cfg_err)?;
    let prompt_store_path =
        RunConfig::require(&config.paths.class_prompt_store, "paths.class_prompt_store")
            .map_err(cfg_err)?;
    let eval_store_path = RunConfig::require(
        &config.paths.zeroshot_eval_store,
        "paths.zeroshot_eval_store",
    )
    .map_err(cfg_err)?;
    let labels_path = RunConfig::require(&config.paths.zeroshot_labels, "paths.zeroshot_labels")
        .map_err(cfg_err)?;

    let templates = load_class_templates(&templates_path).map_err(zs_err)?;
    let prompt_store =
        EmbeddingStore::load(&prompt_store_path).map_err(|e| PipelineError::new(stage, e))?;
    let bank = ClassPrototypeBank::from_templates(&templates, &prompt_store).map_err(zs_err)?;
    let eval_store =
        EmbeddingStore::load(&eval_store_path).map_err(|e| PipelineError::new(stage, e))?;
    let mut labels = load_gold_labels(&labels_path).map_err(zs_err)?;
    labels.sort_by(|a, b| a.image_id.cmp(&b.image_id));

    let mut predictions = Vec::with_capacity(labels.len());
    for label in &labels {
        let embedding = eval_store.vector(&label.image_id).ok_or_else(|| {
            PipelineError::new(
                stage,
                PipelineErrorKind::Validation {
                    record: Some(label.image_id.clone()),
                    message: "no embedding in the zeroshot eval store".into(),
                },
            )
        })?;
        let predicted = match config.zeroshot.mode {
            ZeroshotMode::Caption => classify_by_caption(&embedding, &bank).map_err(zs_err)?,
            ZeroshotMode::Image => classify_by_image(&embedding, &bank).map_err(zs_err)?,
        };
        predictions.push(PredictionRecord {
            image_id: label.image_id.clone(),
            predicted: predicted.to_string(),
            gold: label.gold.clone(),
        });
    }
    let pairs: Vec<(&str, &str)> = predictions
        .iter()
        .map(|p| (p.predicted.as_str(), p.gold.as_str()))
        .collect();
    let accuracy = top1_accuracy(&pairs).map_err(zs_err)?;
    ensure_out_dir(&config)?;
    vlpref::records::write_jsonl(
        &config.paths.out_dir.join("zeroshot_predictions.jsonl"),
        &predictions,
    )
    .map_err(|e| PipelineError::new("write", e))?;
    let report = ZeroshotReport {
        mode: match config.zeroshot.mode {
            ZeroshotMode::Caption => "caption".into(),
            ZeroshotMode::Image => "image".into(),
        },
        class_count: bank.len(),
        total: predictions.len(),
        correct: pairs.iter().filter(|(p, g)| p == g).count(),
        top1_accuracy: accuracy,
        top1_accuracy_1dp: round_half_up_1dp(accuracy),
    };
    write_report(&config, "zeroshot_report.json", &report)?;
    println!(
        "eval-zeroshot: top-1 accuracy {:.1}% over {} images, {} classes ({} mode)",
        report.top1_accuracy_1dp, report.total, report.class_count, report.mode
    );
    write_summary(
        &config,
        "eval_zeroshot",
        vec![StageSummary::new(
            "zeroshot",
            predictions.len(),
            predictions.len(),
        )],
        None,
    )
}

#[derive(Serialize)]
struct ProbeReport {
    records: usize,
    inversions: vlpref::probe::PerType<usize>,
    correction_rate: vlpref::probe::PerType<Option<f64>>,
}

fn cmd_probe(config: RunConfig) -> Result<(), PipelineError> {
    let stage = "probe";
    let records_path = RunConfig::require(&config.paths.probe_records, "paths.probe_records")
        .map_err(|e| PipelineError::new(stage, e))?;
    let store_path = RunConfig::require(&config.paths.probe_store, "paths.probe_store")
        .map_err(|e| PipelineError::new(stage, e))?;
    let fail = |e: vlpref::probe::ProbeError| {
        PipelineError::new("probe", PipelineErrorKind::Other(e.to_string()))
    };
    let records = load_probe_records(&records_path).map_err(fail)?;
    let store = EmbeddingStore::load(&store_path).map_err(|e| PipelineError::new(stage, e))?;
    let inversions = likelihood_inversions(&records);
    let rates = clip_correction_rate(&records, &store).map_err(fail)?;
    ensure_out_dir(&config)?;
    let report = ProbeReport {
        records: records.len(),
        inversions,
        correction_rate: rates,
    };
    write_report(&config, "probe_report.json", &report)?;
    let fmt_rate = |r: Option<f64>| match r {
        Some(v) => format!("{:.1}%", v),
        None => "n/a".to_string(),
    };
    println!(
        "probe: inversions existence {} / attribute {} / relationship {}; corrected {} / {} / {}",
        inversions.existence,
        inversions.attribute,
        inversions.relationship,
        fmt_rate(rates.existence),
        fmt_rate(rates.attribute),
        fmt_rate(rates.relationship),
    );
    write_summary(
        &config,
        "probe",
        vec![StageSummary::new("probe", records.len(), records.len())],
        None,
    )
}

#[derive(Serialize)]
struct ScoreStats {
    count: usize,
    mean: f64,
    min: f64,
    max: f64,
}

#[derive(Serialize)]
struct CategoryStat {
    images_total: usize,
    images_kept: usize,
    caption_scores: Option<ScoreStats>,
}

#[derive(Serialize)]
struct StatsReport {
    categories: BTreeMap<String, CategoryStat>,
    caption_status: BTreeMap<String, usize>,
    qa_status: BTreeMap<String, usize>,
    pair_counts: PairCounts,
}

fn cmd_stats(config: RunConfig) -> Result<(), PipelineError> {
    let ctx = PipelineContext::load(config)?;
    let stage = "stats";
    let prototypes = ctx.prototypes.as_ref().ok_or_else(|| {
        PipelineError::new(
            stage,
            PipelineErrorKind::Config(ConfigError::MissingPath {
                field: "paths.category_descriptions",
            }),
        )
    })?;
    let kept_images = load_image_records(ctx.out_path(FILE_IMAGES_KEPT))
        .map_err(|e| PipelineError::new(stage, e))?;
    let image_ids = ctx.images.iter().map(|i| i.image_id.clone()).collect();
    let captions = load_caption_records(ctx.out_path(FILE_CAPTIONS_FILTERED), Some(&image_ids))
        .map_err(|e| PipelineError::new(stage, e))?;
    let qas = load_qa_records(ctx.out_path(FILE_QAS_FINAL), Some(&image_ids))
        .map_err(|e| PipelineError::new(stage, e))?;
    let pairs = load_pairs(ctx.out_path(FILE_PAIRS)).map_err(|e| PipelineError::new(stage, e))?;

    // category distribution over the full image set, recomputed from the
    // stores so dropped images are included
    let mut total_by_category: BTreeMap<String, usize> = BTreeMap::new();
    let mut category_of: BTreeMap<String, ImageCategory> = BTreeMap::new();
    for image in &ctx.images {
        let vec = ctx
            .image_store
            .vector_at(image.embedding_ref)
            .ok_or_else(|| {
                PipelineError::new(
                    stage,
                    PipelineErrorKind::Validation {
                        record: Some(image.image_id.clone()),
                        message: "embedding_ref outside the image store".into(),
                    },
                )
            })?;
        let category =
            assign_category(&vec, prototypes).map_err(|e| PipelineError::new(stage, e))?;
        *total_by_category
            .entry(category.name().to_string())
            .or_insert(0) += 1;
        category_of.insert(image.image_id.clone(), category);
    }
    let mut kept_by_category: BTreeMap<String, usize> = BTreeMap::new();
    for image in &kept_images {
        if let Some(category) = image.category {
            *kept_by_category
                .entry(category.name().to_string())
                .or_insert(0) += 1;
        }
    }
    // per-category score distribution over scored captions
    let mut scores_by_category: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for caption in &captions {
        if let (Some(score), Some(category)) = (caption.score, category_of.get(&caption.image_id)) {
            scores_by_category
                .entry(category.name().to_string())
                .or_default()
                .push(f64::from(score.value()));
        }
    }
    let mut categories = BTreeMap::new();
    for category in ImageCategory::ALL {
        let name = category.name().to_string();
        let scores = scores_by_category.get(&name);
        let caption_scores = scores.filter(|s| !s.is_empty()).map(|s| ScoreStats {
            count: s.len(),
            mean: s.iter().sum::<f64>() / s.len() as f64,
            min: s.iter().cloned().fold(f64::INFINITY, f64::min),
            max: s.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        });
        categories.insert(
            name.clone(),
            CategoryStat {
                images_total: *total_by_category.get(&name).unwrap_or(&0),
                images_kept: *kept_by_category.get(&name).unwrap_or(&0),
                caption_scores,
            },
        );
    }

    let mut caption_status: BTreeMap<String, usize> = BTreeMap::new();
    for caption in &captions {
        let key = serde_json::to_value(caption.status).unwrap();
        *caption_status
            .entry(key.as_str().unwrap().to_string())
            .or_insert(0) += 1;
    }
    let mut qa_status: BTreeMap<String, usize> = BTreeMap::new();
    for qa in &qas {
        let key = serde_json::to_value(qa.status).unwrap();
        *qa_status
            .entry(key.as_str().unwrap().to_string())
            .or_insert(0) += 1;
    }
    let caption_pairs = pairs
        .iter()
        .filter(|p| p.source == PairSource::Caption)
        .count();
    let report = StatsReport {
        categories,
        caption_status,
        qa_status,
        pair_counts: PairCounts {
            caption: caption_pairs,
            qa: pairs.len() - caption_pairs,
            total: pairs.len(),
        },
    };
    ensure_out_dir(&ctx.config)?;
    write_report(&ctx.config, "stats.json", &report)?;

    println!("category     images  kept   caption score mean/min/max");
    for (name, stat) in &report.categories {
        match &stat.caption_scores {
            Some(s) => println!(
                "{name:<12} {:>6} {:>5}   {:>6.2} / {:>6.2} / {:>6.2}",
                stat.images_total, stat.images_kept, s.mean, s.min, s.max
            ),
            None => println!(
                "{name:<12} {:>6} {:>5}   (no scored captions)",
                stat.images_total, stat.images_kept
            ),
        }
    }
    println!("caption statuses: {:?}", report.caption_status);
    println!("qa statuses: {:?}", report.qa_status);
    println!(
        "pairs: {} total ({} caption, {} qa)",
        report.pair_counts.total, report.pair_counts.caption, report.pair_counts.qa
    );
    write_summary(
        &ctx.config,
        "stats",
        vec![StageSummary::new(
            "stats",
            ctx.images.len(),
            ctx.images.len(),
        )],
        Some(report.pair_counts),
    )
}

/// Serve exactly one wire-format request from stdin to stdout. With
/// `--store`, texts resolve against an embedding store keyed by exact
/// text; with `--hash_dim`, deterministic hash embeddings are returned.
fn cmd_encoder_stub(store: Option<PathBuf>, hash_dim: Option<usize>) -> Result<(), PipelineError> {
    let stage = "encoder_stub";
    let fail = |e: EncoderError| PipelineError::new("encoder_stub", PipelineErrorKind::Encoder(e));
    let mut input = Vec::new();
    std::io::stdin()
        .read_to_end(&mut input)
        .map_err(|e| PipelineError::new(stage, PipelineErrorKind::Other(e.to_string())))?;
    let (request_id, texts) = decode_request(&input).map_err(fail)?;
    let (dim, rows): (usize, Vec<Vec<f32>>) = match (store, hash_dim) {
        (Some(path), None) => {
            let store = EmbeddingStore::load(&path).map_err(|e| PipelineError::new(stage, e))?;
            let embedded = TextEmbedder::embed_texts(&store, &texts).map_err(fail)?;
            (
                store.dim(),
                embedded.into_iter().map(|v| v.into_values()).collect(),
            )
        }
        (None, Some(dim)) => (dim, texts.iter().map(|t| hash_embedding(t, dim)).collect()),
        _ => {
            return Err(PipelineError::new(
                stage,
                PipelineErrorKind::Other("pass exactly one of --store or --hash_dim".into()),
            ))
        }
    };
    let response = encode_response(request_id, dim as u32, &rows);
    use std::io::Write;
    std::io::stdout()
        .write_all(&response)
        .and_then(|()| std::io::stdout().flush())
        .map_err(|e| PipelineError::new(stage, PipelineErrorKind::Other(e.to_string())))
}
