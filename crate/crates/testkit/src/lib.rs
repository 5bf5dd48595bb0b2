//! Deterministic synthetic corpora for integration tests: images, captions,
//! and QA records with embeddings engineered so every pipeline branch
//! (score drops, length drops, ties, text down-sampling, parse failures,
//! synthetic-score gates) is exercised. Everything is a pure function of
//! the seed, so two generations are identical.

use std::path::{Path, PathBuf};
use vlpref::embedding::ImageCategory;
use vlpref::encoder::hash_embedding;
use vlpref::hash::{hash_with_seed, unit_f64};
use vlpref::pairs::{synthesize_caption, QuestionParseRules};
use vlpref::records::{write_jsonl, CaptionRecord, CaptionStatus, ImageRecord, QARecord, QaStatus};
use vlpref::store::EmbeddingStore;

pub struct CorpusSpec {
    pub n_images: usize,
    pub dim: usize,
    pub seed: u64,
    /// Explicit text keep-ratio written into the run config.
    pub text_cap_ratio: Option<f32>,
    /// Route synthetic-caption embeddings through the `[encoder]` file
    /// stub (true) or merge them into the text store (false).
    pub use_encoder_stub: bool,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_images: 20,
            dim: 32,
            seed: 7,
            text_cap_ratio: Some(0.5),
            use_encoder_stub: true,
        }
    }
}

pub struct Corpus {
    pub spec_seed: u64,
    pub dim: usize,
    pub images: Vec<ImageRecord>,
    pub captions: Vec<CaptionRecord>,
    pub qas: Vec<QARecord>,
    pub image_rows: Vec<(String, Vec<f32>)>,
    pub text_rows: Vec<(String, Vec<f32>)>,
    pub category_descriptions: Vec<(ImageCategory, Vec<String>)>,
    pub category_rows: Vec<(String, Vec<f32>)>,
    pub synthetic_rows: Vec<(String, Vec<f32>)>,
    pub use_encoder_stub: bool,
    pub text_cap_ratio: Option<f32>,
}

/// Paths of everything [`Corpus::write`] produced.
pub struct CorpusPaths {
    pub dir: PathBuf,
    pub config: PathBuf,
    pub out_dir: PathBuf,
}

fn jitter(seed: u64, tag: &str) -> f64 {
    unit_f64(hash_with_seed(seed, tag.as_bytes()))
}

/// normalize(alpha * base + noise(tag)): cosine to `base` rises with alpha.
fn blend(base: &[f32], alpha: f64, seed: u64, tag: &str) -> Vec<f32> {
    let noise = hash_embedding(&format!("{seed}:{tag}"), base.len());
    let mixed: Vec<f64> = base
        .iter()
        .zip(&noise)
        .map(|(&b, &n)| alpha * f64::from(b) + f64::from(n))
        .collect();
    let norm = mixed.iter().map(|v| v * v).sum::<f64>().sqrt();
    mixed.iter().map(|v| (v / norm) as f32).collect()
}

const NOUNS: [&str; 6] = ["car", "truck", "bridge", "boat", "bicycle", "house"];
const COLORS: [&str; 6] = ["red", "blue", "green", "yellow", "white", "black"];
const DATASETS: [&str; 3] = ["coco", "sbu", "vg"];

impl Corpus {
    pub fn generate(spec: &CorpusSpec) -> Corpus {
        let seed = spec.seed;
        let dim = spec.dim;
        let rules = QuestionParseRules::default_rules();

        // category bases and ten descriptions per category
        let mut category_descriptions = Vec::new();
        let mut category_rows = Vec::new();
        let mut bases: Vec<(ImageCategory, Vec<f32>)> = Vec::new();
        for category in ImageCategory::ALL {
            let base = hash_embedding(&format!("{seed}:cat:{}", category.name()), dim);
            let mut descriptions = Vec::new();
            for k in 0..10 {
                let text = format!("a synthetic {} description number {k}", category.name());
                category_rows.push((
                    text.clone(),
                    blend(&base, 4.0, seed, &format!("desc:{}:{k}", category.name())),
                ));
                descriptions.push(text);
            }
            category_descriptions.push((category, descriptions));
            bases.push((category, base));
        }

        let mut images = Vec::new();
        let mut image_rows = Vec::new();
        let mut captions = Vec::new();
        let mut qas = Vec::new();
        let mut text_rows = Vec::new();
        let mut synthetic_rows = Vec::new();

        for i in 0..spec.n_images {
            let image_id = format!("img-{i:05}");
            // text-heavy mix: two of every five images aim at the text prototype
            let category = [
                ImageCategory::Text,
                ImageCategory::People,
                ImageCategory::Text,
                ImageCategory::Objects,
                ImageCategory::Scenes,
            ][i % 5];
            let base = &bases.iter().find(|(c, _)| *c == category).unwrap().1;
            let image_vec = blend(base, 3.0, seed, &format!("img:{image_id}"));
            images.push(ImageRecord {
                image_id: image_id.clone(),
                dataset: DATASETS[i % DATASETS.len()].to_string(),
                category: None,
                embedding_ref: i,
            });
            image_rows.push((image_id.clone(), image_vec.clone()));

            // five captions spanning the score range
            let tie_image = i % 7 == 3;
            let long_image = i % 6 == 2;
            let narrow_margins = i % 9 == 4;
            let alphas: [f64; 5] = if narrow_margins {
                [0.82, 0.80, 0.79, 0.78, 0.20]
            } else {
                [1.2, 0.75, 0.55, 0.38, 0.22]
            };
            let mut tie_row: Option<Vec<f32>> = None;
            for (k, base_alpha) in alphas.iter().enumerate() {
                let prompt_number = k + 1;
                let caption_id = format!("{image_id}-c{prompt_number}");
                let alpha = base_alpha * (0.92 + 0.16 * jitter(seed, &format!("a:{caption_id}")));
                let mut row = blend(&image_vec, alpha, seed, &format!("cap:{caption_id}"));
                if tie_image && prompt_number == 2 {
                    // identical embedding to caption 1: equal scores downstream
                    row = tie_row.clone().expect("caption 1 generated first");
                }
                if tie_image && prompt_number == 1 {
                    tie_row = Some(row.clone());
                }
                let word_count = if long_image && prompt_number == 2 {
                    61 + (jitter(seed, &format!("wc:{caption_id}")) * 10.0) as usize
                } else {
                    6 + prompt_number * 3
                        + (jitter(seed, &format!("wc:{caption_id}")) * 5.0) as usize
                };
                let mut words = vec![
                    "synthetic".to_string(),
                    "caption".to_string(),
                    format!("{prompt_number}"),
                    "of".to_string(),
                    image_id.clone(),
                ];
                while words.len() < word_count {
                    words.push(format!("w{}", words.len()));
                }
                let text = words.join(" ");
                captions.push(CaptionRecord {
                    caption_id: caption_id.clone(),
                    image_id: image_id.clone(),
                    generator_id: if i % 2 == 0 { "gen-a" } else { "gen-b" }.to_string(),
                    prompt_id: format!("{prompt_number}"),
                    text,
                    word_count,
                    score: None,
                    status: CaptionStatus::Raw,
                });
                text_rows.push((caption_id, row));
            }

            // two QA records: one colour question, one that varies
            let noun = NOUNS[(i + 1) % NOUNS.len()];
            let positive = COLORS[i % COLORS.len()];
            let negative = COLORS[(i + 2) % COLORS.len()];
            let q1_id = format!("{image_id}-q1");
            let q1_beta = if i % 4 == 1 { 0.18 } else { 0.45 };
            text_rows.push((
                q1_id.clone(),
                blend(&image_vec, q1_beta, seed, &format!("q:{q1_id}")),
            ));
            let qa1 = QARecord {
                qa_id: q1_id,
                image_id: image_id.clone(),
                question: format!("What color is the {noun} in the image?"),
                positive: positive.to_string(),
                negative: negative.to_string(),
                question_score: None,
                synthetic_caption: None,
                synthetic_score: None,
                status: QaStatus::Raw,
            };

            let q2_id = format!("{image_id}-q2");
            let (question2, positive2, negative2) = match i % 3 {
                // unparseable: no default rule matches
                0 => ("Does this image look pleasant?".to_string(), "yes", "no"),
                1 => (
                    format!("How many {noun}s are in the image?"),
                    "three",
                    "five",
                ),
                _ => (
                    format!("Where is the {noun} in the image?"),
                    "on the left",
                    "by the water",
                ),
            };
            text_rows.push((
                q2_id.clone(),
                blend(&image_vec, 0.42, seed, &format!("q:{q2_id}")),
            ));
            let qa2 = QARecord {
                qa_id: q2_id,
                image_id: image_id.clone(),
                question: question2,
                positive: positive2.to_string(),
                negative: negative2.to_string(),
                question_score: None,
                synthetic_caption: None,
                synthetic_score: None,
                status: QaStatus::Raw,
            };

            // synthetic-caption embeddings for every parseable question;
            // every fifth image gets one below the synthetic threshold
            for qa in [&qa1, &qa2] {
                if let Some(synthetic) = synthesize_caption(qa, &rules) {
                    let gamma = if i % 5 == 2 { 0.24 } else { 0.52 };
                    synthetic_rows.push((
                        synthetic.clone(),
                        blend(&image_vec, gamma, seed, &format!("syn:{}", qa.qa_id)),
                    ));
                }
            }
            qas.push(qa1);
            qas.push(qa2);
        }

        // duplicate synthetic texts can collide (same question+answer on
        // different images is impossible here since ids differ, but keep
        // the store writer happy by deduplicating on text)
        synthetic_rows.sort_by(|a, b| a.0.cmp(&b.0));
        synthetic_rows.dedup_by(|a, b| a.0 == b.0);

        Corpus {
            spec_seed: seed,
            dim,
            images,
            captions,
            qas,
            image_rows,
            text_rows,
            category_descriptions,
            category_rows,
            synthetic_rows,
            use_encoder_stub: spec.use_encoder_stub,
            text_cap_ratio: spec.text_cap_ratio,
        }
    }

    /// Write every corpus file plus a run.toml into `dir`.
    pub fn write(&self, dir: &Path) -> CorpusPaths {
        std::fs::create_dir_all(dir).unwrap();
        write_jsonl(&dir.join("images.jsonl"), &self.images).unwrap();
        write_jsonl(&dir.join("captions.jsonl"), &self.captions).unwrap();
        write_jsonl(&dir.join("qas.jsonl"), &self.qas).unwrap();
        EmbeddingStore::write(dir.join("images.emb"), self.dim, &self.image_rows).unwrap();

        let mut text_rows = self.text_rows.clone();
        if !self.use_encoder_stub {
            text_rows.extend(self.synthetic_rows.iter().cloned());
        }
        EmbeddingStore::write(dir.join("texts.emb"), self.dim, &text_rows).unwrap();
        EmbeddingStore::write(dir.join("categories.emb"), self.dim, &self.category_rows).unwrap();
        EmbeddingStore::write(dir.join("synthetic.emb"), self.dim, &self.synthetic_rows).unwrap();

        let mut category_lines = Vec::new();
        for (category, descriptions) in &self.category_descriptions {
            category_lines.push(serde_json::json!({
                "category": category.name(),
                "descriptions": descriptions,
            }));
        }
        let category_text: String = category_lines
            .iter()
            .map(|v| serde_json::to_string(v).unwrap() + "\n")
            .collect();
        std::fs::write(dir.join("categories.jsonl"), category_text).unwrap();

        let ratio_line = match self.text_cap_ratio {
            Some(r) => format!("text_cap_ratio = {r}\n"),
            None => String::new(),
        };
        let encoder_block = if self.use_encoder_stub {
            format!(
                "\n[encoder]\nkind = \"file_stub\"\naddress = \"synthetic.emb\"\nmodel_tag = \"fixture-stub\"\ntimeout_ms = 5000\nexpected_dim = {}\n",
                self.dim
            )
        } else {
            String::new()
        };
        let config_text = format!(
            r#"seed = {seed}
shard_count = 8
worker_count = 1

[paths]
images = "images.jsonl"
captions = "captions.jsonl"
qas = "qas.jsonl"
image_store = "images.emb"
text_store = "texts.emb"
category_descriptions = "categories.jsonl"
category_store = "categories.emb"
loss_samples = "loss_samples.jsonl"
amber_annotations = "amber_annotations.jsonl"
amber_generative = "amber_generative.jsonl"
amber_discriminative = "amber_discriminative.jsonl"
class_templates = "class_templates.jsonl"
class_prompt_store = "class_prompts.emb"
zeroshot_eval_store = "zeroshot_captions.emb"
zeroshot_labels = "zeroshot_labels.jsonl"
probe_records = "probe_records.jsonl"
probe_store = "probe.emb"
out_dir = "out"

[curation]
{ratio_line}
[pairs]

[loss]
{encoder_block}"#,
            seed = self.spec_seed,
        );
        let config_path = dir.join("run.toml");
        std::fs::write(&config_path, config_text).unwrap();
        write_eval_fixtures(dir, self.spec_seed, self.dim);
        CorpusPaths {
            dir: dir.to_path_buf(),
            config: config_path,
            out_dir: dir.join("out"),
        }
    }
}

/// Small deterministic fixtures for every evaluator subcommand, written
/// next to the curation corpus so one run.toml drives the whole CLI.
pub fn write_eval_fixtures(dir: &Path, seed: u64, dim: usize) {
    // loss samples: plausible sequence log-likelihoods
    let mut loss_lines = Vec::new();
    for i in 0..16 {
        let d = |f: &str| -6.0 + 6.0 * jitter(seed, &format!("loss:{i}:{f}"));
        loss_lines.push(serde_json::json!({
            "id": format!("sample-{i:02}"),
            "logp_pol_pos": d("pp"), "logp_pol_neg": d("pn"),
            "logp_ref_pos": d("rp"), "logp_ref_neg": d("rn"),
        }));
    }
    write_json_lines(&dir.join("loss_samples.jsonl"), &loss_lines);

    // hallucination-metric fixtures: object sets with controlled overlap
    let objects = [
        "car", "tree", "dog", "bench", "river", "sign", "person", "boat",
    ];
    let mut annotations = Vec::new();
    let mut generative = Vec::new();
    for i in 0..8usize {
        let image = format!("amb-{i:02}");
        let truth: Vec<&str> = objects[i % 3..i % 3 + 4].to_vec();
        let distractor = objects[(i % 3 + 5) % objects.len()];
        annotations.push(serde_json::json!({
            "image_id": image,
            "truth_objects": truth,
            "hallu_targets": [distractor],
        }));
        // mention most of the truth plus, on some rows, the distractor
        let mut mentioned: Vec<&str> = truth[..3].to_vec();
        if i % 3 == 0 {
            mentioned.push(distractor);
        }
        generative.push(serde_json::json!({
            "image_id": image,
            "mentioned_objects": mentioned,
        }));
    }
    write_json_lines(&dir.join("amber_annotations.jsonl"), &annotations);
    write_json_lines(&dir.join("amber_generative.jsonl"), &generative);
    let discriminative: Vec<serde_json::Value> = (0..24)
        .map(|i| {
            let gold = if i % 2 == 0 { "yes" } else { "no" };
            let predicted = if i % 5 == 3 {
                if gold == "yes" {
                    "no"
                } else {
                    "yes"
                }
            } else {
                gold
            };
            serde_json::json!({
                "question_id": format!("disc-{i:02}"),
                "predicted": predicted,
                "gold": gold,
            })
        })
        .collect();
    write_json_lines(&dir.join("amber_discriminative.jsonl"), &discriminative);

    // zero-shot: three classes, prompts and caption embeddings near the
    // class direction, a few deliberate confusions
    let classes = ["car", "truck", "bridge"];
    let mut templates = Vec::new();
    let mut prompt_rows: Vec<(String, Vec<f32>)> = Vec::new();
    let mut class_bases: Vec<Vec<f32>> = Vec::new();
    for class in classes {
        let base = hash_embedding(&format!("{seed}:zs:{class}"), dim);
        let prompts = vec![
            format!("a photo of a {class}."),
            format!("a photo of the {class}."),
        ];
        for (k, prompt) in prompts.iter().enumerate() {
            prompt_rows.push((
                prompt.clone(),
                blend(&base, 5.0, seed, &format!("zsp:{class}:{k}")),
            ));
        }
        templates.push(serde_json::json!({"class": class, "prompts": prompts}));
        class_bases.push(base);
    }
    write_json_lines(&dir.join("class_templates.jsonl"), &templates);
    EmbeddingStore::write(dir.join("class_prompts.emb"), dim, &prompt_rows).unwrap();
    let mut eval_rows: Vec<(String, Vec<f32>)> = Vec::new();
    let mut labels = Vec::new();
    for i in 0..12usize {
        let image = format!("zs-{i:02}");
        let gold_ix = i % classes.len();
        // every fourth caption drifts toward the next class
        let aimed_ix = if i % 4 == 3 {
            (gold_ix + 1) % classes.len()
        } else {
            gold_ix
        };
        eval_rows.push((
            image.clone(),
            blend(&class_bases[aimed_ix], 2.5, seed, &format!("zsc:{image}")),
        ));
        labels.push(serde_json::json!({"image_id": image, "gold": classes[gold_ix]}));
    }
    EmbeddingStore::write(dir.join("zeroshot_captions.emb"), dim, &eval_rows).unwrap();
    write_json_lines(&dir.join("zeroshot_labels.jsonl"), &labels);

    // probe: a mix of inverted and non-inverted rows per type
    let mut probe_records = Vec::new();
    let mut probe_rows: Vec<(String, Vec<f32>)> = Vec::new();
    for (t_ix, hallu_type) in ["existence", "attribute", "relationship"]
        .iter()
        .enumerate()
    {
        for i in 0..6usize {
            let image = format!("probe-{hallu_type}-{i}");
            let image_vec = hash_embedding(&format!("{seed}:probe:{image}"), dim);
            let inverted = i % 2 == 0;
            let corrected = i % 4 == 0 || t_ix == 2;
            let (orig_alpha, hallu_alpha) = if corrected { (2.0, 0.4) } else { (0.4, 2.0) };
            probe_rows.push((image.clone(), image_vec.clone()));
            probe_rows.push((
                format!("{image}-orig"),
                blend(&image_vec, orig_alpha, seed, &format!("po:{image}")),
            ));
            probe_rows.push((
                format!("{image}-h"),
                blend(&image_vec, hallu_alpha, seed, &format!("ph:{image}")),
            ));
            probe_records.push(serde_json::json!({
                "image_id": image,
                "original": {
                    "text": "the original caption",
                    "model_loglik": -5.0,
                    "embedding_ref": format!("{image}-orig"),
                },
                "hallucinated": [{
                    "type": hallu_type,
                    "text": "the altered caption",
                    "model_loglik": if inverted { -4.0 } else { -6.0 },
                    "embedding_ref": format!("{image}-h"),
                }],
            }));
        }
    }
    write_json_lines(&dir.join("probe_records.jsonl"), &probe_records);
    EmbeddingStore::write(dir.join("probe.emb"), dim, &probe_rows).unwrap();
}

fn write_json_lines(path: &Path, lines: &[serde_json::Value]) {
    let text: String = lines
        .iter()
        .map(|v| serde_json::to_string(v).unwrap() + "\n")
        .collect();
    std::fs::write(path, text).unwrap();
}
