//! Acceptance suite: one test per shipped criterion, each printing a
//! PASS/FAIL line (visible with --nocapture; cargo's own per-test lines
//! mirror them). Tolerances are pinned in this file, not configurable.

mod common;

use common::run_ok;
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;
use vlpref::amber::amber_composite;
use vlpref::config::RunConfig;
use vlpref::curation::{filter_captions, filter_questions, CurationConfig};
use vlpref::embedding::{clip_score, score_matrix, ClipScore, EmbeddingVector};
use vlpref::hash::{hash_with_seed, unit_f64};
use vlpref::loss::{implicit_reward_margin, loss, LossConfig, LossVariant, PreferenceSample};
use vlpref::pairs::{build_caption_pairs, PairConfig};
use vlpref::records::{
    CaptionRecord, CaptionStatus, PairSource, PreferencePair, QARecord, QaStatus,
};
use vlpref::store::EmbeddingStore;
use vlpref_testkit::{Corpus, CorpusSpec};

/// Consistency tolerance for one-decimal reported tables, plus a guard for
/// binary representation of values like 83.35.
const TABLE_TOLERANCE: f64 = 0.05 + 1e-9;

/// Reported hallucination-benchmark rows: (row id, CHAIR, P, R, F1,
/// composite score). Used purely as published-number consistency fixtures.
const REPORTED_HALLUCINATION_ROWS: &[(&str, f64, f64, f64, f64, f64)] = &[
    ("row-01", 21.6, 92.8, 10.5, 18.9, 48.7),
    ("row-02", 11.5, 74.1, 21.0, 32.7, 60.6),
    ("row-03", 13.6, 90.5, 50.4, 64.7, 75.6),
    ("row-04", 5.6, 88.9, 60.9, 72.3, 83.4),
    ("row-05", 10.6, 95.0, 66.9, 78.5, 84.0),
    ("row-06", 8.8, 84.5, 79.0, 81.7, 86.5),
    ("row-07", 5.5, 90.8, 79.7, 84.9, 89.7),
    ("row-08", 4.6, 84.9, 90.1, 87.4, 91.4),
    ("row-09", 7.8, 93.2, 62.4, 74.7, 83.5),
    ("row-10", 7.2, 68.1, 98.4, 80.5, 86.7),
    ("row-11", 3.7, 84.4, 81.5, 82.9, 89.6),
    ("row-12", 3.8, 92.6, 51.9, 66.5, 81.4),
    ("row-13", 4.2, 88.7, 64.8, 74.9, 85.3),
    ("row-14", 4.8, 92.1, 65.7, 76.7, 86.0),
    ("row-15", 4.7, 91.0, 71.8, 80.3, 87.8),
    ("row-16", 4.4, 95.0, 60.8, 74.1, 84.9),
    ("row-17", 4.0, 93.4, 70.8, 80.5, 88.3),
];

/// Reported zero-shot rows: nine per-dataset accuracies plus the printed
/// average column.
const REPORTED_ZEROSHOT_ROWS: &[(&str, [f64; 9], f64)] = &[
    (
        "row-1",
        [23.2, 34.0, 7.3, 37.9, 45.3, 49.5, 82.7, 50.5, 43.1],
        40.0,
    ),
    (
        "row-2",
        [23.2, 33.4, 7.1, 36.9, 45.1, 49.4, 82.7, 50.3, 42.7],
        39.7,
    ),
    (
        "row-3",
        [30.1, 44.8, 16.3, 42.2, 53.9, 52.1, 84.8, 53.1, 48.8],
        47.4,
    ),
    (
        "row-4",
        [17.1, 15.2, 14.5, 32.6, 31.2, 49.3, 77.9, 45.5, 39.3],
        33.9,
    ),
    (
        "row-5",
        [19.2, 32.6, 23.8, 41.3, 47.4, 48.9, 80.8, 50.2, 49.3],
        43.7,
    ),
    (
        "row-6",
        [14.8, 23.5, 9.1, 35.7, 38.8, 53.2, 81.8, 48.6, 42.0],
        36.7,
    ),
    (
        "row-7",
        [28.6, 40.9, 19.5, 44.3, 52.0, 56.4, 85.5, 52.3, 50.1],
        47.7,
    ),
    (
        "row-8",
        [27.1, 32.5, 11.5, 37.7, 45.0, 43.1, 81.9, 49.0, 46.6],
        41.6,
    ),
    (
        "row-9",
        [32.5, 51.3, 35.8, 50.1, 62.6, 59.3, 88.3, 56.2, 54.8],
        54.5,
    ),
];

#[test]
fn criterion_composite_score_table_consistency() {
    let mut failures = Vec::new();
    for (row, chair, _p, _r, f1, reported) in REPORTED_HALLUCINATION_ROWS {
        let computed = amber_composite(*chair, *f1).unwrap();
        let diff = (computed - reported).abs();
        if diff > TABLE_TOLERANCE {
            failures.push(format!(
                "{row}: computed {computed:.4} vs reported {reported} (diff {diff:.4})"
            ));
        }
    }
    assert!(
        failures.is_empty(),
        "ACCEPTANCE composite-score-table: FAIL\n{}",
        failures.join("\n")
    );
    println!(
        "ACCEPTANCE composite-score-table: PASS ({} rows within {TABLE_TOLERANCE})",
        REPORTED_HALLUCINATION_ROWS.len()
    );
}

// Known defect in the reported table: row-09 prints F1 = 74.7 next to
// P = 93.2, R = 62.4, but 2PR/(P+R) = 74.7517; the source computed F1
// from unrounded precision/recall, so the printed triple misses the 0.05
// consistency bound by 0.0017. The criterion is asserted as specified and
// this row fails honestly; see the decisions ledger.
#[test]
fn criterion_f1_table_consistency() {
    let mut failures = Vec::new();
    for (row, _chair, p, r, f1, _reported) in REPORTED_HALLUCINATION_ROWS {
        let computed = 2.0 * p * r / (p + r);
        let diff = (computed - f1).abs();
        println!("f1-consistency {row}: computed {computed:.4} reported {f1} diff {diff:.4}");
        if diff > TABLE_TOLERANCE {
            failures.push(format!(
                "{row}: computed {computed:.4} vs reported {f1} (diff {diff:.4})"
            ));
        }
    }
    assert!(
        failures.is_empty(),
        "ACCEPTANCE f1-table: FAIL: {} of {} rows outside {TABLE_TOLERANCE}:\n{}",
        failures.len(),
        REPORTED_HALLUCINATION_ROWS.len(),
        failures.join("\n")
    );
    println!(
        "ACCEPTANCE f1-table: PASS ({} rows)",
        REPORTED_HALLUCINATION_ROWS.len()
    );
}

// Known defect in the reported table: four baseline rows print an Avg
// that is 1.5-1.9 points below the mean of their nine entries, and the
// tuned row-3 misses the 0.05 bound by 0.0056 from its own rounding. The
// criterion is asserted as specified and those rows fail honestly; see
// the decisions ledger.
#[test]
fn criterion_zeroshot_average_consistency() {
    let mut failures = Vec::new();
    for (row, accuracies, reported) in REPORTED_ZEROSHOT_ROWS {
        let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
        let diff = (mean - reported).abs();
        println!("zeroshot-avg {row}: mean {mean:.4} reported {reported} diff {diff:.4}");
        if diff > TABLE_TOLERANCE {
            failures.push(format!(
                "{row}: mean {mean:.4} vs reported {reported} (diff {diff:.4})"
            ));
        }
    }
    assert!(
        failures.is_empty(),
        "ACCEPTANCE zeroshot-average: FAIL: {} of {} rows outside {TABLE_TOLERANCE}:\n{}",
        failures.len(),
        REPORTED_ZEROSHOT_ROWS.len(),
        failures.join("\n")
    );
    println!(
        "ACCEPTANCE zeroshot-average: PASS ({} rows)",
        REPORTED_ZEROSHOT_ROWS.len()
    );
}

fn draw(seed: u64, tag: &str, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit_f64(hash_with_seed(seed, tag.as_bytes()))
}

#[test]
fn criterion_loss_gradients_match_finite_differences() {
    let started = Instant::now();
    let step = 1e-5;
    let max_rel_tolerance = 1e-6;
    let seed = 20_240_817u64;
    let mut max_rel = 0.0f64;
    let mut checked_total = 0usize;

    for variant in LossVariant::ALL {
        let mut checked = 0usize;
        let mut attempt = 0usize;
        while checked < 1000 {
            attempt += 1;
            assert!(
                attempt < 10_000,
                "sample generation stalled for {variant:?}"
            );
            let tag = |field: &str| format!("{}:{attempt}:{field}", variant.name());
            let config = LossConfig {
                variant,
                beta: draw(seed, &tag("beta"), 0.05, 0.5),
                label_smoothing: draw(seed, &tag("ls"), 0.0, 0.4),
                slic_delta: draw(seed, &tag("delta"), 0.5, 2.0),
                kto_lambda_pos: draw(seed, &tag("lp"), 0.5, 2.0),
                kto_lambda_neg: draw(seed, &tag("ln"), 0.5, 2.0),
                kto_reference_point: None,
            };
            let sample = PreferenceSample::new(
                draw(seed, &tag("pp"), -5.0, 5.0),
                draw(seed, &tag("pn"), -5.0, 5.0),
                draw(seed, &tag("rp"), -5.0, 5.0),
                draw(seed, &tag("rn"), -5.0, 5.0),
            );
            let h = implicit_reward_margin(&sample).unwrap();
            // skip non-differentiable or zero-gradient neighborhoods where
            // central differences are undefined or pure noise
            match variant {
                LossVariant::Slic if (config.slic_delta - config.beta * h).abs() < 1e-3 => continue,
                LossVariant::Ipo if (h - 1.0 / (2.0 * config.beta)).abs() < 1e-2 => continue,
                _ => {}
            }
            let out = loss(&sample, &config).unwrap();
            assert_eq!(out.grad[2], 0.0, "{variant:?}: frozen-reference gradient");
            assert_eq!(out.grad[3], 0.0, "{variant:?}: frozen-reference gradient");
            // finite differences over the two policy components
            for k in 0..2 {
                let perturb = |delta: f64| {
                    let mut s = sample;
                    match k {
                        0 => s.logp_pol_pos += delta,
                        _ => s.logp_pol_neg += delta,
                    }
                    loss(&s, &config).unwrap().loss
                };
                let fd = (perturb(step) - perturb(-step)) / (2.0 * step);
                let analytic = out.grad[k];
                let scale = analytic.abs().max(fd.abs());
                if scale < 1e-12 {
                    continue; // both sides vanish
                }
                let rel = (analytic - fd).abs() / scale;
                max_rel = max_rel.max(rel);
                assert!(
                    rel <= max_rel_tolerance,
                    "ACCEPTANCE loss-gradcheck: FAIL {variant:?} sample {attempt} component {k}: analytic {analytic:.3e} vs fd {fd:.3e} (rel {rel:.3e})"
                );
            }
            checked += 1;
        }
        checked_total += checked;
    }

    // pinned point values
    let dpo = LossConfig {
        variant: LossVariant::Dpo,
        ..LossConfig::default()
    };
    let zero_margin = PreferenceSample::new(-2.0, -3.0, -2.0, -3.0);
    let at_zero = loss(&zero_margin, &dpo).unwrap().loss;
    assert!(
        (at_zero - std::f64::consts::LN_2).abs() < 1e-12,
        "loss at h=0 was {at_zero}"
    );

    let mut cdpo = LossConfig {
        variant: LossVariant::Cdpo,
        ..LossConfig::default()
    };
    cdpo.label_smoothing = 0.0;
    for i in 0..200 {
        let tag = |f: &str| format!("ls0:{i}:{f}");
        let sample = PreferenceSample::new(
            draw(seed, &tag("pp"), -5.0, 5.0),
            draw(seed, &tag("pn"), -5.0, 5.0),
            draw(seed, &tag("rp"), -5.0, 5.0),
            draw(seed, &tag("rn"), -5.0, 5.0),
        );
        let a = loss(&sample, &cdpo).unwrap();
        let b = loss(&sample, &dpo).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
    }

    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs_f64() < 5.0,
        "gradcheck took {elapsed:?}, budget 5s"
    );
    println!(
        "ACCEPTANCE loss-gradcheck: PASS ({checked_total} samples across 5 variants, max rel err {max_rel:.3e}, {elapsed:?})"
    );
}

fn kept_caption(image: &str, id: String, score: f32, word_count: usize) -> CaptionRecord {
    CaptionRecord {
        caption_id: id,
        image_id: image.to_string(),
        generator_id: "gen-a".into(),
        prompt_id: "1".into(),
        text: vec!["w"; word_count].join(" "),
        word_count,
        score: Some(ClipScore(score)),
        status: CaptionStatus::Kept,
    }
}

/// Independent brute force over all ordered caption pairs.
fn reference_best_pair(
    captions: &[CaptionRecord],
    cfg: &PairConfig,
) -> Option<(String, String, f32)> {
    let mut best: Option<(String, String, f32)> = None;
    for hi in captions {
        for lo in captions {
            if hi.caption_id == lo.caption_id {
                continue;
            }
            let margin = hi.score.unwrap().value() - lo.score.unwrap().value();
            if margin <= cfg.margin_min {
                continue;
            }
            let longest = hi.word_count.max(lo.word_count) as f64;
            let shortest = hi.word_count.min(lo.word_count) as f64;
            if longest / shortest > cfg.length_ratio_max {
                continue;
            }
            let candidate = (hi.caption_id.clone(), lo.caption_id.clone(), margin);
            best = Some(match best.take() {
                None => candidate,
                Some(current)
                    if candidate.2 > current.2
                        || (candidate.2 == current.2
                            && (&candidate.0, &candidate.1) < (&current.0, &current.1)) =>
                {
                    candidate
                }
                Some(current) => current,
            });
        }
    }
    best
}

#[test]
fn criterion_pair_selection_matches_brute_force_reference() {
    let started = Instant::now();
    let cfg = PairConfig::default();
    let seed = 55u64;
    let mut emitted = 0usize;
    for image_ix in 0..600 {
        let image = format!("img-{image_ix:04}");
        let caption_count =
            1 + (unit_f64(hash_with_seed(seed, format!("n:{image}").as_bytes())) * 10.0) as usize;
        let captions: Vec<CaptionRecord> = (0..caption_count.min(10))
            .map(|k| {
                let id = format!("{image}-c{k}");
                let score = draw(seed, &format!("s:{id}"), 20.0, 40.0) as f32;
                let words = 5 + (draw(seed, &format!("w:{id}"), 0.0, 35.0) as usize);
                kept_caption(&image, id, score, words)
            })
            .collect();
        let got = build_caption_pairs(&image, &captions, &cfg);
        let expected = reference_best_pair(&captions, &cfg);
        match (got, expected) {
            (None, None) => {}
            (Some(pair), Some((chosen_id, rejected_id, margin))) => {
                emitted += 1;
                let chosen = captions.iter().find(|c| c.caption_id == chosen_id).unwrap();
                let rejected = captions.iter().find(|c| c.caption_id == rejected_id).unwrap();
                assert_eq!(pair.chosen, chosen.text, "image {image}");
                assert_eq!(pair.rejected, rejected.text, "image {image}");
                assert_eq!(pair.margin, margin, "image {image}");
                // the published selection rules, asserted on every emission
                assert!(pair.margin > 2.0, "image {image}");
                let ratio = chosen.word_count.max(rejected.word_count) as f64
                    / chosen.word_count.min(rejected.word_count) as f64;
                assert!(ratio <= 1.5, "image {image}");
            }
            (got, expected) => panic!(
                "ACCEPTANCE pair-selection: FAIL image {image}: implementation {got:?} vs reference {expected:?}"
            ),
        }
    }
    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs_f64() < 10.0,
        "pair oracle took {elapsed:?}, budget 10s"
    );
    println!(
        "ACCEPTANCE pair-selection: PASS (600 images, {emitted} pairs match the reference, {elapsed:?})"
    );
}

#[test]
fn criterion_threshold_boundaries_are_strict_less_than() {
    let cfg = CurationConfig::default();
    let mut at = kept_caption("i1", "c-at".into(), 28.0, 10);
    at.status = CaptionStatus::Scored;
    let mut below = kept_caption("i1", "c-below".into(), 27.99, 10);
    below.status = CaptionStatus::Scored;
    let filtered = filter_captions(vec![at, below], &cfg).unwrap();
    assert_eq!(
        filtered[0].status,
        CaptionStatus::Kept,
        "caption at 28.0 must be kept"
    );
    assert_eq!(
        filtered[1].status,
        CaptionStatus::DroppedScore,
        "caption at 27.99 must drop"
    );

    // questions: exact cosines 0.25 and 0.2499 against a unit image vector
    let dir = tempfile::tempdir().unwrap();
    let images_path = dir.path().join("i.emb");
    EmbeddingStore::write(&images_path, 2, &[("i1".to_string(), vec![1.0, 0.0])]).unwrap();
    let images = EmbeddingStore::load(&images_path).unwrap();
    let texts_path = dir.path().join("t.emb");
    let sin = |c: f32| (1.0 - f64::from(c) * f64::from(c)).sqrt() as f32;
    EmbeddingStore::write(
        &texts_path,
        2,
        &[
            ("q-at".to_string(), vec![0.25, sin(0.25)]),
            ("q-below".to_string(), vec![0.2499, sin(0.2499)]),
        ],
    )
    .unwrap();
    let texts = EmbeddingStore::load(&texts_path).unwrap();
    let qa = |id: &str| QARecord {
        qa_id: id.to_string(),
        image_id: "i1".into(),
        question: "What color is the car in the image?".into(),
        positive: "red".into(),
        negative: "blue".into(),
        question_score: None,
        synthetic_caption: None,
        synthetic_score: None,
        status: QaStatus::Raw,
    };
    let out = filter_questions(vec![qa("q-at"), qa("q-below")], &images, &texts, &cfg).unwrap();
    assert_eq!(
        out[0].status,
        QaStatus::Scored,
        "question at 25.0 must be retained"
    );
    assert_eq!(out[0].question_score.unwrap().value(), 25.0);
    assert_eq!(
        out[1].status,
        QaStatus::DroppedQuestion,
        "question at 24.99 must drop"
    );
    println!("ACCEPTANCE threshold-boundaries: PASS (28.0/27.99 and 25.0/24.99)");
}

#[test]
fn criterion_pipeline_determinism_across_worker_counts() {
    let started = Instant::now();
    let spec = CorpusSpec {
        n_images: 1000,
        dim: 32,
        seed: 11,
        ..CorpusSpec::default()
    };
    let corpus = Corpus::generate(&spec);
    let dir_one = tempfile::tempdir().unwrap();
    let dir_eight = tempfile::tempdir().unwrap();
    corpus.write(dir_one.path());
    corpus.write(dir_eight.path());

    run_ok(
        dir_one.path(),
        &["pipeline", "--config", "run.toml", "--worker_count", "1"],
    );
    run_ok(
        dir_eight.path(),
        &["pipeline", "--config", "run.toml", "--worker_count", "8"],
    );

    for file in [
        "pairs.jsonl",
        "summary_pipeline.json",
        "captions_ranked.jsonl",
        "images_kept.jsonl",
        "captions_filtered.jsonl",
        "qas_filtered.jsonl",
        "qas_final.jsonl",
    ] {
        let a = std::fs::read(dir_one.path().join("out").join(file)).unwrap();
        let b = std::fs::read(dir_eight.path().join("out").join(file)).unwrap();
        assert!(!a.is_empty(), "{file} empty");
        assert_eq!(
            a, b,
            "ACCEPTANCE pipeline-determinism: FAIL: {file} differs between worker_count 1 and 8"
        );
    }
    let pair_lines = std::fs::read_to_string(dir_one.path().join("out/pairs.jsonl"))
        .unwrap()
        .lines()
        .count();
    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs_f64() < 30.0,
        "determinism run took {elapsed:?}, budget 30s"
    );
    println!(
        "ACCEPTANCE pipeline-determinism: PASS (1000 images, {pair_lines} pairs byte-identical, {elapsed:?})"
    );
}

#[test]
fn criterion_probe_harness_matches_hand_oracles() {
    use vlpref::probe::{
        clip_correction_rate, likelihood_inversions, HallucinatedCaption, HallucinationType,
        ProbeCaption, ProbeRecord,
    };
    // constructed fixture: per type, a known number of inversions and a
    // known number of rows where the original out-scores the hallucination
    let plan: &[(HallucinationType, usize, usize)] = &[
        (HallucinationType::Existence, 10, 7),
        (HallucinationType::Attribute, 6, 3),
        (HallucinationType::Relationship, 8, 8),
    ];
    let mut records = Vec::new();
    let mut rows: Vec<(String, Vec<f32>)> = Vec::new();
    let sin = |c: f32| (1.0 - f64::from(c) * f64::from(c)).sqrt() as f32;
    for (hallu_type, inverted, corrected) in plan {
        for i in 0..(*inverted + 3) {
            let image = format!("{}-{i}", hallu_type.name());
            rows.push((image.clone(), vec![1.0, 0.0]));
            // the first `inverted` rows carry a likelier hallucination;
            // of those, the first `corrected` score below the original
            let inverted_row = i < *inverted;
            let hallu_ll = if inverted_row { -4.0 } else { -6.0 };
            let (orig_cos, hallu_cos) = if i < *corrected {
                (0.8, 0.3)
            } else {
                (0.3, 0.8)
            };
            rows.push((format!("{image}-orig"), vec![orig_cos, sin(orig_cos)]));
            rows.push((format!("{image}-h"), vec![hallu_cos, sin(hallu_cos)]));
            records.push(ProbeRecord {
                image_id: image.clone(),
                original: ProbeCaption {
                    text: "original".into(),
                    model_loglik: -5.0,
                    embedding_ref: format!("{image}-orig"),
                },
                hallucinated: vec![HallucinatedCaption {
                    hallu_type: *hallu_type,
                    text: "hallucinated".into(),
                    model_loglik: hallu_ll,
                    embedding_ref: format!("{image}-h"),
                }],
            });
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let store_path = dir.path().join("probe.emb");
    EmbeddingStore::write(&store_path, 2, &rows).unwrap();
    let store = EmbeddingStore::load(&store_path).unwrap();

    let inversions = likelihood_inversions(&records);
    assert_eq!(inversions.existence, 10);
    assert_eq!(inversions.attribute, 6);
    assert_eq!(inversions.relationship, 8);
    let rates = clip_correction_rate(&records, &store).unwrap();
    assert_eq!(rates.existence, Some(70.0));
    assert_eq!(rates.attribute, Some(50.0));
    assert_eq!(rates.relationship, Some(100.0));
    println!(
        "ACCEPTANCE probe-harness: PASS (inversions 10/6/8, correction 70/50/100; \
         absolute published probe counts require the original captions and model likelihoods \
         and are out of desk-scale reach by design)"
    );
}

// ---------------------------------------------------------------------
// Golden fixture: an independent reference implementation recomputes the
// whole curation path with plain loops and its own parsing/selection
// code, then the CLI pipeline must reproduce its pair file byte for byte.
// ---------------------------------------------------------------------

mod reference {
    use super::*;

    fn dot(a: &[f32], b: &[f32]) -> f64 {
        let mut acc = 0.0f64;
        for i in 0..a.len() {
            acc += f64::from(a[i]) * f64::from(b[i]);
        }
        acc
    }

    fn renorm(row: &[f32]) -> Vec<f32> {
        let inv = 1.0 / dot(row, row).sqrt();
        row.iter().map(|&v| (f64::from(v) * inv) as f32).collect()
    }

    fn score(a: &[f32], b: &[f32]) -> f32 {
        (100.0 * dot(a, b)) as f32
    }

    /// Fixture question forms, parsed with plain string surgery rather
    /// than the production regex rules.
    fn parse(question: &str) -> Option<String> {
        if let Some(mid) = question
            .strip_prefix("What color is ")
            .and_then(|r| r.strip_suffix(" in the image?"))
        {
            return Some(format!("{mid} is"));
        }
        if let Some(mid) = question
            .strip_prefix("How many ")
            .and_then(|r| r.strip_suffix(" are in the image?"))
        {
            return Some(format!("the number of {mid} visible is"));
        }
        if let Some(mid) = question
            .strip_prefix("Where is ")
            .and_then(|r| r.strip_suffix(" in the image?"))
        {
            return Some(format!("{mid} is"));
        }
        None
    }

    pub fn golden_pairs(dir: &Path, config: &RunConfig) -> Vec<PreferencePair> {
        let images = vlpref::records::load_image_records(dir.join("images.jsonl")).unwrap();
        let captions =
            vlpref::records::load_caption_records(dir.join("captions.jsonl"), None).unwrap();
        let qas = vlpref::records::load_qa_records(dir.join("qas.jsonl"), None).unwrap();
        let image_store = EmbeddingStore::load(dir.join("images.emb")).unwrap();
        let text_store = EmbeddingStore::load(dir.join("texts.emb")).unwrap();
        let category_store = EmbeddingStore::load(dir.join("categories.emb")).unwrap();
        let synthetic_store = EmbeddingStore::load(dir.join("synthetic.emb")).unwrap();

        // prototypes: normalized mean of normalized description rows
        let category_text = std::fs::read_to_string(dir.join("categories.jsonl")).unwrap();
        let mut descriptions: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for line in category_text.lines().filter(|l| !l.trim().is_empty()) {
            let value: serde_json::Value = serde_json::from_str(line).unwrap();
            descriptions.insert(
                value["category"].as_str().unwrap().to_string(),
                value["descriptions"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|d| d.as_str().unwrap().to_string())
                    .collect(),
            );
        }
        let mut prototypes: Vec<(String, Vec<f32>)> = Vec::new();
        for name in ["text", "people", "objects", "scenes"] {
            let texts = &descriptions[name];
            let dim = category_store.dim();
            let mut acc = vec![0.0f64; dim];
            for text in texts {
                let row = renorm(category_store.get(text).unwrap());
                for (a, v) in acc.iter_mut().zip(&row) {
                    *a += f64::from(*v);
                }
            }
            let mean: Vec<f32> = acc
                .iter()
                .map(|a| (a / texts.len() as f64) as f32)
                .collect();
            prototypes.push((name.to_string(), renorm(&mean)));
        }

        // categorize and down-sample text images with the seeded draw
        let ratio = f64::from(
            config
                .curation
                .text_cap_ratio
                .expect("fixture sets the ratio"),
        );
        let mut kept_images = Vec::new();
        for image in &images {
            let row = image_store.row(image.embedding_ref).unwrap();
            let mut best = (String::new(), f32::NEG_INFINITY);
            for (name, proto) in &prototypes {
                let s = score(row, proto);
                if s > best.1 {
                    best = (name.clone(), s);
                }
            }
            if best.0 == "text" {
                let u = unit_f64(hash_with_seed(config.seed, image.image_id.as_bytes()));
                if u >= ratio {
                    continue;
                }
            }
            kept_images.push(image.clone());
        }

        let mut pairs: Vec<PreferencePair> = Vec::new();
        for image in &kept_images {
            let image_row = image_store.row(image.embedding_ref).unwrap();

            // captions: score, threshold, then exhaustively pick the best pair
            let mut kept: Vec<(&CaptionRecord, f32)> = Vec::new();
            for caption in captions.iter().filter(|c| c.image_id == image.image_id) {
                let s = score(image_row, text_store.get(&caption.caption_id).unwrap());
                if s < config.curation.caption_score_min
                    || caption.word_count > config.curation.caption_max_words
                {
                    continue;
                }
                kept.push((caption, s));
            }
            let mut best: Option<(&CaptionRecord, f32, &CaptionRecord, f32)> = None;
            for &(hi, sh) in &kept {
                for &(lo, sl) in &kept {
                    if hi.caption_id == lo.caption_id {
                        continue;
                    }
                    let margin = sh - sl;
                    if margin <= config.pairs.margin_min {
                        continue;
                    }
                    let longest = hi.word_count.max(lo.word_count) as f64;
                    let shortest = hi.word_count.min(lo.word_count) as f64;
                    if longest / shortest > config.pairs.length_ratio_max {
                        continue;
                    }
                    let replace = match best {
                        None => true,
                        Some((bh, bsh, bl, bsl)) => {
                            let best_margin = bsh - bsl;
                            margin > best_margin
                                || (margin == best_margin
                                    && (hi.caption_id.as_str(), lo.caption_id.as_str())
                                        < (bh.caption_id.as_str(), bl.caption_id.as_str()))
                        }
                    };
                    if replace {
                        best = Some((hi, sh, lo, sl));
                    }
                }
            }
            if let Some((hi, sh, lo, sl)) = best {
                pairs.push(PreferencePair {
                    pair_id: format!("cap-{}", image.image_id),
                    image_id: image.image_id.clone(),
                    prompt: config.pairs.caption_prompt_template.clone(),
                    chosen: hi.text.clone(),
                    rejected: lo.text.clone(),
                    chosen_score: ClipScore(sh),
                    rejected_score: ClipScore(sl),
                    margin: sh - sl,
                    source: PairSource::Caption,
                });
            }

            // questions: threshold, parse, synthesize, gate
            for qa in qas.iter().filter(|q| q.image_id == image.image_id) {
                let question_score = score(image_row, text_store.get(&qa.qa_id).unwrap());
                if question_score < config.curation.question_score_min {
                    continue;
                }
                let Some(description) = parse(&qa.question) else {
                    continue;
                };
                let synthetic = format!("{description} {}", qa.positive);
                let synthetic_row = synthetic_store
                    .get(&synthetic)
                    .unwrap_or_else(|| panic!("fixture lacks synthetic text {synthetic:?}"));
                let synthetic_score = score(image_row, synthetic_row);
                if synthetic_score < config.pairs.synthetic_score_min {
                    continue;
                }
                pairs.push(PreferencePair {
                    pair_id: format!("qa-{}", qa.qa_id),
                    image_id: qa.image_id.clone(),
                    prompt: config
                        .pairs
                        .qa_prompt_template
                        .replace("{question}", &qa.question),
                    chosen: qa.positive.clone(),
                    rejected: qa.negative.clone(),
                    chosen_score: ClipScore(synthetic_score),
                    rejected_score: ClipScore(0.0),
                    margin: 0.0,
                    source: PairSource::Qa,
                });
            }
        }
        pairs.sort_by(|a, b| {
            a.image_id
                .cmp(&b.image_id)
                .then_with(|| a.pair_id.cmp(&b.pair_id))
        });
        pairs
    }
}

#[test]
fn criterion_golden_fixture_pipeline_reproduces_reference_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = Corpus::generate(&CorpusSpec::default()); // the 20-image fixture
    let paths = corpus.write(dir.path());
    let config = RunConfig::load(&paths.config).unwrap();

    // golden file from the reference implementation
    let golden = reference::golden_pairs(dir.path(), &config);
    assert!(!golden.is_empty(), "fixture must yield pairs");
    assert!(golden.iter().any(|p| p.source == PairSource::Caption));
    assert!(golden.iter().any(|p| p.source == PairSource::Qa));
    let golden_path = dir.path().join("golden_pairs.jsonl");
    let golden_bytes: String = golden
        .iter()
        .map(|p| serde_json::to_string(p).unwrap() + "\n")
        .collect();
    std::fs::write(&golden_path, &golden_bytes).unwrap();

    run_ok(dir.path(), &["pipeline", "--config", "run.toml"]);
    let produced = std::fs::read(dir.path().join("out/pairs.jsonl")).unwrap();
    assert_eq!(
        produced,
        golden_bytes.as_bytes(),
        "ACCEPTANCE golden-fixture: FAIL: pipeline output differs from the reference pairs file"
    );
    println!(
        "ACCEPTANCE golden-fixture: PASS (20-image corpus, {} pairs byte-identical; \
         published corpus-scale pair counts require full-model generation and are \
         represented by this fixture run plus the invariant suite)",
        golden.len()
    );
}

#[test]
fn criterion_store_round_trip_and_batch_scalar_equivalence() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let dim = 64;
    let rows: Vec<(String, Vec<f32>)> = (0..64)
        .map(|i| {
            let row: Vec<f32> = (0..dim)
                .map(|j| {
                    (unit_f64(hash_with_seed(3, format!("{i}:{j}").as_bytes())) * 2.0 - 1.0) as f32
                })
                .collect();
            (format!("row-{i:02}"), row)
        })
        .collect();
    let path_a = dir.path().join("a.emb");
    let path_b = dir.path().join("b.emb");
    EmbeddingStore::write(&path_a, dim, &rows).unwrap();
    let first = EmbeddingStore::load(&path_a).unwrap();
    assert_eq!(first.len(), 64);
    let normalized: Vec<(String, Vec<f32>)> = first
        .ids()
        .iter()
        .map(|id| (id.clone(), first.get(id).unwrap().to_vec()))
        .collect();
    EmbeddingStore::write(&path_b, dim, &normalized).unwrap();
    let second = EmbeddingStore::load(&path_b).unwrap();
    for id in first.ids() {
        assert_eq!(
            first.get(id).unwrap(),
            second.get(id).unwrap(),
            "round trip drifted for {id}"
        );
    }

    // 64x64 batch vs scalar, exact elementwise equality
    let images: Vec<EmbeddingVector> = (0..64).map(|i| first.vector_at(i).unwrap()).collect();
    let texts: Vec<EmbeddingVector> = (0..64).map(|i| second.vector_at(63 - i).unwrap()).collect();
    let matrix = score_matrix(&images, &texts).unwrap();
    for (i, image) in images.iter().enumerate() {
        for (j, text) in texts.iter().enumerate() {
            assert_eq!(
                matrix[i][j],
                clip_score(image, text).unwrap(),
                "batch/scalar mismatch at ({i},{j})"
            );
        }
    }
    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs_f64() < 5.0,
        "store/batch check took {elapsed:?}, budget 5s"
    );
    println!("ACCEPTANCE store-and-batch: PASS (round trip + 64x64 exact equality, {elapsed:?})");
}
