//! Pair filtering: select the best caption preference pair per image under
//! margin and length-similarity rules, and gate QA pairs by regex question
//! parsing plus synthetic-caption scoring.

use crate::embedding::{clip_score, ClipScore, EmbeddingError, EmbeddingVector};
use crate::encoder::{EncoderError, TextEmbedder};
use crate::records::{
    CaptionRecord, CaptionStatus, PairSource, PreferencePair, QARecord, QaStatus,
};
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PairError {
    #[error("{path}:{line}: invalid pattern: {message}")]
    InvalidPattern {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("qa {qa_id} has status {status}; only scored records enter pair building")]
    InvalidStatus { qa_id: String, status: String },
    #[error("invalid pair config: {message}")]
    InvalidConfig { message: String },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Pair-filtering thresholds and prompt templates.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairConfig {
    /// Caption pairs need a score difference strictly greater than this.
    pub margin_min: f32,
    /// Word-count ratio bound quantifying "similar length".
    pub length_ratio_max: f64,
    /// Synthetic captions scoring strictly below this drop the QA pair.
    pub synthetic_score_min: f32,
    /// Prompt attached to QA pairs; `{question}` expands to the question.
    pub qa_prompt_template: String,
    /// Prompt attached to caption pairs.
    pub caption_prompt_template: String,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            margin_min: 2.0,
            length_ratio_max: 1.5,
            synthetic_score_min: 28.0,
            qa_prompt_template: "{question}".into(),
            caption_prompt_template: "Describe this image in detail.".into(),
        }
    }
}

impl PairConfig {
    pub fn validate(&self) -> Result<(), PairError> {
        if !self.margin_min.is_finite() || self.margin_min <= 0.0 {
            return Err(PairError::InvalidConfig {
                message: "margin_min must be positive".into(),
            });
        }
        if !self.length_ratio_max.is_finite() || self.length_ratio_max < 1.0 {
            return Err(PairError::InvalidConfig {
                message: "length_ratio_max must be at least 1".into(),
            });
        }
        if self.synthetic_score_min < 0.0 {
            return Err(PairError::InvalidConfig {
                message: "synthetic_score_min must be non-negative".into(),
            });
        }
        Ok(())
    }
}

/// One question-parsing rule: a pattern plus a template with `$n` capture
/// substitutions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParseRuleSpec {
    pub pattern: String,
    pub template: String,
}

/// An ordered rule list; the first matching pattern wins.
#[derive(Debug, Clone)]
pub struct QuestionParseRules {
    rules: Vec<(Regex, String)>,
}

impl QuestionParseRules {
    pub fn from_specs(specs: &[ParseRuleSpec]) -> Result<Self, PairError> {
        let mut rules = Vec::with_capacity(specs.len());
        for (ix, spec) in specs.iter().enumerate() {
            let regex = Regex::new(&spec.pattern).map_err(|e| PairError::InvalidPattern {
                path: PathBuf::from("<inline>"),
                line: ix + 1,
                message: e.to_string(),
            })?;
            rules.push((regex, spec.template.clone()));
        }
        Ok(Self { rules })
    }

    pub fn from_pairs(pairs: &[(&str, &str)]) -> Result<Self, PairError> {
        let specs: Vec<ParseRuleSpec> = pairs
            .iter()
            .map(|(p, t)| ParseRuleSpec {
                pattern: p.to_string(),
                template: t.to_string(),
            })
            .collect();
        Self::from_specs(&specs)
    }

    /// Load rules from a JSONL file of `{pattern, template}` objects,
    /// applied in file order. Patterns are compiled eagerly so bad rules
    /// fail at load time, not at match time.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PairError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| PairError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut rules = Vec::new();
        for (ix, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let spec: ParseRuleSpec =
                serde_json::from_str(line).map_err(|e| PairError::InvalidPattern {
                    path: path.to_path_buf(),
                    line: ix + 1,
                    message: e.to_string(),
                })?;
            let regex = Regex::new(&spec.pattern).map_err(|e| PairError::InvalidPattern {
                path: path.to_path_buf(),
                line: ix + 1,
                message: e.to_string(),
            })?;
            rules.push((regex, spec.template));
        }
        Ok(Self { rules })
    }

    /// The built-in rule set covering common What/Which/Where/Who/How-many
    /// question forms. Templates produce a declarative stem so that
    /// appending the positive answer reads as a caption.
    pub fn default_rules() -> Self {
        let pairs: &[(&str, &str)] = &[
            (
                r"(?i)^what (?:color|colour) (?:is|are) (.+?)(?: in (?:the|this) (?:image|picture|photo))?\?$",
                "$1 is",
            ),
            (
                r"(?i)^what is (.+?) holding(?: in (?:the|this) (?:image|picture|photo))?\?$",
                "$1 is holding",
            ),
            (
                r"(?i)^what (?:is|are) (.+?) doing(?: in (?:the|this) (?:image|picture|photo))?\?$",
                "$1 is",
            ),
            (
                r"(?i)^what (?:type|kind) of (.+?) is (?:shown|visible|pictured)(?: in (?:the|this) (?:image|picture|photo))?\?$",
                "the $1 shown is",
            ),
            (
                r"(?i)^where (?:is|are) (.+?)(?: located)?(?: in (?:the|this) (?:image|picture|photo))?\?$",
                "$1 is",
            ),
            (
                r"(?i)^how many (.+?) are (?:there )?(?:visible )?in (?:the|this) (?:image|picture|photo)\?$",
                "the number of $1 visible is",
            ),
            (
                r"(?i)^who is (.+?)(?: in (?:the|this) (?:image|picture|photo))?\?$",
                "$1 is",
            ),
            (
                r"(?i)^which (.+?) (?:is|are) (?:shown|visible|present)(?: in (?:the|this) (?:image|picture|photo))?\?$",
                "the $1 shown is",
            ),
        ];
        Self::from_pairs(pairs).expect("built-in rules compile")
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    fn apply(&self, question: &str) -> Option<String> {
        for (regex, template) in &self.rules {
            if let Some(caps) = regex.captures(question) {
                let mut out = String::new();
                caps.expand(template, &mut out);
                return Some(out);
            }
        }
        None
    }
}

/// First matching rule's template filled with captures; `None` when no rule
/// matches (unparseable questions are dropped, never guessed).
pub fn parse_question_to_description(question: &str, rules: &QuestionParseRules) -> Option<String> {
    if question.trim().is_empty() {
        return None;
    }
    rules.apply(question)
}

/// The declarative synthetic caption for a QA record: parsed description
/// plus the positive answer.
pub fn synthesize_caption(qa: &QARecord, rules: &QuestionParseRules) -> Option<String> {
    parse_question_to_description(&qa.question, rules)
        .map(|description| format!("{description} {}", qa.positive))
}

/// Select the best caption pair for one image among all ordered (hi, lo)
/// combinations: the margin must exceed `margin_min`, the word-count ratio
/// must stay within `length_ratio_max`, and among qualifying pairs the
/// largest margin wins with ties broken by (chosen, rejected) caption ids
/// ascending. Only kept captions participate. `None` when nothing
/// qualifies; a valid outcome, not an error.
pub fn build_caption_pairs(
    image_id: &str,
    captions: &[CaptionRecord],
    cfg: &PairConfig,
) -> Option<PreferencePair> {
    let kept: Vec<&CaptionRecord> = captions
        .iter()
        .filter(|c| c.status == CaptionStatus::Kept)
        .collect();
    let mut best: Option<(f32, &CaptionRecord, &CaptionRecord)> = None;
    for &hi in &kept {
        for &lo in &kept {
            if hi.caption_id == lo.caption_id {
                continue;
            }
            let (sh, sl) = (hi.score?.value(), lo.score?.value());
            let margin = sh - sl;
            if margin <= cfg.margin_min {
                continue;
            }
            let (wa, wb) = (hi.word_count, lo.word_count);
            let ratio = wa.max(wb) as f64 / wa.min(wb).max(1) as f64;
            if ratio > cfg.length_ratio_max {
                continue;
            }
            let better = match &best {
                None => true,
                Some((bm, bh, bl)) => {
                    margin > *bm
                        || (margin == *bm
                            && (hi.caption_id.as_str(), lo.caption_id.as_str())
                                < (bh.caption_id.as_str(), bl.caption_id.as_str()))
                }
            };
            if better {
                best = Some((margin, hi, lo));
            }
        }
    }
    best.map(|(margin, hi, lo)| PreferencePair {
        pair_id: format!("cap-{image_id}"),
        image_id: image_id.to_string(),
        prompt: cfg.caption_prompt_template.clone(),
        chosen: hi.text.clone(),
        rejected: lo.text.clone(),
        chosen_score: hi.score.expect("kept captions are scored"),
        rejected_score: lo.score.expect("kept captions are scored"),
        margin,
        source: PairSource::Caption,
    })
}

/// Gate one scored QA record: parse the question, build the synthetic
/// caption, score it against the image, and emit a pair when the score
/// clears `synthetic_score_min`. Parse failures and low scores mark the
/// record dropped_answer. Returns the updated record and the pair, if any.
pub fn build_qa_pair(
    mut qa: QARecord,
    rules: &QuestionParseRules,
    image: &EmbeddingVector,
    embedder: &dyn TextEmbedder,
    cfg: &PairConfig,
) -> Result<(QARecord, Option<PreferencePair>), PairError> {
    if qa.status != QaStatus::Scored {
        return Err(PairError::InvalidStatus {
            qa_id: qa.qa_id.clone(),
            status: format!("{:?}", qa.status),
        });
    }
    let Some(synthetic) = synthesize_caption(&qa, rules) else {
        qa.status = QaStatus::DroppedAnswer;
        return Ok((qa, None));
    };
    qa.synthetic_caption = Some(synthetic.clone());
    let embedded = embedder.embed_texts(std::slice::from_ref(&synthetic))?;
    let score = clip_score(image, &embedded[0])?;
    Ok(finish_qa_pair(qa, score, cfg))
}

/// Second half of the QA gate, split out so the pipeline can batch the
/// synthetic-caption embedding calls per shard.
pub fn finish_qa_pair(
    mut qa: QARecord,
    synthetic_score: ClipScore,
    cfg: &PairConfig,
) -> (QARecord, Option<PreferencePair>) {
    qa.synthetic_score = Some(synthetic_score);
    if synthetic_score.value() < cfg.synthetic_score_min {
        qa.status = QaStatus::DroppedAnswer;
        return (qa, None);
    }
    qa.status = QaStatus::Kept;
    let prompt = cfg.qa_prompt_template.replace("{question}", &qa.question);
    let pair = PreferencePair {
        pair_id: format!("qa-{}", qa.qa_id),
        image_id: qa.image_id.clone(),
        prompt,
        chosen: qa.positive.clone(),
        rejected: qa.negative.clone(),
        chosen_score: synthetic_score,
        rejected_score: ClipScore(0.0),
        margin: 0.0,
        source: PairSource::Qa,
    };
    (qa, Some(pair))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::EmbeddingStore;
    use tempfile::tempdir;

    fn kept(id: &str, score: f32, words: usize) -> CaptionRecord {
        CaptionRecord {
            caption_id: id.into(),
            image_id: "i1".into(),
            generator_id: "gen-a".into(),
            prompt_id: "1".into(),
            text: vec!["w"; words].join(" "),
            word_count: words,
            score: Some(ClipScore(score)),
            status: CaptionStatus::Kept,
        }
    }

    #[test]
    fn margin_not_exceeded_yields_no_pair() {
        let cfg = PairConfig::default();
        let captions = [kept("c1", 30.0, 10), kept("c2", 29.0, 10)];
        assert!(build_caption_pairs("i1", &captions, &cfg).is_none());
    }

    #[test]
    fn margin_exactly_at_threshold_yields_no_pair() {
        let cfg = PairConfig::default();
        let captions = [kept("c1", 30.0, 10), kept("c2", 28.0, 10)];
        assert!(build_caption_pairs("i1", &captions, &cfg).is_none());
    }

    #[test]
    fn picks_max_margin_pair() {
        let cfg = PairConfig::default();
        let captions = [
            kept("c1", 33.0, 10),
            kept("c2", 30.5, 10),
            kept("c3", 28.1, 10),
        ];
        // brute-force oracle over all ordered pairs
        let mut oracle: Option<(f32, &str, &str)> = None;
        for hi in &captions {
            for lo in &captions {
                if hi.caption_id == lo.caption_id {
                    continue;
                }
                let margin = hi.score.unwrap().value() - lo.score.unwrap().value();
                if margin > cfg.margin_min {
                    let candidate = (margin, hi.caption_id.as_str(), lo.caption_id.as_str());
                    oracle = match oracle {
                        None => Some(candidate),
                        Some(best) => {
                            if candidate.0 > best.0
                                || (candidate.0 == best.0
                                    && (candidate.1, candidate.2) < (best.1, best.2))
                            {
                                Some(candidate)
                            } else {
                                Some(best)
                            }
                        }
                    };
                }
            }
        }
        let pair = build_caption_pairs("i1", &captions, &cfg).unwrap();
        let (margin, chosen, rejected) = oracle.unwrap();
        assert_eq!(pair.margin, margin);
        assert!((pair.margin - 4.9).abs() < 1e-4);
        assert_eq!(chosen, "c1");
        assert_eq!(rejected, "c3");
        assert_eq!(pair.chosen, captions[0].text);
        assert_eq!(pair.source, PairSource::Caption);
    }

    #[test]
    fn length_ratio_gate_blocks_pair() {
        let cfg = PairConfig::default();
        let captions = [kept("c1", 33.0, 100), kept("c2", 28.0, 20)];
        assert!(build_caption_pairs("i1", &captions, &cfg).is_none());
    }

    #[test]
    fn length_ratio_at_bound_is_allowed() {
        let cfg = PairConfig::default();
        let captions = [kept("c1", 33.0, 30), kept("c2", 28.0, 20)]; // ratio exactly 1.5
        assert!(build_caption_pairs("i1", &captions, &cfg).is_some());
    }

    #[test]
    fn non_kept_captions_do_not_participate() {
        let cfg = PairConfig::default();
        let mut dropped = kept("c2", 20.0, 10);
        dropped.status = CaptionStatus::DroppedScore;
        let captions = [kept("c1", 33.0, 10), dropped];
        assert!(build_caption_pairs("i1", &captions, &cfg).is_none());
    }

    #[test]
    fn tie_breaks_lexicographically() {
        let cfg = PairConfig::default();
        // two qualifying pairs with identical margins
        let captions = [
            kept("b-hi", 33.0, 10),
            kept("a-hi", 33.0, 10),
            kept("z-lo", 28.0, 10),
        ];
        let pair = build_caption_pairs("i1", &captions, &cfg).unwrap();
        assert_eq!(pair.pair_id, "cap-i1");
        assert_eq!(pair.chosen, captions[1].text);
        // chosen id must be the lexicographically smaller of the tied pair
        assert_eq!(pair.chosen_score.value(), 33.0);
    }

    #[test]
    fn spec_rule_parses_question() {
        let rules = QuestionParseRules::from_pairs(&[(
            r"What color is (.+?) in the image\?",
            "a photo of $1",
        )])
        .unwrap();
        let got = parse_question_to_description("What color is the bridge in the image?", &rules);
        assert_eq!(got.as_deref(), Some("a photo of the bridge"));
    }

    #[test]
    fn unmatched_question_yields_none() {
        let rules = QuestionParseRules::default_rules();
        assert_eq!(
            parse_question_to_description("Is the scene outdoors?", &rules),
            None
        );
    }

    #[test]
    fn first_matching_rule_wins() {
        let rules = QuestionParseRules::from_pairs(&[
            (r"What (.+)\?", "first $1"),
            (r"What color (.+)\?", "second $1"),
        ])
        .unwrap();
        let got = parse_question_to_description("What color is the sky?", &rules).unwrap();
        assert!(got.starts_with("first "));
    }

    #[test]
    fn invalid_pattern_fails_at_load() {
        let err = QuestionParseRules::from_pairs(&[(r"([", "x")]).unwrap_err();
        assert!(matches!(err, PairError::InvalidPattern { .. }));
    }

    #[test]
    fn rules_round_trip_through_file() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("rules.jsonl");
        std::fs::write(
            &path,
            "{\"pattern\":\"^Where is (.+)\\\\?$\",\"template\":\"$1 is\"}\n",
        )
        .unwrap();
        let rules = QuestionParseRules::load(&path).unwrap();
        assert_eq!(rules.len(), 1);
        assert_eq!(
            parse_question_to_description("Where is the cat?", &rules).as_deref(),
            Some("the cat is")
        );
    }

    #[test]
    fn default_rules_cover_common_forms() {
        let rules = QuestionParseRules::default_rules();
        let cases = [
            ("What color is the car in the image?", "the car is"),
            ("What is the man holding?", "the man is holding"),
            ("What is the dog doing in this picture?", "the dog is"),
            ("Where is the cat in the image?", "the cat is"),
            (
                "How many dogs are in the image?",
                "the number of dogs visible is",
            ),
            ("Who is the person in the photo?", "the person is"),
        ];
        for (question, expected) in cases {
            assert_eq!(
                parse_question_to_description(question, &rules).as_deref(),
                Some(expected),
                "question: {question}"
            );
        }
    }

    fn scored_qa(question: &str) -> QARecord {
        QARecord {
            qa_id: "q1".into(),
            image_id: "i1".into(),
            question: question.into(),
            positive: "red".into(),
            negative: "blue".into(),
            question_score: Some(ClipScore(30.0)),
            synthetic_caption: None,
            synthetic_score: None,
            status: QaStatus::Scored,
        }
    }

    /// Embedder fixture with one entry per exact text.
    fn stub_store(dir: &std::path::Path, entries: &[(&str, f32)]) -> EmbeddingStore {
        let rows: Vec<(String, Vec<f32>)> = entries
            .iter()
            .map(|(text, cos)| {
                let sin = (1.0 - f64::from(*cos) * f64::from(*cos)).sqrt() as f32;
                (text.to_string(), vec![*cos, sin])
            })
            .collect();
        let path = dir.join("stub.emb");
        EmbeddingStore::write(&path, 2, &rows).unwrap();
        EmbeddingStore::load(&path).unwrap()
    }

    #[test]
    fn parse_failure_drops_answer() {
        let dir = tempdir().unwrap();
        let stub = stub_store(dir.path(), &[("unused", 0.5)]);
        let image = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
        let (qa, pair) = build_qa_pair(
            scored_qa("Is this nice?"),
            &QuestionParseRules::default_rules(),
            &image,
            &stub,
            &PairConfig::default(),
        )
        .unwrap();
        assert!(pair.is_none());
        assert_eq!(qa.status, QaStatus::DroppedAnswer);
        assert_eq!(qa.synthetic_caption, None);
    }

    #[test]
    fn low_synthetic_score_drops_answer() {
        let dir = tempdir().unwrap();
        // synthetic caption "the car is red" scores 27.9 < 28.0
        let stub = stub_store(dir.path(), &[("the car is red", 0.279)]);
        let image = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
        let (qa, pair) = build_qa_pair(
            scored_qa("What color is the car in the image?"),
            &QuestionParseRules::default_rules(),
            &image,
            &stub,
            &PairConfig::default(),
        )
        .unwrap();
        assert!(pair.is_none());
        assert_eq!(qa.status, QaStatus::DroppedAnswer);
        assert_eq!(qa.synthetic_caption.as_deref(), Some("the car is red"));
        assert!(qa.synthetic_score.unwrap().value() < 28.0);
    }

    #[test]
    fn passing_synthetic_score_emits_pair() {
        let dir = tempdir().unwrap();
        let stub = stub_store(dir.path(), &[("the car is red", 0.312)]);
        let image = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
        let (qa, pair) = build_qa_pair(
            scored_qa("What color is the car in the image?"),
            &QuestionParseRules::default_rules(),
            &image,
            &stub,
            &PairConfig::default(),
        )
        .unwrap();
        let pair = pair.unwrap();
        assert_eq!(qa.status, QaStatus::Kept);
        assert_eq!(pair.pair_id, "qa-q1");
        assert_eq!(pair.prompt, "What color is the car in the image?");
        assert_eq!(pair.chosen, "red");
        assert_eq!(pair.rejected, "blue");
        assert_eq!(pair.source, PairSource::Qa);
        assert_eq!(pair.rejected_score.value(), 0.0);
        assert_eq!(pair.margin, 0.0);
        assert!((pair.chosen_score.value() - 31.2).abs() < 0.05);
    }

    #[test]
    fn unscored_qa_is_rejected() {
        let dir = tempdir().unwrap();
        let stub = stub_store(dir.path(), &[("x", 0.5)]);
        let image = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
        let mut qa = scored_qa("What color is the car in the image?");
        qa.status = QaStatus::Raw;
        let err = build_qa_pair(
            qa,
            &QuestionParseRules::default_rules(),
            &image,
            &stub,
            &PairConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, PairError::InvalidStatus { .. }));
    }
}
