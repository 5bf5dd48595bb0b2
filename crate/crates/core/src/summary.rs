//! Machine-readable run summaries: per-stage record accounting, the
//! effective config hash, and pair counts, written as pretty JSON so two
//! runs can be diffed directly.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SummaryError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("stage {stage}: records_in {records_in} != kept {kept} + dropped {dropped}")]
    Inconsistent {
        stage: String,
        records_in: usize,
        kept: usize,
        dropped: usize,
    },
}

/// One stage's accounting: every input record is either kept or dropped
/// for exactly one reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSummary {
    pub name: String,
    pub records_in: usize,
    pub kept: usize,
    pub dropped: BTreeMap<String, usize>,
}

impl StageSummary {
    pub fn new(name: impl Into<String>, records_in: usize, kept: usize) -> Self {
        Self {
            name: name.into(),
            records_in,
            kept,
            dropped: BTreeMap::new(),
        }
    }

    pub fn drop_reason(mut self, reason: impl Into<String>, count: usize) -> Self {
        if count > 0 {
            *self.dropped.entry(reason.into()).or_insert(0) += count;
        }
        self
    }

    pub fn dropped_total(&self) -> usize {
        self.dropped.values().sum()
    }

    pub fn check(&self) -> Result<(), SummaryError> {
        let dropped = self.dropped_total();
        if self.records_in != self.kept + dropped {
            return Err(SummaryError::Inconsistent {
                stage: self.name.clone(),
                records_in: self.records_in,
                kept: self.kept,
                dropped,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct PairCounts {
    pub caption: usize,
    pub qa: usize,
    pub total: usize,
}

/// The per-run summary. Contains no timing and no worker count, so two
/// runs of the same semantic config are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub shard_count: usize,
    pub stages: Vec<StageSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_counts: Option<PairCounts>,
}

impl RunSummary {
    pub fn new(
        command: impl Into<String>,
        config_hash: String,
        seed: u64,
        shard_count: usize,
    ) -> Self {
        Self {
            command: command.into(),
            config_hash,
            seed,
            shard_count,
            stages: Vec::new(),
            pair_counts: None,
        }
    }

    pub fn push_stage(&mut self, stage: StageSummary) -> Result<(), SummaryError> {
        stage.check()?;
        self.stages.push(stage);
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), SummaryError> {
        let path = path.as_ref();
        for stage in &self.stages {
            stage.check()?;
        }
        let json = serde_json::to_string_pretty(self).expect("summary serializes");
        std::fs::write(path, json + "\n").map_err(|source| SummaryError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SummaryError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| SummaryError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(serde_json::from_str(&text).expect("summary parses"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_accounting_must_balance() {
        let good = StageSummary::new("caption_filter", 10, 7)
            .drop_reason("dropped_score", 2)
            .drop_reason("dropped_length", 1);
        assert!(good.check().is_ok());
        let bad = StageSummary::new("caption_filter", 10, 7).drop_reason("dropped_score", 2);
        assert!(matches!(
            bad.check().unwrap_err(),
            SummaryError::Inconsistent { .. }
        ));
    }

    #[test]
    fn zero_count_reasons_are_omitted() {
        let stage = StageSummary::new("x", 5, 5).drop_reason("nothing", 0);
        assert!(stage.dropped.is_empty());
    }

    #[test]
    fn summary_round_trips_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let path_a = dir.path().join("a.json");
        let path_b = dir.path().join("b.json");
        let mut summary = RunSummary::new("pipeline", "abc123".into(), 7, 4);
        summary
            .push_stage(StageSummary::new("rank", 100, 100))
            .unwrap();
        summary
            .push_stage(
                StageSummary::new("caption_filter", 100, 60)
                    .drop_reason("dropped_score", 30)
                    .drop_reason("dropped_length", 10),
            )
            .unwrap();
        summary.pair_counts = Some(PairCounts {
            caption: 12,
            qa: 3,
            total: 15,
        });
        summary.write(&path_a).unwrap();
        summary.write(&path_b).unwrap();
        assert_eq!(
            std::fs::read(&path_a).unwrap(),
            std::fs::read(&path_b).unwrap()
        );
        assert_eq!(RunSummary::load(&path_a).unwrap(), summary);
    }
}
