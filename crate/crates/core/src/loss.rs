//! Scalar preference-loss kernels with analytic gradients.
//!
//! Each kernel consumes a [`PreferenceSample`] of four log-probabilities
//! (policy/reference x chosen/rejected) and returns the loss plus the
//! gradient with respect to all four. The reference policy is frozen, so
//! its gradient entries are identically zero. All arithmetic is f64;
//! `-log sigmoid` goes through softplus to stay finite for large |beta*h|.
//!
//! Variants:
//! - `dpo`:  -log sigmoid(beta * h)
//! - `cdpo`: (1-LS) * dpo(h) + LS * dpo(-h)
//! - `ipo`:  (h - 1/(2 beta))^2
//! - `slic`: max(0, delta - beta * h)
//! - `kto`:  lambda+ * (1 - sigmoid(beta * (r+ - z))) +
//!   lambda- * (1 - sigmoid(beta * (z - r-))) with r+/r- the
//!   chosen/rejected log-ratios. The single-sample kernel fixes the
//!   reference point z to 0; batch evaluation may supply one.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("sample field {field} is not finite")]
    NonFinite { field: &'static str },
    #[error("invalid loss config: {message}")]
    InvalidConfig { message: String },
    #[error("batch is empty")]
    EmptyBatch,
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
}

/// Four log-probabilities for one preference pair. Values are sequence-sum
/// log-likelihoods and may be any finite real; they are not required to be
/// non-positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSample {
    pub logp_pol_pos: f64,
    pub logp_pol_neg: f64,
    pub logp_ref_pos: f64,
    pub logp_ref_neg: f64,
}

impl PreferenceSample {
    pub fn new(logp_pol_pos: f64, logp_pol_neg: f64, logp_ref_pos: f64, logp_ref_neg: f64) -> Self {
        Self {
            logp_pol_pos,
            logp_pol_neg,
            logp_ref_pos,
            logp_ref_neg,
        }
    }

    fn check_finite(&self) -> Result<(), LossError> {
        for (field, v) in [
            ("logp_pol_pos", self.logp_pol_pos),
            ("logp_pol_neg", self.logp_pol_neg),
            ("logp_ref_pos", self.logp_ref_pos),
            ("logp_ref_neg", self.logp_ref_neg),
        ] {
            if !v.is_finite() {
                return Err(LossError::NonFinite { field });
            }
        }
        Ok(())
    }

    /// Swap the chosen and rejected responses.
    pub fn swapped(&self) -> Self {
        Self {
            logp_pol_pos: self.logp_pol_neg,
            logp_pol_neg: self.logp_pol_pos,
            logp_ref_pos: self.logp_ref_neg,
            logp_ref_neg: self.logp_ref_pos,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    Dpo,
    Ipo,
    Kto,
    Slic,
    Cdpo,
}

impl LossVariant {
    pub const ALL: [LossVariant; 5] = [
        LossVariant::Dpo,
        LossVariant::Ipo,
        LossVariant::Kto,
        LossVariant::Slic,
        LossVariant::Cdpo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Dpo => "dpo",
            LossVariant::Ipo => "ipo",
            LossVariant::Kto => "kto",
            LossVariant::Slic => "slic",
            LossVariant::Cdpo => "cdpo",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub variant: LossVariant,
    /// KL-control temperature; scales the implicit reward margin.
    pub beta: f64,
    /// cdpo label smoothing, in [0, 0.5).
    pub label_smoothing: f64,
    /// slic hinge margin.
    pub slic_delta: f64,
    pub kto_lambda_pos: f64,
    pub kto_lambda_neg: f64,
    /// Reference point for batch kto evaluation. The single-sample kernel
    /// always uses 0.
    pub kto_reference_point: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: LossVariant::Dpo,
            beta: 0.1,
            label_smoothing: 0.1,
            slic_delta: 1.0,
            kto_lambda_pos: 1.0,
            kto_lambda_neg: 1.0,
            kto_reference_point: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |message: String| Err(LossError::InvalidConfig { message });
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta {} must be positive", self.beta));
        }
        if !(0.0..0.5).contains(&self.label_smoothing) {
            return bad(format!(
                "label_smoothing {} must be in [0, 0.5)",
                self.label_smoothing
            ));
        }
        if !self.slic_delta.is_finite() || self.slic_delta <= 0.0 {
            return bad(format!("slic_delta {} must be positive", self.slic_delta));
        }
        for (name, lambda) in [
            ("kto_lambda_pos", self.kto_lambda_pos),
            ("kto_lambda_neg", self.kto_lambda_neg),
        ] {
            if !lambda.is_finite() || lambda <= 0.0 {
                return bad(format!("{name} {lambda} must be positive"));
            }
        }
        if let Some(z) = self.kto_reference_point {
            if !z.is_finite() {
                return bad("kto_reference_point must be finite".into());
            }
        }
        Ok(())
    }
}

/// Loss value plus the gradient with respect to
/// (logp_pol_pos, logp_pol_neg, logp_ref_pos, logp_ref_neg).
/// The reference entries are identically zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: [f64; 4],
}

/// The implicit reward margin h: the difference of policy-vs-reference
/// log-ratios between chosen and rejected. Antisymmetric under swapping.
pub fn implicit_reward_margin(s: &PreferenceSample) -> Result<f64, LossError> {
    s.check_finite()?;
    Ok((s.logp_pol_pos - s.logp_ref_pos) - (s.logp_pol_neg - s.logp_ref_neg))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x), overflow-free.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Single-sample kernel; kto uses reference point 0.
pub fn loss(s: &PreferenceSample, cfg: &LossConfig) -> Result<LossOutput, LossError> {
    loss_with_reference_point(s, cfg, 0.0)
}

/// Kernel with an explicit kto reference point; other variants ignore it.
pub fn loss_with_reference_point(
    s: &PreferenceSample,
    cfg: &LossConfig,
    kto_z: f64,
) -> Result<LossOutput, LossError> {
    cfg.validate()?;
    s.check_finite()?;
    let beta = cfg.beta;
    let h = (s.logp_pol_pos - s.logp_ref_pos) - (s.logp_pol_neg - s.logp_ref_neg);

    // d/d logp_pol_pos of h is +1 and of logp_pol_neg is -1, so variants
    // acting through h only need dloss/dh.
    let through_h = |loss: f64, dloss_dh: f64| LossOutput {
        loss,
        grad: [dloss_dh, -dloss_dh, 0.0, 0.0],
    };

    let out = match cfg.variant {
        LossVariant::Dpo => {
            let g = sigmoid(-beta * h);
            through_h(softplus(-beta * h), -beta * g)
        }
        LossVariant::Cdpo => {
            let ls = cfg.label_smoothing;
            let loss = (1.0 - ls) * softplus(-beta * h) + ls * softplus(beta * h);
            let dloss_dh = -beta * ((1.0 - ls) * sigmoid(-beta * h) - ls * sigmoid(beta * h));
            through_h(loss, dloss_dh)
        }
        LossVariant::Ipo => {
            let target = 1.0 / (2.0 * beta);
            let diff = h - target;
            through_h(diff * diff, 2.0 * diff)
        }
        LossVariant::Slic => {
            let margin = cfg.slic_delta - beta * h;
            if margin > 0.0 {
                through_h(margin, -beta)
            } else {
                through_h(0.0, 0.0)
            }
        }
        LossVariant::Kto => {
            let r_pos = s.logp_pol_pos - s.logp_ref_pos;
            let r_neg = s.logp_pol_neg - s.logp_ref_neg;
            let u = beta * (r_pos - kto_z);
            let v = beta * (kto_z - r_neg);
            let (su, sv) = (sigmoid(u), sigmoid(v));
            let loss = cfg.kto_lambda_pos * (1.0 - su) + cfg.kto_lambda_neg * (1.0 - sv);
            let d_pos = -cfg.kto_lambda_pos * beta * su * (1.0 - su);
            let d_neg = cfg.kto_lambda_neg * beta * sv * (1.0 - sv);
            LossOutput {
                loss,
                grad: [d_pos, d_neg, 0.0, 0.0],
            }
        }
    };
    Ok(out)
}

/// Mean loss over a batch with f64 accumulation in sample order, plus the
/// per-sample outputs (identical to the scalar path).
pub fn batch_loss(
    samples: &[PreferenceSample],
    cfg: &LossConfig,
) -> Result<(f64, Vec<LossOutput>), LossError> {
    let z = cfg.kto_reference_point.unwrap_or(0.0);
    batch_loss_with_reference_point(samples, cfg, z)
}

pub fn batch_loss_with_reference_point(
    samples: &[PreferenceSample],
    cfg: &LossConfig,
    kto_z: f64,
) -> Result<(f64, Vec<LossOutput>), LossError> {
    if samples.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mut outputs = Vec::with_capacity(samples.len());
    let mut acc = 0.0f64;
    for s in samples {
        let out = loss_with_reference_point(s, cfg, kto_z)?;
        acc += out.loss;
        outputs.push(out);
    }
    Ok((acc / samples.len() as f64, outputs))
}

/// One line of a loss sample file: the four log-probabilities plus an
/// optional sample id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSampleRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub logp_pol_pos: f64,
    pub logp_pol_neg: f64,
    pub logp_ref_pos: f64,
    pub logp_ref_neg: f64,
}

impl LossSampleRecord {
    pub fn sample(&self) -> PreferenceSample {
        PreferenceSample {
            logp_pol_pos: self.logp_pol_pos,
            logp_pol_neg: self.logp_pol_neg,
            logp_ref_pos: self.logp_ref_pos,
            logp_ref_neg: self.logp_ref_neg,
        }
    }
}

pub fn load_loss_samples(path: impl AsRef<Path>) -> Result<Vec<LossSampleRecord>, LossError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| LossError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (ix, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            return Err(LossError::Schema {
                path: path.to_path_buf(),
                line: ix + 1,
                message: "blank line".into(),
            });
        }
        let record: LossSampleRecord =
            serde_json::from_str(line).map_err(|e| LossError::Schema {
                path: path.to_path_buf(),
                line: ix + 1,
                message: e.to_string(),
            })?;
        record
            .sample()
            .check_finite()
            .map_err(|e| LossError::Schema {
                path: path.to_path_buf(),
                line: ix + 1,
                message: e.to_string(),
            })?;
        out.push(record);
    }
    Ok(out)
}
