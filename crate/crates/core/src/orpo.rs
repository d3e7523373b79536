//! Odds-ratio preference loss over token log-probabilities.
//!
//! A [`ScoredSequence`] holds per-token log-probabilities for prompt and
//! completion together; tokens before `boundary` belong to the prompt and
//! never enter the loss. The loss for a pair is
//!
//! ```text
//! total = nll(chosen) + λ · softplus(-(logit P_w - logit P_l))
//! ```
//!
//! where `nll` is the mean negative completion log-probability and `P` is
//! the sequence likelihood, either length-normalized (geometric mean, the
//! default) or the raw product, clamped to `(ε, 1 - ε)`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CLAMP_EPS: f64 = 1e-12;
pub const DEFAULT_LAMBDA: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrpoError {
    #[error("sequence has no completion tokens (boundary {boundary}, length {len})")]
    EmptyCompletion { boundary: usize, len: usize },
    #[error("log-probability {value} at token {index} is not finite and non-positive")]
    BadLogprob { index: usize, value: f64 },
    #[error("probability {0} is outside (0, 1)")]
    ProbabilityOutOfRange(f64),
    #[error("lambda {0} must be finite and non-negative")]
    BadLambda(f64),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("reading {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSequence {
    pub token_logprobs: Vec<f64>,
    /// Index of the first completion token.
    pub boundary: usize,
}

impl ScoredSequence {
    pub fn new(token_logprobs: Vec<f64>, boundary: usize) -> Result<Self, OrpoError> {
        let seq = Self {
            token_logprobs,
            boundary,
        };
        seq.check()?;
        Ok(seq)
    }

    /// A sequence with no prompt tokens.
    pub fn completion_only(token_logprobs: Vec<f64>) -> Result<Self, OrpoError> {
        Self::new(token_logprobs, 0)
    }

    pub fn check(&self) -> Result<(), OrpoError> {
        if self.boundary >= self.token_logprobs.len() {
            return Err(OrpoError::EmptyCompletion {
                boundary: self.boundary,
                len: self.token_logprobs.len(),
            });
        }
        for (index, &value) in self.token_logprobs.iter().enumerate() {
            if !(value.is_finite() && value <= 0.0) {
                return Err(OrpoError::BadLogprob { index, value });
            }
        }
        Ok(())
    }

    pub fn completion(&self) -> &[f64] {
        &self.token_logprobs[self.boundary.min(self.token_logprobs.len())..]
    }

    pub fn completion_len(&self) -> usize {
        self.completion().len()
    }
}

pub fn completion_nll(seq: &ScoredSequence) -> Result<f64, OrpoError> {
    seq.check()?;
    let c = seq.completion();
    Ok(-c.iter().sum::<f64>() / c.len() as f64)
}

fn log_likelihood(seq: &ScoredSequence, normalized: bool) -> f64 {
    let c = seq.completion();
    let sum: f64 = c.iter().sum();
    if normalized {
        sum / c.len() as f64
    } else {
        sum
    }
}

/// Whether the likelihood of `seq` sits on a clamp bound.
fn clamped(seq: &ScoredSequence, normalized: bool) -> bool {
    let p = log_likelihood(seq, normalized).exp();
    !(CLAMP_EPS < p && p < 1.0 - CLAMP_EPS)
}

pub fn sequence_likelihood(seq: &ScoredSequence, normalized: bool) -> Result<f64, OrpoError> {
    seq.check()?;
    Ok(log_likelihood(seq, normalized)
        .exp()
        .clamp(CLAMP_EPS, 1.0 - CLAMP_EPS))
}

pub fn odds(p: f64) -> Result<f64, OrpoError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(OrpoError::ProbabilityOutOfRange(p));
    }
    Ok(p / (1.0 - p))
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Log odds ratio `ln odds(P_w) - ln odds(P_l)`.
fn log_odds_ratio(
    chosen: &ScoredSequence,
    rejected: &ScoredSequence,
    normalized: bool,
) -> Result<f64, OrpoError> {
    let pw = sequence_likelihood(chosen, normalized)?;
    let pl = sequence_likelihood(rejected, normalized)?;
    Ok(odds(pw)?.ln() - odds(pl)?.ln())
}

/// `-ln σ(ln odds(P_w) - ln odds(P_l))`.
pub fn or_penalty(
    chosen: &ScoredSequence,
    rejected: &ScoredSequence,
    normalized: bool,
) -> Result<f64, OrpoError> {
    Ok(softplus(-log_odds_ratio(chosen, rejected, normalized)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrpoLoss {
    pub total: f64,
    pub nll: f64,
    pub or: f64,
}

pub fn orpo_loss(
    chosen: &ScoredSequence,
    rejected: &ScoredSequence,
    lambda: f64,
    normalized: bool,
) -> Result<OrpoLoss, OrpoError> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(OrpoError::BadLambda(lambda));
    }
    let nll = completion_nll(chosen)?;
    let or = or_penalty(chosen, rejected, normalized)?;
    Ok(OrpoLoss {
        total: nll + lambda * or,
        nll,
        or,
    })
}

/// Partial derivatives of the total loss with respect to every input
/// log-probability. Prompt tokens get 0, as do all tokens of a sequence
/// whose likelihood is clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct OrpoGradient {
    pub chosen: Vec<f64>,
    pub rejected: Vec<f64>,
}

pub fn orpo_gradient(
    chosen: &ScoredSequence,
    rejected: &ScoredSequence,
    lambda: f64,
    normalized: bool,
) -> Result<OrpoGradient, OrpoError> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(OrpoError::BadLambda(lambda));
    }
    let z = log_odds_ratio(chosen, rejected, normalized)?;
    let pw = sequence_likelihood(chosen, normalized)?;
    let pl = sequence_likelihood(rejected, normalized)?;
    let s = sigmoid(-z);
    let dloglik = |seq: &ScoredSequence| {
        if clamped(seq, normalized) {
            0.0
        } else if normalized {
            1.0 / seq.completion_len() as f64
        } else {
            1.0
        }
    };
    let mw = chosen.completion_len() as f64;
    let (dw, dl) = (dloglik(chosen), dloglik(rejected));
    let fill = |seq: &ScoredSequence, per_token: f64| {
        let mut g = vec![0.0; seq.token_logprobs.len()];
        for x in &mut g[seq.boundary..] {
            *x = per_token;
        }
        g
    };
    Ok(OrpoGradient {
        chosen: fill(chosen, -1.0 / mw - lambda * s * dw / (1.0 - pw)),
        rejected: fill(rejected, lambda * s * dl / (1.0 - pl)),
    })
}

/// One line of a scored-pair file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub chosen_logprobs: Vec<f64>,
    pub rejected_logprobs: Vec<f64>,
    /// Prompt length shared by both sequences.
    #[serde(default)]
    pub boundary: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

impl ScoredPair {
    pub fn sequences(&self) -> Result<(ScoredSequence, ScoredSequence), OrpoError> {
        Ok((
            ScoredSequence::new(self.chosen_logprobs.clone(), self.boundary)?,
            ScoredSequence::new(self.rejected_logprobs.clone(), self.boundary)?,
        ))
    }
}

pub fn parse_scored_pairs(text: &str) -> Result<Vec<(usize, ScoredPair)>, OrpoError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let line = i + 1;
            let pair: ScoredPair = serde_json::from_str(l).map_err(|e| OrpoError::Parse {
                line,
                message: e.to_string(),
            })?;
            pair.sequences().map_err(|e| OrpoError::Parse {
                line,
                message: e.to_string(),
            })?;
            Ok((line, pair))
        })
        .collect()
}

pub fn load_scored_pairs(path: &Path) -> Result<Vec<(usize, ScoredPair)>, OrpoError> {
    let text = std::fs::read_to_string(path).map_err(|e| OrpoError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_scored_pairs(&text)
}

/// Scores every pair. `lambda_override` wins over per-line values, which win
/// over `default_lambda`.
pub fn score_pairs(
    pairs: &[(usize, ScoredPair)],
    lambda_override: Option<f64>,
    default_lambda: f64,
    normalized: bool,
) -> Result<Vec<(usize, OrpoLoss)>, OrpoError> {
    pairs
        .iter()
        .map(|(line, p)| {
            let lambda = lambda_override.or(p.lambda).unwrap_or(default_lambda);
            let (c, r) = p.sequences()?;
            let loss = orpo_loss(&c, &r, lambda, normalized).map_err(|e| OrpoError::Parse {
                line: *line,
                message: e.to_string(),
            })?;
            Ok((*line, loss))
        })
        .collect()
}
