//! Additive-smoothed n-gram model: the cheap scorer and test oracle.

use std::collections::{BTreeMap, BTreeSet};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::langmodel::SequenceScorer;

/// Start-of-sequence padding for the first n-1 contexts.
pub const BOS_TOKEN: &str = "<s>";

/// Counted n-gram model with additive smoothing. Unknown tokens map to
/// UNK in both context and target positions, and the smoothed
/// conditional distribution sums to 1 over vocabulary plus UNK.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramLm {
    order: usize,
    alpha: f64,
    /// context -> target -> count.
    counts: BTreeMap<Vec<String>, BTreeMap<String, u64>>,
    totals: BTreeMap<Vec<String>, u64>,
    vocab: BTreeSet<String>,
}

impl NgramLm {
    pub fn train(sequences: &[Vec<String>], order: usize, alpha: f64) -> Result<NgramLm> {
        if order == 0 {
            return Err(Error::Config("n-gram order must be at least 1".into()));
        }
        if alpha <= 0.0 || !alpha.is_finite() {
            return Err(Error::Config(format!(
                "smoothing constant must be positive, got {alpha}"
            )));
        }
        let mut lm = NgramLm {
            order,
            alpha,
            counts: BTreeMap::new(),
            totals: BTreeMap::new(),
            vocab: BTreeSet::new(),
        };
        let mut saw_tokens = false;
        for seq in sequences {
            if seq.is_empty() {
                continue;
            }
            saw_tokens = true;
            for (i, token) in seq.iter().enumerate() {
                lm.vocab.insert(token.clone());
                let ctx = context_at(seq, i, order);
                *lm.counts
                    .entry(ctx.clone())
                    .or_default()
                    .entry(token.clone())
                    .or_insert(0) += 1;
                *lm.totals.entry(ctx).or_insert(0) += 1;
            }
        }
        if !saw_tokens {
            return Err(Error::Config("n-gram training corpus is empty".into()));
        }
        Ok(lm)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    fn map_token<'a>(&self, token: &'a str) -> &'a str {
        if self.vocab.contains(token) || token == BOS_TOKEN {
            token
        } else {
            Vocabulary::UNK_TOKEN
        }
    }

    /// Smoothed conditional probability of `token` given the last
    /// n-1 `context` tokens. Both sides map unknowns to UNK; the
    /// denominator counts the vocabulary plus UNK so the distribution
    /// normalizes.
    pub fn prob(&self, context: &[String], token: &str) -> f64 {
        let ctx: Vec<String> = context.iter().map(|t| self.map_token(t).to_string()).collect();
        let token = self.map_token(token);
        let v = (self.vocab.len() + 1) as f64;
        let c = self
            .counts
            .get(&ctx)
            .and_then(|m| m.get(token))
            .copied()
            .unwrap_or(0) as f64;
        let total = self.totals.get(&ctx).copied().unwrap_or(0) as f64;
        (c + self.alpha) / (total + self.alpha * v)
    }

    /// Unnormalized log-likelihood: the sum of per-token conditional
    /// log-probabilities (the raw variant of [`SequenceScorer::score`]).
    pub fn log_likelihood(&self, tokens: &[String]) -> Result<f64> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut sum = 0.0;
        for (i, token) in tokens.iter().enumerate() {
            let ctx = context_at(tokens, i, self.order);
            sum += self.prob(&ctx, token).ln();
        }
        Ok(sum)
    }

    /// Renders the count tables as sorted `context<TAB>token<TAB>count`
    /// lines; context tokens are space-joined and empty for order 1.
    pub fn to_table_string(&self) -> String {
        let mut out = String::new();
        for (ctx, targets) in &self.counts {
            let ctx_text = ctx.join(" ");
            for (token, count) in targets {
                out.push_str(&format!("{ctx_text}\t{token}\t{count}\n"));
            }
        }
        out
    }

    /// Rebuilds a model from [`NgramLm::to_table_string`] output. The
    /// vocabulary is recovered from the target column; order and alpha
    /// are configuration, not part of the table format.
    pub fn from_table_string(text: &str, order: usize, alpha: f64) -> Result<NgramLm> {
        if order == 0 {
            return Err(Error::Config("n-gram order must be at least 1".into()));
        }
        if alpha <= 0.0 || !alpha.is_finite() {
            return Err(Error::Config(format!(
                "smoothing constant must be positive, got {alpha}"
            )));
        }
        let mut lm = NgramLm {
            order,
            alpha,
            counts: BTreeMap::new(),
            totals: BTreeMap::new(),
            vocab: BTreeSet::new(),
        };
        for (line_no, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (ctx_text, token, count) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
                (Some(c), Some(t), Some(n), None) => (c, t, n),
                _ => {
                    return Err(Error::Config(format!(
                        "table line {} is not context<TAB>token<TAB>count",
                        line_no + 1
                    )))
                }
            };
            let count: u64 = count.parse().map_err(|_| {
                Error::Config(format!("table line {}: bad count `{count}`", line_no + 1))
            })?;
            let ctx: Vec<String> = if ctx_text.is_empty() {
                Vec::new()
            } else {
                ctx_text.split(' ').map(str::to_string).collect()
            };
            if ctx.len() != order - 1 {
                return Err(Error::Config(format!(
                    "table line {}: context has {} tokens, order {} needs {}",
                    line_no + 1,
                    ctx.len(),
                    order,
                    order - 1
                )));
            }
            if token != Vocabulary::UNK_TOKEN {
                lm.vocab.insert(token.to_string());
            }
            *lm.counts
                .entry(ctx.clone())
                .or_default()
                .entry(token.to_string())
                .or_insert(0) += count;
            *lm.totals.entry(ctx).or_insert(0) += count;
        }
        if lm.totals.is_empty() {
            return Err(Error::Config("n-gram table is empty".into()));
        }
        Ok(lm)
    }
}

/// The n-1 tokens preceding position `i`, BOS-padded at the start.
fn context_at(tokens: &[String], i: usize, order: usize) -> Vec<String> {
    let need = order - 1;
    let mut ctx = Vec::with_capacity(need);
    for back in (1..=need).rev() {
        if i >= back {
            ctx.push(tokens[i - back].clone());
        } else {
            ctx.push(BOS_TOKEN.to_string());
        }
    }
    ctx
}

impl SequenceScorer for NgramLm {
    fn score(&self, tokens: &[String]) -> Result<f64> {
        Ok(self.log_likelihood(tokens)? / tokens.len() as f64)
    }
}
