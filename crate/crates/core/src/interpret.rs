//! Model-behavior analysis.
//!
//! Leave-one-out token influence, influence ranks and the rationale
//! rank, second-order consistency of the most influential token, and
//! the contribution of context features with a permutation test over
//! annotation groups.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Label, TriState, Vocabulary};
use crate::error::{Error, Result};
use crate::models::{argmax_label, Classifier, Model, ModelKind, CONTEXT_FEATURES};
use crate::rng::seeded;

/// Per-token leave-one-out influence on the `target` class confidence.
///
/// Each position is masked in turn by substituting the UNK id (length
/// and positions unchanged); influence is the drop in confidence,
/// `I_i = y - y_{-i}`, so positive values support the target class.
pub fn loo_influence<M: Classifier>(
    model: &M,
    token_ids: &[u32],
    context: &[f64; CONTEXT_FEATURES],
    target: Label,
) -> Result<Vec<f64>> {
    if token_ids.is_empty() {
        return Err(Error::EmptySequence);
    }
    let base = model.class_scores(token_ids, context)?[target.index()];
    let mut masked = token_ids.to_vec();
    let mut influences = Vec::with_capacity(token_ids.len());
    for i in 0..token_ids.len() {
        let kept = masked[i];
        masked[i] = Vocabulary::UNK;
        let y = model.class_scores(&masked, context)?[target.index()];
        masked[i] = kept;
        influences.push(base - y);
    }
    Ok(influences)
}

/// Number of tokens with strictly higher influence; tied tokens share a
/// rank and the best possible rank is 0.
pub fn influence_rank(influences: &[f64], index: usize) -> Result<usize> {
    if index >= influences.len() {
        return Err(Error::IndexOutOfRange {
            index,
            len: influences.len(),
        });
    }
    let mine = influences[index];
    Ok(influences.iter().filter(|&&v| v > mine).count())
}

/// Minimum influence rank over the rationale positions.
pub fn rationale_rank(influences: &[f64], rationales: &BTreeSet<usize>) -> Result<usize> {
    if rationales.is_empty() {
        return Err(Error::EmptyRationaleSet);
    }
    let mut best = usize::MAX;
    for &i in rationales {
        best = best.min(influence_rank(influences, i)?);
    }
    Ok(best)
}

/// Positions sorted by influence descending, ties by position.
fn descending_order(influences: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..influences.len()).collect();
    order.sort_by(|&a, &b| {
        influences[b]
            .partial_cmp(&influences[a])
            .expect("influences are finite")
            .then(a.cmp(&b))
    });
    order
}

/// One tweet's influence analysis, serialized as a JSONL row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InfluenceReport {
    pub tweet_id: String,
    pub predicted: Label,
    /// Confidence for the target class on the unmasked tweet.
    pub base_confidence: f64,
    pub influences: Vec<f64>,
    /// Positions ordered by influence descending.
    pub order: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale_rank: Option<usize>,
}

/// Builds the influence report for one corpus tweet. The rationale rank
/// is present exactly when the tweet carries rationale annotations.
pub fn influence_report<M: Classifier>(
    model: &M,
    corpus: &Corpus,
    index: usize,
    vocab: &Vocabulary,
    target: Label,
) -> Result<InfluenceReport> {
    let tweet = &corpus.tweets[index];
    let ids = vocab.encode(&tweet.tokens);
    let scores = model.class_scores(&ids, &tweet.context_features)?;
    let influences = loo_influence(model, &ids, &tweet.context_features, target)?;
    let rr = if tweet.rationale_indices.is_empty() {
        None
    } else {
        Some(rationale_rank(&influences, &tweet.rationale_indices)?)
    };
    Ok(InfluenceReport {
        tweet_id: tweet.id.clone(),
        predicted: argmax_label(&scores),
        base_confidence: scores[target.index()],
        order: descending_order(&influences),
        influences,
        rationale_rank: rr,
    })
}

/// Rationale-rank aggregates over a cohort.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RrStats {
    pub avg_rr: f64,
    /// Fraction of the cohort with rank exactly 0.
    pub frac_rr0: f64,
    /// Fraction of the cohort with rank exactly 1.
    pub frac_rr1: f64,
    pub n: usize,
}

impl RrStats {
    pub fn from_ranks(ranks: &[usize]) -> Option<RrStats> {
        if ranks.is_empty() {
            return None;
        }
        let n = ranks.len() as f64;
        Some(RrStats {
            avg_rr: ranks.iter().sum::<usize>() as f64 / n,
            frac_rr0: ranks.iter().filter(|&&r| r == 0).count() as f64 / n,
            frac_rr1: ranks.iter().filter(|&&r| r == 1).count() as f64 / n,
            n: ranks.len(),
        })
    }
}

/// Rationale-rank statistics over the tweets in `indices` that the
/// model classifies as aggression and that carry rationale annotations.
/// `None` means the cohort is empty, which reports must keep distinct
/// from a zero rank.
pub fn rr_stats<M: Classifier>(
    model: &M,
    corpus: &Corpus,
    indices: &[usize],
    vocab: &Vocabulary,
) -> Result<Option<RrStats>> {
    let ranks = cohort_ranks(model, corpus, indices, vocab)?;
    Ok(RrStats::from_ranks(&ranks))
}

/// The individual ranks behind [`rr_stats`], in corpus order.
pub fn cohort_ranks<M: Classifier>(
    model: &M,
    corpus: &Corpus,
    indices: &[usize],
    vocab: &Vocabulary,
) -> Result<Vec<usize>> {
    let mut ranks = Vec::new();
    for &i in indices {
        let tweet = &corpus.tweets[i];
        if tweet.rationale_indices.is_empty() {
            continue;
        }
        let ids = vocab.encode(&tweet.tokens);
        let scores = model.class_scores(&ids, &tweet.context_features)?;
        if argmax_label(&scores) != Label::Aggression {
            continue;
        }
        let influences = loo_influence(model, &ids, &tweet.context_features, Label::Aggression)?;
        ranks.push(rationale_rank(&influences, &tweet.rationale_indices)?);
    }
    Ok(ranks)
}

/// Where the most influential token lands after the least influential
/// one is removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecondOrder {
    StaysTop1,
    BecomesTop2,
    Displaced,
}

/// Removes the least influential token and reranks the originally most
/// influential one on the shortened tweet. Both extremes are leftmost
/// under ties, and the least influential is chosen among the other
/// positions so the top token always survives the removal.
pub fn second_order_consistency<M: Classifier>(
    model: &M,
    token_ids: &[u32],
    context: &[f64; CONTEXT_FEATURES],
    target: Label,
) -> Result<SecondOrder> {
    if token_ids.len() < 2 {
        return Err(Error::TooShort {
            need: 2,
            got: token_ids.len(),
        });
    }
    let influences = loo_influence(model, token_ids, context, target)?;
    let top = descending_order(&influences)[0];
    let least = (0..influences.len())
        .filter(|&i| i != top)
        .min_by(|&a, &b| {
            influences[a]
                .partial_cmp(&influences[b])
                .expect("influences are finite")
                .then(a.cmp(&b))
        })
        .expect("length is at least 2");

    let mut shortened = token_ids.to_vec();
    shortened.remove(least);
    let new_top = if least < top { top - 1 } else { top };
    let influences = loo_influence(model, &shortened, context, target)?;
    Ok(match influence_rank(&influences, new_top)? {
        0 => SecondOrder::StaysTop1,
        1 => SecondOrder::BecomesTop2,
        _ => SecondOrder::Displaced,
    })
}

/// Outcome counts over a cohort.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecondOrderTally {
    pub stays_top1: usize,
    pub becomes_top2: usize,
    pub displaced: usize,
}

impl SecondOrderTally {
    pub fn add(&mut self, outcome: SecondOrder) {
        match outcome {
            SecondOrder::StaysTop1 => self.stays_top1 += 1,
            SecondOrder::BecomesTop2 => self.becomes_top2 += 1,
            SecondOrder::Displaced => self.displaced += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.stays_top1 + self.becomes_top2 + self.displaced
    }
}

/// Tallies second-order outcomes over the tweets in `indices` that the
/// model classifies as aggression; tweets shorter than two tokens are
/// skipped.
pub fn second_order_tally<M: Classifier>(
    model: &M,
    corpus: &Corpus,
    indices: &[usize],
    vocab: &Vocabulary,
) -> Result<SecondOrderTally> {
    let mut tally = SecondOrderTally::default();
    for &i in indices {
        let tweet = &corpus.tweets[i];
        if tweet.tokens.len() < 2 {
            continue;
        }
        let ids = vocab.encode(&tweet.tokens);
        let scores = model.class_scores(&ids, &tweet.context_features)?;
        if argmax_label(&scores) != Label::Aggression {
            continue;
        }
        tally.add(second_order_consistency(
            model,
            &ids,
            &tweet.context_features,
            Label::Aggression,
        )?);
    }
    Ok(tally)
}

/// Dot product of a final-layer weight block with its feature block.
pub fn weighted_impact(w3: &[f64], c3: &[f64]) -> Result<f64> {
    if w3.len() != c3.len() || w3.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "weighted_impact",
            detail: format!("weight block has {} entries, features {}", w3.len(), c3.len()),
        });
    }
    Ok(w3.iter().zip(c3).map(|(a, b)| a * b).sum())
}

/// Contribution of the third context feature to the aggression logit:
/// the output-layer weight on that feature times its value.
pub fn feature_impact(model: &Model, context: &[f64; CONTEXT_FEATURES]) -> Result<f64> {
    let rep_len = match model.kind {
        ModelKind::Cnn => model.dims.z,
        ModelKind::Lstm | ModelKind::LstmRationale => model.dims.hidden,
    };
    let w = model.params.get("out_w")?;
    let n = rep_len + CONTEXT_FEATURES;
    if w.rows() != 3 || w.cols() != n {
        return Err(Error::ShapeMismatch {
            op: "feature_impact",
            detail: format!("out_w is {}x{}, expected 3x{n}", w.rows(), w.cols()),
        });
    }
    let w3 = w.values[Label::Aggression.index() * n + rep_len + 2];
    weighted_impact(&[w3], &context[2..3])
}

/// One tweet's context contribution plus its annotation group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImpactRecord {
    pub tweet_id: String,
    pub impact: f64,
    /// The by_mention_retweet annotation; `Na` rows never enter group
    /// tests.
    pub group: TriState,
}

pub fn impact_records(
    model: &Model,
    corpus: &Corpus,
    indices: &[usize],
) -> Result<Vec<ImpactRecord>> {
    indices
        .iter()
        .map(|&i| {
            let tweet = &corpus.tweets[i];
            Ok(ImpactRecord {
                tweet_id: tweet.id.clone(),
                impact: feature_impact(model, &tweet.context_features)?,
                group: tweet.context.by_mention_retweet,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupDifference {
    pub mean_diff: f64,
    pub p_value: f64,
    pub n_yes: usize,
    pub n_no: usize,
    /// Whether the p-value came from exact enumeration rather than
    /// resampling.
    pub exact: bool,
}

/// Tolerance when comparing permuted differences against the observed
/// one, so float noise cannot turn an exact tie into a miss.
const PERM_TIE_TOL: f64 = 1e-12;

const EXACT_ENUMERATION_LIMIT: usize = 12;
const RESAMPLE_ITERS: usize = 10_000;

fn mean_diff_of_split(values: &[f64], yes_sum: f64, n_yes: usize) -> f64 {
    let total: f64 = values.iter().sum();
    let n_no = values.len() - n_yes;
    yes_sum / n_yes as f64 - (total - yes_sum) / n_no as f64
}

fn exact_p(values: &[f64], n_yes: usize, observed: f64) -> (f64, u64) {
    let n = values.len();
    let mut hits = 0u64;
    let mut combos = 0u64;
    for mask in 0u32..(1u32 << n) {
        if mask.count_ones() as usize != n_yes {
            continue;
        }
        combos += 1;
        let yes_sum: f64 = (0..n)
            .filter(|&i| mask & (1 << i) != 0)
            .map(|i| values[i])
            .sum();
        if mean_diff_of_split(values, yes_sum, n_yes) >= observed - PERM_TIE_TOL {
            hits += 1;
        }
    }
    (hits as f64 / combos as f64, combos)
}

fn resampled_p(values: &[f64], n_yes: usize, observed: f64, iters: usize, seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let mut pool: Vec<f64> = values.to_vec();
    let mut hits = 0usize;
    for _ in 0..iters {
        pool.shuffle(&mut rng);
        let yes_sum: f64 = pool[..n_yes].iter().sum();
        if mean_diff_of_split(&pool, yes_sum, n_yes) >= observed - PERM_TIE_TOL {
            hits += 1;
        }
    }
    // Add-one smoothing keeps the estimate off an impossible zero.
    (hits + 1) as f64 / (iters + 1) as f64
}

/// Mean impact difference between the yes and no groups with a
/// one-sided permutation p-value: exact enumeration up to
/// 12 annotated rows, seeded resampling above that.
pub fn group_difference(records: &[ImpactRecord], seed: u64) -> Result<GroupDifference> {
    let mut values = Vec::new();
    let mut n_yes = 0usize;
    for r in records.iter().filter(|r| r.group == TriState::Yes) {
        values.push(r.impact);
        n_yes += 1;
    }
    for r in records.iter().filter(|r| r.group == TriState::No) {
        values.push(r.impact);
    }
    let n_no = values.len() - n_yes;
    if n_yes == 0 || n_no == 0 {
        return Err(Error::EmptyGroup(if n_yes == 0 { "yes" } else { "no" }));
    }
    let yes_sum: f64 = values[..n_yes].iter().sum();
    let observed = mean_diff_of_split(&values, yes_sum, n_yes);
    let exact = values.len() <= EXACT_ENUMERATION_LIMIT;
    let p_value = if exact {
        exact_p(&values, n_yes, observed).0
    } else {
        resampled_p(&values, n_yes, observed, RESAMPLE_ITERS, seed)
    };
    Ok(GroupDifference {
        mean_diff: observed,
        p_value,
        n_yes,
        n_no,
        exact,
    })
}
