//! Bias probing.
//!
//! Mines unigrams correlated with the aggression label via ℓ1-penalized
//! logistic regression, searches insertion positions under a naturalness
//! scorer, builds top-K adversarial sets, counts prediction flips, and
//! samples blinded sheets for human naturalness review.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Label, Vocabulary};
use crate::error::{Error, Result};
use crate::langmodel::SequenceScorer;
use crate::models::{argmax_label, Classifier};
use crate::rng::seeded;

/// One unigram from the mining run. `selected` marks tokens on the
/// reviewed allow-list of insertable candidates; mining itself never
/// sets it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedUnigram {
    pub token: String,
    pub weight: f64,
    #[serde(default)]
    pub selected: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MiningOutcome {
    /// Positive-weight unigrams, weight descending, ties by token.
    pub unigrams: Vec<MinedUnigram>,
    /// Every token's weight, including exact zeros.
    pub all_weights: BTreeMap<String, f64>,
    pub intercept: f64,
    /// Worst subgradient violation of the ℓ1 optimality conditions at
    /// the returned solution.
    pub optimality_gap: f64,
    pub iterations: usize,
}

const MINE_MAX_ITERS: usize = 5_000;
const MINE_CONVERGE_TOL: f64 = 1e-12;

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Binary bag-of-unigrams logistic regression, aggression vs rest, with
/// an ℓ1 penalty on the weights (intercept unpenalized), solved by
/// cyclic coordinate descent under the curvature bound sigma' <= 1/4.
///
/// Returns the positive-weight tokens sorted by weight descending; the
/// outcome carries the full weight map and the subgradient optimality
/// gap so callers can verify convergence.
pub fn mine_unigrams(corpus: &Corpus, indices: &[usize], l1_strength: f64) -> Result<MiningOutcome> {
    if l1_strength < 0.0 || !l1_strength.is_finite() {
        return Err(Error::Config(format!(
            "l1 strength must be nonnegative, got {l1_strength}"
        )));
    }
    if indices.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let n = indices.len();
    let labels: Vec<f64> = indices
        .iter()
        .map(|&i| (corpus.tweets[i].label == Label::Aggression) as u8 as f64)
        .collect();
    let positives = labels.iter().sum::<f64>() as usize;
    if positives == 0 || positives == n {
        return Err(Error::SingleClassCorpus);
    }

    // Binary presence features with an inverted index per token.
    let mut columns: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (row, &i) in indices.iter().enumerate() {
        let distinct: BTreeSet<&String> = corpus.tweets[i].tokens.iter().collect();
        for token in distinct {
            let rows = columns.entry(token.clone()).or_default();
            if rows.last() != Some(&row) {
                rows.push(row);
            }
        }
    }
    let tokens: Vec<&String> = columns.keys().collect();
    let rows_of: Vec<&Vec<usize>> = columns.values().collect();

    let mut weights = vec![0.0f64; tokens.len()];
    let mut intercept = 0.0f64;
    let mut margins = vec![0.0f64; n];
    let sigmoid = |z: f64| 1.0 / (1.0 + (-z).exp());
    // Majorizer diagonal: (1/4n) sum_i x_ij^2; binary features make the
    // sum a row count.
    let curvature: Vec<f64> = rows_of.iter().map(|r| 0.25 * r.len() as f64 / n as f64).collect();

    let mut iterations = 0;
    for iter in 0..MINE_MAX_ITERS {
        iterations = iter + 1;
        let mut max_change = 0.0f64;

        let grad_b: f64 =
            margins.iter().zip(&labels).map(|(&m, &y)| sigmoid(m) - y).sum::<f64>() / n as f64;
        let delta_b = -grad_b / 0.25;
        intercept += delta_b;
        for m in &mut margins {
            *m += delta_b;
        }
        max_change = max_change.max(delta_b.abs());

        for j in 0..weights.len() {
            let grad: f64 = rows_of[j]
                .iter()
                .map(|&row| sigmoid(margins[row]) - labels[row])
                .sum::<f64>()
                / n as f64;
            let updated = soft_threshold(
                weights[j] - grad / curvature[j],
                l1_strength / curvature[j],
            );
            let delta = updated - weights[j];
            if delta != 0.0 {
                weights[j] = updated;
                for &row in rows_of[j] {
                    margins[row] += delta;
                }
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change < MINE_CONVERGE_TOL {
            break;
        }
    }

    // Subgradient optimality at the solution.
    let probs: Vec<f64> = margins.iter().map(|&m| sigmoid(m)).collect();
    let grad_b: f64 = probs.iter().zip(&labels).map(|(p, y)| p - y).sum::<f64>() / n as f64;
    let mut gap = grad_b.abs();
    for j in 0..weights.len() {
        let grad: f64 = rows_of[j]
            .iter()
            .map(|&row| probs[row] - labels[row])
            .sum::<f64>()
            / n as f64;
        let violation = if weights[j] > 0.0 {
            (grad + l1_strength).abs()
        } else if weights[j] < 0.0 {
            (grad - l1_strength).abs()
        } else {
            (grad.abs() - l1_strength).max(0.0)
        };
        gap = gap.max(violation);
    }

    let all_weights: BTreeMap<String, f64> = tokens
        .iter()
        .zip(&weights)
        .map(|(t, &w)| ((*t).clone(), w))
        .collect();
    let mut unigrams: Vec<MinedUnigram> = all_weights
        .iter()
        .filter(|&(_, &w)| w > 0.0)
        .map(|(t, &w)| MinedUnigram {
            token: t.clone(),
            weight: w,
            selected: false,
        })
        .collect();
    unigrams.sort_by(|a, b| {
        b.weight
            .partial_cmp(&a.weight)
            .expect("weights are finite")
            .then_with(|| a.token.cmp(&b.token))
    });

    Ok(MiningOutcome {
        unigrams,
        all_weights,
        intercept,
        optimality_gap: gap,
        iterations,
    })
}

/// Marks mined unigrams that appear on the reviewed allow-list.
pub fn mark_selected(unigrams: &mut [MinedUnigram], allow_list: &BTreeSet<String>) {
    for u in unigrams {
        u.selected = allow_list.contains(&u.token);
    }
}

/// One insertion attack on one tweet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialCandidate {
    pub source_id: String,
    pub unigram: String,
    /// Insertion position in the original token sequence, 0..=l.
    pub position: usize,
    pub mutated: Vec<String>,
    /// score(mutated) - score(original) under the naturalness scorer.
    pub delta: f64,
}

/// Scores all l+1 insertion positions of `unigram` into the tweet and
/// keeps the most natural one; ties go to the leftmost position.
pub fn best_insertion<S: SequenceScorer + ?Sized>(
    scorer: &S,
    source_id: &str,
    tokens: &[String],
    unigram: &str,
) -> Result<AdversarialCandidate> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    let base = scorer.score(tokens)?;
    let mut best: Option<(usize, Vec<String>, f64)> = None;
    for position in 0..=tokens.len() {
        let mut mutated = Vec::with_capacity(tokens.len() + 1);
        mutated.extend_from_slice(&tokens[..position]);
        mutated.push(unigram.to_string());
        mutated.extend_from_slice(&tokens[position..]);
        let delta = scorer.score(&mutated)? - base;
        let better = match &best {
            None => true,
            Some((_, _, best_delta)) => delta > *best_delta,
        };
        if better {
            best = Some((position, mutated, delta));
        }
    }
    let (position, mutated, delta) = best.expect("at least one position");
    Ok(AdversarialCandidate {
        source_id: source_id.to_string(),
        unigram: unigram.to_string(),
        position,
        mutated,
        delta,
    })
}

/// Best insertion for every tweet in `indices`, keeping the `k` most
/// natural candidates, delta descending; ties keep corpus order.
pub fn build_adv_set<S: SequenceScorer + ?Sized>(
    scorer: &S,
    corpus: &Corpus,
    indices: &[usize],
    unigram: &str,
    k: usize,
) -> Result<Vec<AdversarialCandidate>> {
    if indices.len() < k {
        return Err(Error::CorpusSmallerThanK {
            size: indices.len(),
            k,
        });
    }
    let mut candidates = Vec::with_capacity(indices.len());
    for (order, &i) in indices.iter().enumerate() {
        let tweet = &corpus.tweets[i];
        let candidate = best_insertion(scorer, &tweet.id, &tweet.tokens, unigram)?;
        candidates.push((order, candidate));
    }
    candidates.sort_by(|a, b| {
        b.1.delta
            .partial_cmp(&a.1.delta)
            .expect("deltas are finite")
            .then_with(|| a.0.cmp(&b.0))
    });
    Ok(candidates.into_iter().take(k).map(|(_, c)| c).collect())
}

/// Model behavior on one candidate: scores before and after insertion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlipDetail {
    pub tweet_id: String,
    pub unigram: String,
    pub position: usize,
    pub before_scores: [f64; 3],
    pub after_scores: [f64; 3],
    pub before_label: Label,
    pub after_label: Label,
    pub flipped: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlipReport {
    /// Count of non-aggression predictions that became aggression.
    pub flips: usize,
    pub evaluated: usize,
    pub details: Vec<FlipDetail>,
}

impl FlipReport {
    pub fn flip_fraction(&self) -> f64 {
        if self.evaluated == 0 {
            0.0
        } else {
            self.flips as f64 / self.evaluated as f64
        }
    }
}

/// Counts prediction flips over an adversarial set: a flip is a tweet
/// predicted non-aggression whose mutated form is predicted aggression.
/// Context features come from the source tweet; insertion leaves them
/// unchanged.
pub fn flip_rate<M: Classifier>(
    model: &M,
    corpus: &Corpus,
    vocab: &Vocabulary,
    adv_set: &[AdversarialCandidate],
) -> Result<FlipReport> {
    let by_id = corpus.id_index();
    let mut details = Vec::with_capacity(adv_set.len());
    let mut flips = 0;
    for candidate in adv_set {
        let &i = by_id
            .get(candidate.source_id.as_str())
            .ok_or_else(|| Error::UnknownTweetId(candidate.source_id.clone()))?;
        let tweet = &corpus.tweets[i];
        let before_scores = model.class_scores(&vocab.encode(&tweet.tokens), &tweet.context_features)?;
        let after_scores =
            model.class_scores(&vocab.encode(&candidate.mutated), &tweet.context_features)?;
        let before_label = argmax_label(&before_scores);
        let after_label = argmax_label(&after_scores);
        let flipped = before_label != Label::Aggression && after_label == Label::Aggression;
        if flipped {
            flips += 1;
        }
        details.push(FlipDetail {
            tweet_id: candidate.source_id.clone(),
            unigram: candidate.unigram.clone(),
            position: candidate.position,
            before_scores,
            after_scores,
            before_label,
            after_label,
            flipped,
        });
    }
    Ok(FlipReport {
        flips,
        evaluated: adv_set.len(),
        details,
    })
}

/// The three-way rubric reviewers apply to each sheet row.
pub const NATURALNESS_RUBRIC: [&str; 3] = ["natural", "reasonable but awkward", "nonsensical"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SheetSource {
    Generated,
    Real,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SheetRow {
    pub row_id: String,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeyRow {
    pub row_id: String,
    pub source: SheetSource,
    pub origin_id: String,
}

/// A provenance-blinded naturalness sheet and its sealed answer key.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlindSheet {
    pub rows: Vec<SheetRow>,
    pub key: Vec<KeyRow>,
}

/// Samples `n_each` generated and real tweets, shuffles them with the
/// seeded RNG, and splits provenance into a separate key.
pub fn naturalness_sample(
    adv_set: &[AdversarialCandidate],
    corpus: &Corpus,
    n_each: usize,
    seed: u64,
) -> Result<BlindSheet> {
    if n_each == 0 {
        return Err(Error::Config("sample size must be positive".into()));
    }
    if adv_set.len() < n_each {
        return Err(Error::PoolTooSmall {
            pool: "generated",
            need: n_each,
            have: adv_set.len(),
        });
    }
    if corpus.len() < n_each {
        return Err(Error::PoolTooSmall {
            pool: "real",
            need: n_each,
            have: corpus.len(),
        });
    }
    let mut rng = seeded(seed);
    let generated = sample(&mut rng, adv_set.len(), n_each);
    let real = sample(&mut rng, corpus.len(), n_each);

    let mut entries: Vec<(SheetSource, String, Vec<String>)> = Vec::with_capacity(2 * n_each);
    for i in generated {
        let c = &adv_set[i];
        entries.push((SheetSource::Generated, c.source_id.clone(), c.mutated.clone()));
    }
    for i in real {
        let t = &corpus.tweets[i];
        entries.push((SheetSource::Real, t.id.clone(), t.tokens.clone()));
    }
    entries.shuffle(&mut rng);

    let mut rows = Vec::with_capacity(entries.len());
    let mut key = Vec::with_capacity(entries.len());
    for (pos, (source, origin_id, tokens)) in entries.into_iter().enumerate() {
        let row_id = format!("s-{pos:03}");
        rows.push(SheetRow {
            row_id: row_id.clone(),
            tokens,
        });
        key.push(KeyRow {
            row_id,
            source,
            origin_id,
        });
    }
    Ok(BlindSheet { rows, key })
}
