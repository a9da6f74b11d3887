//! Synthetic corpus generation.
//!
//! Tweets are built from disjoint token pools: aggression tweets carry
//! one or more cue tokens (which become the rationale annotations), loss
//! tweets optionally carry loss markers, and everything else is filler
//! from the neutral pool. An optional bias token can be planted with
//! label-dependent probability to create a spurious correlation, and
//! context features are drawn from per-label normal distributions.

use std::collections::BTreeSet;

use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use super::{ContextAnnotations, Corpus, Label, TriState, Tweet};
use crate::error::{Error, Result};
use crate::rng::seeded;

/// Spurious-correlation knob: plants `token` with probability
/// `p_aggression` in aggression tweets and `p_other` in the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub token: String,
    pub p_aggression: f64,
    pub p_other: f64,
}

/// Normal distribution parameters for one context feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureDist {
    pub mean: f64,
    pub std: f64,
}

impl Default for FeatureDist {
    fn default() -> FeatureDist {
        FeatureDist { mean: 0.0, std: 1.0 }
    }
}

/// Mention/retweet annotation model: per-label probabilities of a yes or
/// no annotation (the remainder is unannotated), plus a shift added to
/// the third context feature whenever the annotation is yes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MentionSpec {
    /// P(yes) per label, in class order.
    pub p_yes: [f64; 3],
    /// P(no) per label, in class order.
    pub p_no: [f64; 3],
    pub c3_shift_yes: f64,
}

/// Recipe for a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n: usize,
    pub aggression_fraction: f64,
    pub loss_fraction: f64,
    /// Inclusive range of filler lengths before any insertions.
    pub len_range: (usize, usize),
    /// Aggression cue pool; cue positions become rationale annotations.
    pub cue_tokens: Vec<String>,
    /// Loss marker pool; may be empty, making loss tweets pure filler.
    pub loss_tokens: Vec<String>,
    pub neutral_tokens: Vec<String>,
    /// Upper bound on planted cues (and loss markers) per tweet.
    pub max_cues_per_tweet: usize,
    pub bias: Option<BiasSpec>,
    /// Context feature distributions per label, in class order.
    pub context_features: [[FeatureDist; 3]; 3],
    pub mention: Option<MentionSpec>,
}

impl Default for SynthSpec {
    fn default() -> SynthSpec {
        let words = [
            "i", "u", "we", "they", "out", "here", "now", "today", "night", "block",
            "love", "real", "fr", "ok", "one", "two", "got", "get", "go", "going",
            "when", "where", "how", "my", "yo", "city", "day", "time", "left", "right",
        ];
        SynthSpec {
            n: 300,
            aggression_fraction: 0.35,
            loss_fraction: 0.25,
            len_range: (6, 12),
            cue_tokens: vec!["glock".into(), "opps".into(), "smoke".into(), "slide".into()],
            loss_tokens: vec!["rip".into(), "miss".into(), "heaven".into()],
            neutral_tokens: words.iter().map(|s| s.to_string()).collect(),
            max_cues_per_tweet: 2,
            bias: None,
            context_features: [[FeatureDist::default(); 3]; 3],
            mention: None,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("synthetic corpus size must be positive".into()));
        }
        let (lo, hi) = self.len_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "length range ({lo}, {hi}) must satisfy 1 <= min <= max"
            )));
        }
        for (name, p) in [
            ("aggression_fraction", self.aggression_fraction),
            ("loss_fraction", self.loss_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.aggression_fraction + self.loss_fraction > 1.0 + 1e-12 {
            return Err(Error::Config(
                "aggression and loss fractions must sum to at most 1".into(),
            ));
        }
        if self.neutral_tokens.is_empty() {
            return Err(Error::Config("neutral token pool is empty".into()));
        }
        if self.max_cues_per_tweet == 0 {
            return Err(Error::Config("max_cues_per_tweet must be positive".into()));
        }
        let n_agg = (self.n as f64 * self.aggression_fraction).round() as usize;
        if n_agg > 0 && self.cue_tokens.is_empty() {
            return Err(Error::Config(
                "cue token list is empty but the aggression fraction is positive".into(),
            ));
        }
        let neutral: BTreeSet<&str> = self.neutral_tokens.iter().map(String::as_str).collect();
        let cues: BTreeSet<&str> = self.cue_tokens.iter().map(String::as_str).collect();
        let loss: BTreeSet<&str> = self.loss_tokens.iter().map(String::as_str).collect();
        if cues.intersection(&neutral).next().is_some()
            || cues.intersection(&loss).next().is_some()
            || loss.intersection(&neutral).next().is_some()
        {
            return Err(Error::Config(
                "cue, loss, and neutral token pools must be disjoint".into(),
            ));
        }
        if let Some(bias) = &self.bias {
            if cues.contains(bias.token.as_str())
                || loss.contains(bias.token.as_str())
                || neutral.contains(bias.token.as_str())
            {
                return Err(Error::Config(
                    "bias token must not appear in any token pool".into(),
                ));
            }
            for (name, p) in [("p_aggression", bias.p_aggression), ("p_other", bias.p_other)] {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Config(format!(
                        "bias {name} must lie in [0, 1], got {p}"
                    )));
                }
            }
        }
        if let Some(m) = &self.mention {
            for i in 0..3 {
                let (y, n) = (m.p_yes[i], m.p_no[i]);
                if !(0.0..=1.0).contains(&y) || !(0.0..=1.0).contains(&n) || y + n > 1.0 + 1e-12 {
                    return Err(Error::Config(
                        "mention probabilities must be in [0, 1] and sum to at most 1".into(),
                    ));
                }
            }
        }
        for dists in &self.context_features {
            for d in dists {
                if d.std < 0.0 {
                    return Err(Error::Config("feature std must be nonnegative".into()));
                }
            }
        }
        Ok(())
    }
}

/// Generates a corpus from `spec`. Deterministic in `(spec, seed)`.
///
/// Label counts are exact: `round(n * fraction)` aggression and loss
/// tweets, the remainder labeled other. Rationale annotations on each
/// aggression tweet are exactly its cue positions.
pub fn synth_corpus(spec: &SynthSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = seeded(seed);

    let n_agg = (spec.n as f64 * spec.aggression_fraction).round() as usize;
    let n_loss =
        ((spec.n as f64 * spec.loss_fraction).round() as usize).min(spec.n - n_agg);
    let mut labels = Vec::with_capacity(spec.n);
    labels.extend(std::iter::repeat(Label::Aggression).take(n_agg));
    labels.extend(std::iter::repeat(Label::Loss).take(n_loss));
    labels.extend(std::iter::repeat(Label::Other).take(spec.n - n_agg - n_loss));
    labels.shuffle(&mut rng);

    let cue_set: BTreeSet<&str> = spec.cue_tokens.iter().map(String::as_str).collect();
    let mut tweets = Vec::with_capacity(spec.n);
    for (i, &label) in labels.iter().enumerate() {
        let len = rng.random_range(spec.len_range.0..=spec.len_range.1);
        let mut tokens: Vec<String> = (0..len)
            .map(|_| spec.neutral_tokens.choose(&mut rng).unwrap().clone())
            .collect();

        let marker_pool = match label {
            Label::Aggression => Some(&spec.cue_tokens),
            Label::Loss if !spec.loss_tokens.is_empty() => Some(&spec.loss_tokens),
            _ => None,
        };
        if let Some(pool) = marker_pool {
            let count = rng.random_range(1..=spec.max_cues_per_tweet.min(len));
            let positions = rand::seq::index::sample(&mut rng, len, count);
            for p in positions {
                tokens[p] = pool.choose(&mut rng).unwrap().clone();
            }
        }

        if let Some(bias) = &spec.bias {
            let p = match label {
                Label::Aggression => bias.p_aggression,
                _ => bias.p_other,
            };
            if rng.random::<f64>() < p {
                let pos = rng.random_range(0..=tokens.len());
                tokens.insert(pos, bias.token.clone());
            }
        }

        let rationale_indices: BTreeSet<usize> = if label == Label::Aggression {
            tokens
                .iter()
                .enumerate()
                .filter(|(_, t)| cue_set.contains(t.as_str()))
                .map(|(p, _)| p)
                .collect()
        } else {
            BTreeSet::new()
        };

        let mut context = ContextAnnotations::default();
        if let Some(m) = &spec.mention {
            let r: f64 = rng.random();
            context.by_mention_retweet = if r < m.p_yes[label.index()] {
                TriState::Yes
            } else if r < m.p_yes[label.index()] + m.p_no[label.index()] {
                TriState::No
            } else {
                TriState::Na
            };
        }

        let mut context_features = [0.0f64; 3];
        for (j, feature) in context_features.iter_mut().enumerate() {
            let d = spec.context_features[label.index()][j];
            // Validation guarantees std >= 0, so Normal::new cannot fail.
            let dist = Normal::new(d.mean, d.std).expect("validated feature distribution");
            *feature = dist.sample(&mut rng);
        }
        if let Some(m) = &spec.mention {
            if context.by_mention_retweet == TriState::Yes {
                context_features[2] += m.c3_shift_yes;
            }
        }

        tweets.push(Tweet {
            id: format!("synth-{i:05}"),
            tokens,
            label,
            rationale_indices,
            context,
            controversial: false,
            context_features,
        });
    }
    Ok(Corpus::new(tweets))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            n: 40,
            aggression_fraction: 0.5,
            loss_fraction: 0.25,
            len_range: (3, 6),
            ..SynthSpec::default()
        }
    }

    #[test]
    fn label_counts_are_exact() {
        let spec = SynthSpec {
            n: 4,
            aggression_fraction: 0.5,
            loss_fraction: 0.0,
            cue_tokens: vec!["glock".into()],
            ..SynthSpec::default()
        };
        let corpus = synth_corpus(&spec, 0).unwrap();
        assert_eq!(corpus.label_counts()[0], 2);
    }

    #[test]
    fn rationales_are_exactly_cue_positions() {
        let spec = small_spec();
        let cues: BTreeSet<&str> = spec.cue_tokens.iter().map(String::as_str).collect();
        let corpus = synth_corpus(&spec, 7).unwrap();
        for t in &corpus.tweets {
            let cue_positions: BTreeSet<usize> = t
                .tokens
                .iter()
                .enumerate()
                .filter(|(_, tok)| cues.contains(tok.as_str()))
                .map(|(p, _)| p)
                .collect();
            if t.label == Label::Aggression {
                assert!(!cue_positions.is_empty(), "aggression tweet without cue");
                assert_eq!(t.rationale_indices, cue_positions);
            } else {
                assert!(cue_positions.is_empty(), "cue leaked into {:?}", t.label);
                assert!(t.rationale_indices.is_empty());
            }
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let spec = small_spec();
        let a = synth_corpus(&spec, 11).unwrap();
        let b = synth_corpus(&spec, 11).unwrap();
        let c = synth_corpus(&spec, 12).unwrap();
        assert_eq!(a.tweets, b.tweets);
        assert_ne!(a.tweets, c.tweets);
    }

    #[test]
    fn bias_token_tracks_probabilities() {
        let spec = SynthSpec {
            n: 2000,
            bias: Some(BiasSpec {
                token: "on".into(),
                p_aggression: 0.9,
                p_other: 0.1,
            }),
            ..small_spec()
        };
        let corpus = synth_corpus(&spec, 3).unwrap();
        let mut with_bias = [0usize; 3];
        let mut totals = [0usize; 3];
        for t in &corpus.tweets {
            totals[t.label.index()] += 1;
            if t.tokens.iter().any(|tok| tok == "on") {
                with_bias[t.label.index()] += 1;
            }
        }
        let p_agg = with_bias[0] as f64 / totals[0] as f64;
        let p_other = with_bias[2] as f64 / totals[2] as f64;
        assert!((p_agg - 0.9).abs() < 0.05, "aggression rate {p_agg}");
        assert!((p_other - 0.1).abs() < 0.05, "other rate {p_other}");
    }

    #[test]
    fn empty_cue_pool_with_aggression_is_an_error() {
        let spec = SynthSpec {
            cue_tokens: vec![],
            ..small_spec()
        };
        assert!(matches!(synth_corpus(&spec, 0).unwrap_err(), Error::Config(_)));
    }

    #[test]
    fn overlapping_pools_are_an_error() {
        let mut spec = small_spec();
        spec.neutral_tokens.push(spec.cue_tokens[0].clone());
        assert!(matches!(synth_corpus(&spec, 0).unwrap_err(), Error::Config(_)));
    }

    #[test]
    fn mention_yes_shifts_third_feature() {
        let mut spec = small_spec();
        // Constant features so the shift is exact.
        spec.context_features = [[FeatureDist { mean: 0.0, std: 0.0 }; 3]; 3];
        spec.mention = Some(MentionSpec {
            p_yes: [0.5; 3],
            p_no: [0.5; 3],
            c3_shift_yes: 2.5,
        });
        let corpus = synth_corpus(&spec, 5).unwrap();
        let mut seen_yes = false;
        let mut seen_no = false;
        for t in &corpus.tweets {
            match t.context.by_mention_retweet {
                TriState::Yes => {
                    seen_yes = true;
                    assert_eq!(t.context_features[2], 2.5);
                }
                TriState::No => {
                    seen_no = true;
                    assert_eq!(t.context_features[2], 0.0);
                }
                TriState::Na => panic!("na should not occur with these probabilities"),
            }
        }
        assert!(seen_yes && seen_no);
    }

    #[test]
    fn lengths_respect_range_plus_bias_insertion() {
        let spec = SynthSpec {
            bias: Some(BiasSpec {
                token: "on".into(),
                p_aggression: 1.0,
                p_other: 1.0,
            }),
            ..small_spec()
        };
        let corpus = synth_corpus(&spec, 9).unwrap();
        for t in &corpus.tweets {
            assert!(t.tokens.len() >= spec.len_range.0 + 1);
            assert!(t.tokens.len() <= spec.len_range.1 + 1);
        }
    }
}
