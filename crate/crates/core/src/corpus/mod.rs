//! Corpus types, JSONL io, vocabulary, and fold assignment.
//!
//! A corpus is a list of tweets, each with a token sequence, a label,
//! optional rationale annotations (aggression tweets only), coarse
//! context annotations, and three numeric context features. On disk a
//! corpus is JSONL, one tweet object per line.

mod synth;
mod tokenize;

pub use synth::{synth_corpus, BiasSpec, FeatureDist, MentionSpec, SynthSpec};
pub use tokenize::tokenize;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, fnv1a64, seeded};

/// Tweet class. The declaration order is the canonical class order and
/// is used to break ties deterministically.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Aggression,
    Loss,
    Other,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Aggression, Label::Loss, Label::Other];

    pub fn index(self) -> usize {
        match self {
            Label::Aggression => 0,
            Label::Loss => 1,
            Label::Other => 2,
        }
    }

    pub fn from_index(index: usize) -> Option<Label> {
        Label::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Aggression => "aggression",
            Label::Loss => "loss",
            Label::Other => "other",
        }
    }

    fn parse(raw: &str) -> Option<Label> {
        match raw {
            "aggression" => Some(Label::Aggression),
            "loss" => Some(Label::Loss),
            "other" => Some(Label::Other),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Yes / no / not-annotated, for the coarse context annotations.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum TriState {
    Yes,
    No,
    #[default]
    Na,
}

/// Per-tweet context annotations. Anything not annotated is `Na`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ContextAnnotations {
    #[serde(default)]
    pub by_context: TriState,
    #[serde(default)]
    pub by_mention_retweet: TriState,
    #[serde(default)]
    pub by_url: TriState,
    #[serde(default)]
    pub by_picture: TriState,
}

/// One labeled tweet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tweet {
    pub id: String,
    pub tokens: Vec<String>,
    pub label: Label,
    /// 0-based token positions an annotator marked as decisive.
    /// Nonempty only on aggression tweets.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub rationale_indices: BTreeSet<usize>,
    #[serde(default)]
    pub context: ContextAnnotations,
    #[serde(default)]
    pub controversial: bool,
    #[serde(default)]
    pub context_features: [f64; 3],
}

/// An in-memory corpus. Tweet order is load order and is preserved.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub tweets: Vec<Tweet>,
}

impl Corpus {
    pub fn new(tweets: Vec<Tweet>) -> Corpus {
        Corpus { tweets }
    }

    pub fn len(&self) -> usize {
        self.tweets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tweets.is_empty()
    }

    /// Tweet counts in class order (aggression, loss, other).
    pub fn label_counts(&self) -> [usize; 3] {
        let mut counts = [0usize; 3];
        for t in &self.tweets {
            counts[t.label.index()] += 1;
        }
        counts
    }

    /// Index from tweet id to position. Built on demand.
    pub fn id_index(&self) -> HashMap<&str, usize> {
        self.tweets
            .iter()
            .enumerate()
            .map(|(i, t)| (t.id.as_str(), i))
            .collect()
    }
}

/// Options for [`load_corpus`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct LoadOptions {
    /// Drop tweets whose annotators disagreed on the label.
    pub exclude_controversial: bool,
    /// Minimum token count for a vocabulary entry; rarer tokens map to UNK.
    pub min_count: usize,
}

impl Default for LoadOptions {
    fn default() -> LoadOptions {
        LoadOptions {
            exclude_controversial: false,
            min_count: 1,
        }
    }
}

/// Raw record shape, validated field by field so errors can name the
/// offending line and value instead of surfacing a serde message.
#[derive(Deserialize)]
struct RawTweet {
    id: String,
    tokens: Vec<String>,
    label: String,
    #[serde(default)]
    rationale_indices: Vec<usize>,
    #[serde(default)]
    context: ContextAnnotations,
    #[serde(default)]
    controversial: bool,
    #[serde(default)]
    context_features: Option<Vec<f64>>,
}

fn validate_tweet(raw: RawTweet, line: usize) -> Result<Tweet> {
    let label = Label::parse(&raw.label).ok_or_else(|| Error::UnknownLabel {
        line,
        label: raw.label.clone(),
    })?;
    if raw.tokens.is_empty() {
        return Err(Error::EmptyTweet { id: raw.id });
    }
    let len = raw.tokens.len();
    let mut rationale_indices = BTreeSet::new();
    for index in raw.rationale_indices {
        if index >= len {
            return Err(Error::RationaleOutOfRange {
                id: raw.id,
                index,
                len,
            });
        }
        rationale_indices.insert(index);
    }
    if !rationale_indices.is_empty() && label != Label::Aggression {
        return Err(Error::RationaleOnNonAggression { id: raw.id });
    }
    let context_features = match raw.context_features {
        None => [0.0; 3],
        Some(v) if v.len() == 3 => [v[0], v[1], v[2]],
        Some(v) => {
            return Err(Error::MalformedLine {
                line,
                message: format!("context_features must have length 3, got {}", v.len()),
            })
        }
    };
    Ok(Tweet {
        id: raw.id,
        tokens: raw.tokens,
        label,
        rationale_indices,
        context: raw.context,
        controversial: raw.controversial,
        context_features,
    })
}

/// Loads a JSONL corpus and builds its vocabulary.
///
/// Blank lines are skipped. Any malformed line, unknown label, out of
/// range rationale index, rationale on a non-aggression tweet, or empty
/// token list is an error naming the line or tweet.
pub fn load_corpus(path: &Path, options: &LoadOptions) -> Result<(Corpus, Vocabulary)> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut tweets = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawTweet =
            serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                line: line_no,
                message: e.to_string(),
            })?;
        let tweet = validate_tweet(raw, line_no)?;
        if options.exclude_controversial && tweet.controversial {
            continue;
        }
        tweets.push(tweet);
    }
    let corpus = Corpus::new(tweets);
    let vocab = Vocabulary::build(
        corpus.tweets.iter().flat_map(|t| t.tokens.iter()),
        options.min_count,
    );
    Ok((corpus, vocab))
}

/// Writes a corpus as JSONL, one tweet per line, in corpus order.
pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut file = fs::File::create(path)?;
    for tweet in &corpus.tweets {
        let line = serde_json::to_string(tweet)?;
        file.write_all(line.as_bytes())?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Token-to-id map with two reserved entries: PAD (0) and UNK (1).
///
/// Real tokens get ids from 2 upward in order of descending count, ties
/// broken alphabetically, so the assignment is a pure function of the
/// token counts. Lookup of any unknown token yields UNK.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    pub const PAD: u32 = 0;
    pub const UNK: u32 = 1;
    pub const PAD_TOKEN: &'static str = "<pad>";
    pub const UNK_TOKEN: &'static str = "<unk>";

    /// Builds a vocabulary from a token stream, keeping tokens whose
    /// count is at least `min_count`.
    pub fn build<'a, I>(tokens: I, min_count: usize) -> Vocabulary
    where
        I: IntoIterator<Item = &'a String>,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for token in tokens {
            *counts.entry(token.as_str()).or_insert(0) += 1;
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count.max(1))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut id_to_token =
            vec![Self::PAD_TOKEN.to_string(), Self::UNK_TOKEN.to_string()];
        id_to_token.extend(ranked.iter().map(|&(t, _)| t.to_string()));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }

    /// Id for a token; unknown tokens map to UNK.
    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Total entries including PAD and UNK.
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// The tokens in id order, for persistence. The inverse of
    /// [`Vocabulary::from_tokens`].
    pub fn tokens_in_id_order(&self) -> &[String] {
        &self.id_to_token
    }

    /// Rebuilds a vocabulary from a persisted id-ordered token list.
    pub fn from_tokens(id_to_token: Vec<String>) -> Result<Vocabulary> {
        if id_to_token.len() < 2
            || id_to_token[0] != Self::PAD_TOKEN
            || id_to_token[1] != Self::UNK_TOKEN
        {
            return Err(Error::Config(format!(
                "vocabulary list must start with {} and {}",
                Self::PAD_TOKEN,
                Self::UNK_TOKEN
            )));
        }
        let token_to_id: HashMap<String, u32> = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        if token_to_id.len() != id_to_token.len() {
            return Err(Error::Config("vocabulary list contains duplicates".into()));
        }
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
        })
    }

    /// Order-sensitive hash of the full id assignment. Stored in model
    /// checkpoints so a checkpoint cannot be applied to a different
    /// vocabulary unnoticed.
    pub fn hash(&self) -> u64 {
        let mut h = 0xCBF2_9CE4_8422_2325u64;
        for token in &self.id_to_token {
            h ^= fnv1a64(token.as_bytes());
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        h
    }
}

/// A label-stratified assignment of corpus positions to `k` folds.
#[derive(Debug, Clone)]
pub struct FoldAssignment {
    pub k: usize,
    fold_of: Vec<usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, index: usize) -> usize {
        self.fold_of[index]
    }

    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] != fold)
            .collect()
    }
}

/// Stratified fold assignment: within each label the (seeded) shuffled
/// tweets are dealt round-robin, so per-label fold sizes differ by at
/// most one. Labels absent from the corpus are skipped; a present label
/// with fewer than `k` tweets is an error.
pub fn make_folds(corpus: &Corpus, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Config(format!("fold count must be at least 2, got {k}")));
    }
    if corpus.is_empty() {
        return Err(Error::Config("cannot fold an empty corpus".into()));
    }
    let mut fold_of = vec![0usize; corpus.len()];
    for label in Label::ALL {
        let mut members: Vec<usize> = (0..corpus.len())
            .filter(|&i| corpus.tweets[i].label == label)
            .collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < k {
            return Err(Error::StratumTooSmall {
                label: label.as_str().into(),
                count: members.len(),
                k,
            });
        }
        let mut rng = seeded(derive_seed(seed, &[label.index() as u64]));
        use rand::seq::SliceRandom;
        members.shuffle(&mut rng);
        for (pos, &idx) in members.iter().enumerate() {
            fold_of[idx] = pos % k;
        }
    }
    Ok(FoldAssignment { k, fold_of })
}

/// Bare tweet for unit tests across the crate.
#[cfg(test)]
pub(crate) fn test_tweet(id: &str, tokens: &[&str], label: Label) -> Tweet {
    Tweet {
        id: id.into(),
        tokens: tokens.iter().map(|s| s.to_string()).collect(),
        label,
        rationale_indices: BTreeSet::new(),
        context: ContextAnnotations::default(),
        controversial: false,
        context_features: [0.0; 3],
    }
}
