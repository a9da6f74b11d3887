//! Sequence naturalness scoring.
//!
//! Two scorer families behind one trait: a trained recurrent language
//! model (forward, backward, or their average) and a counted n-gram
//! fallback. Scores are length-normalized mean log-likelihoods, so
//! sequences of different lengths, in particular a tweet and the same
//! tweet with one insertion, compare fairly.

mod lstm;
mod ngram;

pub use lstm::{
    train_lm, AveragedLm, Direction, LmConfig, LmDims, LmEpoch, LmTrainLog, LstmLm, LM_LAYERS,
};
pub use ngram::{NgramLm, BOS_TOKEN};

use crate::error::{Error, Result};

/// Anything that assigns a naturalness score to a token sequence:
/// mean log-likelihood per token, higher = more natural.
pub trait SequenceScorer {
    fn score(&self, tokens: &[String]) -> Result<f64>;
}

/// Per-token perplexity under a scorer.
pub fn perplexity<S: SequenceScorer + ?Sized>(scorer: &S, tokens: &[String]) -> Result<f64> {
    Ok((-scorer.score(tokens)?).exp())
}

/// If `mutated` is `original` with exactly one extra token, the
/// leftmost position where that token can have been inserted.
pub fn is_single_insertion(original: &[String], mutated: &[String]) -> Option<usize> {
    if mutated.len() != original.len() + 1 {
        return None;
    }
    // Positions up to the first divergence are prefix-compatible; the
    // answer is the leftmost of them whose suffix also lines up, so a
    // run of equal tokens reports its first slot.
    let split = original
        .iter()
        .zip(mutated)
        .position(|(a, b)| a != b)
        .unwrap_or(original.len());
    (0..=split).find(|&i| mutated[i + 1..] == original[i..])
}

/// Naturalness change caused by one insertion:
/// `score(mutated) - score(original)`.
pub fn naturalness_delta<S: SequenceScorer + ?Sized>(
    scorer: &S,
    original: &[String],
    mutated: &[String],
) -> Result<f64> {
    if is_single_insertion(original, mutated).is_none() {
        return Err(Error::NotInsertion);
    }
    Ok(scorer.score(mutated)? - scorer.score(original)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toks(raw: &[&str]) -> Vec<String> {
        raw.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn detects_single_insertions_at_every_position() {
        let original = toks(&["a", "b", "c"]);
        assert_eq!(is_single_insertion(&original, &toks(&["x", "a", "b", "c"])), Some(0));
        assert_eq!(is_single_insertion(&original, &toks(&["a", "x", "b", "c"])), Some(1));
        assert_eq!(is_single_insertion(&original, &toks(&["a", "b", "c", "x"])), Some(3));
        assert_eq!(is_single_insertion(&[], &toks(&["x"])), Some(0));
    }

    #[test]
    fn duplicate_insertions_report_the_leftmost_position() {
        // Inserting "a" anywhere into ["a", "a"] yields the same
        // sequence; the canonical position is 0.
        assert_eq!(
            is_single_insertion(&toks(&["a", "a"]), &toks(&["a", "a", "a"])),
            Some(0)
        );
        assert_eq!(
            is_single_insertion(&toks(&["a", "b"]), &toks(&["a", "a", "b"])),
            Some(0)
        );
    }

    #[test]
    fn rejects_non_insertions() {
        let original = toks(&["a", "b"]);
        assert_eq!(is_single_insertion(&original, &original), None);
        assert_eq!(is_single_insertion(&original, &toks(&["a", "x"])), None);
        assert_eq!(is_single_insertion(&original, &toks(&["a", "x", "y", "b"])), None);
        assert_eq!(is_single_insertion(&original, &toks(&["x", "y", "b"])), None);
        assert_eq!(is_single_insertion(&original, &toks(&["b", "a", "x"])), None);
    }

    #[test]
    fn delta_prefers_the_expected_insertion() {
        let corpus: Vec<Vec<String>> = (0..30).map(|_| toks(&["shoot", "on", "them"])).collect();
        let lm = NgramLm::train(&corpus, 2, 0.01).unwrap();
        let original = toks(&["shoot", "them"]);
        let expected = naturalness_delta(&lm, &original, &toks(&["shoot", "on", "them"])).unwrap();
        let unseen = naturalness_delta(&lm, &original, &toks(&["shoot", "shoot", "them"])).unwrap();
        assert!(
            expected > unseen,
            "expected insertion {expected} vs unseen {unseen}"
        );
    }

    #[test]
    fn delta_requires_an_insertion_relation() {
        let lm = NgramLm::train(&[toks(&["a", "b"])], 2, 0.01).unwrap();
        let original = toks(&["a", "b"]);
        assert!(matches!(
            naturalness_delta(&lm, &original, &original).unwrap_err(),
            Error::NotInsertion
        ));
        assert!(matches!(
            naturalness_delta(&lm, &original, &toks(&["a", "x"])).unwrap_err(),
            Error::NotInsertion
        ));
    }

    #[test]
    fn delta_is_deterministic() {
        let lm = NgramLm::train(&[toks(&["a", "b"]), toks(&["b", "a"])], 2, 0.01).unwrap();
        let original = toks(&["a"]);
        let mutated = toks(&["a", "b"]);
        let first = naturalness_delta(&lm, &original, &mutated).unwrap();
        let second = naturalness_delta(&lm, &original, &mutated).unwrap();
        assert_eq!(first.to_bits(), second.to_bits());
    }

    #[test]
    fn perplexity_inverts_the_mean_log_likelihood() {
        let lm = NgramLm::train(&[toks(&["a", "b"]), toks(&["a", "b"])], 2, 0.01).unwrap();
        let tokens = toks(&["a", "b"]);
        let score = lm.score(&tokens).unwrap();
        assert_relative_eq!(
            perplexity(&lm, &tokens).unwrap(),
            (-score).exp(),
            max_relative = 1e-15
        );
    }
}
