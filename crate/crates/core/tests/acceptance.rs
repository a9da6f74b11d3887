//! Acceptance gate.
//!
//! Ten checks: gradient fidelity, oracle equivalence for ranking and
//! insertion search, directional effects of attention supervision on a
//! planted-cue corpus, bias-flip reduction, mining correctness, metric
//! oracles, language-model sanity, second-order machinery, and report
//! determinism. Each test prints one summary line with its measured
//! numbers; every tolerance is a named constant.

use std::collections::BTreeSet;
use std::time::Instant;

use once_cell::sync::Lazy;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use raudit_core::adversary::{best_insertion, build_adv_set, flip_rate, mine_unigrams};
use raudit_core::corpus::{
    synth_corpus, BiasSpec, ContextAnnotations, Corpus, FeatureDist, Label, MentionSpec,
    SynthSpec, TriState, Tweet, Vocabulary,
};
use raudit_core::experiment::{
    render_report, run_experiment, write_report, CorpusSource, ExperimentConfig, ScorerSpec,
};
use raudit_core::interpret::{
    group_difference, rationale_rank, rr_stats, second_order_consistency, ImpactRecord,
    SecondOrder,
};
use raudit_core::langmodel::{train_lm, Direction, LmConfig, NgramLm, SequenceScorer};
use raudit_core::metrics::f1_scores;
use raudit_core::models::{
    attention_target, init_model_params, loss_with_grads, majority_vote, train, Classifier,
    LossVariant, Model, ModelDims, ModelKind, TrainConfig, CONTEXT_FEATURES,
};
use raudit_core::numerics::{grad_check, softmax, OptimizerKind, ParamStore, Tape};
use raudit_core::rng::{derive_seed, seeded, stage_tag};
use raudit_core::Result;

// Criterion 1: gradient fidelity.
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;
const GRAD_INSTANCES: usize = 100;
const GRAD_TIME_LIMIT_SECS: f64 = 120.0;

// Criteria 2 and 3: oracle equivalence.
const RANK_ORACLE_INSTANCES: usize = 1000;
const RANK_ORACLE_MAX_LEN: usize = 8;
const INSERTION_ORACLE_INSTANCES: usize = 1000;
const INSERTION_ORACLE_MAX_LEN: usize = 10;

// Criteria 4 and 5: directional effects on the planted corpus.
const FLEET_SEEDS: usize = 5;
const FLEET_MIN_WINS: usize = 4;
const ATTENTION_LAMBDA: f64 = 100.0;
const ATTENTION_MASS_MIN: f64 = 0.9;
const SUPERVISION_TIME_LIMIT_SECS: f64 = 600.0;
const FLIP_RATIO_MAX: f64 = 0.5;
const BASELINE_FLIPS_MIN: f64 = 10.0;
const ADV_SET_SIZE: usize = 600;

// Criterion 6: mining.
const MINING_GAP_TOL: f64 = 1e-6;

// Criterion 7: metric oracles.
const METRIC_TOL: f64 = 1e-9;

// Criterion 8: language-model sanity.
const LM_PAIRS: usize = 200;
const LM_MIN_WINS: usize = 190;

// Criterion 9: second-order machinery.
const SECOND_ORDER_CASES: usize = 100;

fn rng_for(name: &str, i: u64) -> ChaCha8Rng {
    seeded(derive_seed(0xACCE97, &[stage_tag(name), i]))
}

// ---------------------------------------------------------------------
// Criterion 1: every differentiable op and the full loss graph pass
// central finite-difference checks at 64-bit precision.
// ---------------------------------------------------------------------

type Build = Box<dyn Fn(&mut Tape) -> Result<usize>>;

fn store_with(rng: &mut ChaCha8Rng, pairs: &[(&str, usize, usize)]) -> ParamStore {
    let mut store = ParamStore::new();
    for &(name, r, c) in pairs {
        store.init_uniform(name, r, c, rng);
    }
    store
}

/// Scalar readout: dot with a fixed random vector so every entry's
/// gradient is exercised (ones would zero out softmax gradients).
fn readout(tape: &mut Tape, id: usize, weights: &[f64]) -> Result<usize> {
    let w = tape.vector(weights.to_vec())?;
    tape.dot(id, w)
}

fn rand_weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn distinct_ids(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<u32> {
    let mut pool: Vec<u32> = (0..vocab as u32).collect();
    pool.shuffle(rng);
    pool.truncate(len);
    pool
}

fn op_cases(rng: &mut ChaCha8Rng, op: &str) -> (ParamStore, Build) {
    let d = rng.random_range(2..=4usize);
    match op {
        "embed" => {
            let vocab = rng.random_range(4..=6usize);
            let len = rng.random_range(1..=3usize);
            let store = store_with(rng, &[("emb", vocab, d)]);
            // Distinct rows keep the maxpool readout away from exact ties.
            let ids = distinct_ids(rng, vocab, len);
            let w = rand_weights(rng, d);
            (
                store,
                Box::new(move |tape| {
                    let emb = tape.param("emb")?;
                    let seq = tape.embed(emb, &ids)?;
                    let pooled = tape.maxpool_over_time(seq)?;
                    readout(tape, pooled, &w)
                }),
            )
        }
        "dense_bias" | "dense" => {
            let m = rng.random_range(2..=4usize);
            let with_bias = op == "dense_bias";
            let mut pairs = vec![("w", m, d), ("x", d, 1)];
            if with_bias {
                pairs.push(("b", m, 1));
            }
            let store = store_with(rng, &pairs);
            let w = rand_weights(rng, m);
            (
                store,
                Box::new(move |tape| {
                    let wp = tape.param("w")?;
                    let x = tape.param("x")?;
                    let b = if with_bias { Some(tape.param("b")?) } else { None };
                    let y = tape.dense(wp, x, b)?;
                    readout(tape, y, &w)
                }),
            )
        }
        "conv_w1" | "conv_w2" => {
            let vocab = 6;
            let filters = rng.random_range(2..=3usize);
            let len = rng.random_range(1..=4usize);
            let wide = op == "conv_w2";
            let store = store_with(
                rng,
                &[
                    ("emb", vocab, d),
                    ("w", filters, if wide { 2 * d } else { d }),
                    ("b", filters, 1),
                ],
            );
            let ids = distinct_ids(rng, vocab, len);
            let w = rand_weights(rng, filters);
            (
                store,
                Box::new(move |tape| {
                    let emb = tape.param("emb")?;
                    let seq = tape.embed(emb, &ids)?;
                    let cw = tape.param("w")?;
                    let cb = tape.param("b")?;
                    let conv = if wide {
                        tape.conv_w2(cw, cb, seq)?
                    } else {
                        tape.conv_w1(cw, cb, seq)?
                    };
                    let pooled = tape.maxpool_over_time(conv)?;
                    readout(tape, pooled, &w)
                }),
            )
        }
        "maxpool" => {
            let vocab = 6;
            let len = rng.random_range(1..=4usize);
            let store = store_with(rng, &[("emb", vocab, d)]);
            let ids = distinct_ids(rng, vocab, len);
            let w = rand_weights(rng, d);
            (
                store,
                Box::new(move |tape| {
                    let emb = tape.param("emb")?;
                    let seq = tape.embed(emb, &ids)?;
                    let pooled = tape.maxpool_over_time(seq)?;
                    readout(tape, pooled, &w)
                }),
            )
        }
        "lstm_cell" => {
            let hidden = rng.random_range(2..=3usize);
            let steps = rng.random_range(1..=3usize);
            let store = store_with(
                rng,
                &[
                    ("w_ih", 4 * hidden, d),
                    ("w_hh", 4 * hidden, hidden),
                    ("b", 4 * hidden, 1),
                    ("x", d, 1),
                ],
            );
            let w = rand_weights(rng, hidden);
            (
                store,
                Box::new(move |tape| {
                    let w_ih = tape.param("w_ih")?;
                    let w_hh = tape.param("w_hh")?;
                    let b = tape.param("b")?;
                    let x = tape.param("x")?;
                    let mut h = tape.vector(vec![0.0; hidden])?;
                    let mut c = tape.vector(vec![0.0; hidden])?;
                    for _ in 0..steps {
                        let hc = tape.lstm_cell(w_ih, w_hh, b, x, h, c)?;
                        h = tape.slice(hc, 0, hidden)?;
                        c = tape.slice(hc, hidden, hidden)?;
                    }
                    readout(tape, h, &w)
                }),
            )
        }
        "slice" => {
            let n = rng.random_range(3..=6usize);
            let start = rng.random_range(0..n - 1);
            let len = rng.random_range(1..=n - start);
            let store = store_with(rng, &[("x", n, 1)]);
            let w = rand_weights(rng, len);
            (
                store,
                Box::new(move |tape| {
                    let x = tape.param("x")?;
                    let s = tape.slice(x, start, len)?;
                    readout(tape, s, &w)
                }),
            )
        }
        "tanh" | "sigmoid" | "softmax" => {
            let n = rng.random_range(2..=5usize);
            let store = store_with(rng, &[("x", n, 1)]);
            let w = rand_weights(rng, n);
            let name = op.to_string();
            (
                store,
                Box::new(move |tape| {
                    let x = tape.param("x")?;
                    let y = match name.as_str() {
                        "tanh" => tape.tanh(x)?,
                        "sigmoid" => tape.sigmoid(x)?,
                        _ => tape.softmax(x)?,
                    };
                    readout(tape, y, &w)
                }),
            )
        }
        "dot" => {
            let n = rng.random_range(2..=5usize);
            let store = store_with(rng, &[("a", n, 1), ("b", n, 1)]);
            (
                store,
                Box::new(move |tape| {
                    let a = tape.param("a")?;
                    let b = tape.param("b")?;
                    tape.dot(a, b)
                }),
            )
        }
        "add" => {
            let n = rng.random_range(2..=5usize);
            let store = store_with(rng, &[("a", n, 1), ("b", n, 1)]);
            let w = rand_weights(rng, n);
            (
                store,
                Box::new(move |tape| {
                    let a = tape.param("a")?;
                    let b = tape.param("b")?;
                    let y = tape.add(a, b)?;
                    readout(tape, y, &w)
                }),
            )
        }
        "scale" => {
            let n = rng.random_range(2..=5usize);
            let factor = rng.random_range(-2.0..2.0);
            let store = store_with(rng, &[("x", n, 1)]);
            let w = rand_weights(rng, n);
            (
                store,
                Box::new(move |tape| {
                    let x = tape.param("x")?;
                    let y = tape.scale(x, factor)?;
                    readout(tape, y, &w)
                }),
            )
        }
        "concat" => {
            let n = rng.random_range(2..=4usize);
            let m = rng.random_range(2..=4usize);
            let store = store_with(rng, &[("a", n, 1), ("b", m, 1)]);
            let w = rand_weights(rng, n + m);
            (
                store,
                Box::new(move |tape| {
                    let a = tape.param("a")?;
                    let b = tape.param("b")?;
                    let y = tape.concat(&[a, b])?;
                    readout(tape, y, &w)
                }),
            )
        }
        "stack" => {
            let n = rng.random_range(2..=4usize);
            let store = store_with(rng, &[("x", n, 1), ("y", n, 1)]);
            let w = rand_weights(rng, n);
            (
                store,
                Box::new(move |tape| {
                    let x = tape.param("x")?;
                    let y = tape.param("y")?;
                    let scalars: Vec<usize> = (0..n)
                        .map(|i| {
                            let xi = tape.slice(x, i, 1)?;
                            let yi = tape.slice(y, i, 1)?;
                            tape.dot(xi, yi)
                        })
                        .collect::<Result<_>>()?;
                    let stacked = tape.stack(&scalars)?;
                    let soft = tape.softmax(stacked)?;
                    readout(tape, soft, &w)
                }),
            )
        }
        "weighted_sum" => {
            let rows = rng.random_range(2..=4usize);
            let names: Vec<String> = (0..rows).map(|i| format!("r{i}")).collect();
            let mut pairs: Vec<(&str, usize, usize)> = vec![("alpha", rows, 1)];
            for name in &names {
                pairs.push((name.as_str(), d, 1));
            }
            let store = store_with(rng, &pairs);
            let w = rand_weights(rng, d);
            (
                store,
                Box::new(move |tape| {
                    let alpha = tape.param("alpha")?;
                    let soft = tape.softmax(alpha)?;
                    let rows: Vec<usize> = names
                        .iter()
                        .map(|n| tape.param(n))
                        .collect::<Result<_>>()?;
                    let y = tape.weighted_sum(soft, &rows)?;
                    readout(tape, y, &w)
                }),
            )
        }
        "bce" => {
            let store = store_with(rng, &[("x", 3, 1)]);
            let targets: Vec<f64> = (0..3)
                .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
                .collect();
            (
                store,
                Box::new(move |tape| {
                    let x = tape.param("x")?;
                    let scores = tape.sigmoid(x)?;
                    tape.bce(scores, &targets)
                }),
            )
        }
        "kl_div" => {
            let n = rng.random_range(2..=4usize);
            let store = store_with(rng, &[("x", n, 1)]);
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let target: Vec<f64> = raw.iter().map(|v| v / total).collect();
            (
                store,
                Box::new(move |tape| {
                    let x = tape.param("x")?;
                    let approx = tape.softmax(x)?;
                    tape.kl_div(&target, approx)
                }),
            )
        }
        other => panic!("unknown op case {other}"),
    }
}

#[test]
fn criterion_01_gradient_fidelity() {
    let started = Instant::now();
    let ops = [
        "embed",
        "dense_bias",
        "dense",
        "conv_w1",
        "conv_w2",
        "maxpool",
        "lstm_cell",
        "slice",
        "tanh",
        "sigmoid",
        "softmax",
        "dot",
        "add",
        "scale",
        "concat",
        "stack",
        "weighted_sum",
        "bce",
        "kl_div",
    ];
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for op in ops {
        for i in 0..GRAD_INSTANCES {
            let mut rng = rng_for(op, i as u64);
            let (mut store, build) = op_cases(&mut rng, op);
            let report = grad_check(&mut store, GRAD_REL_TOL, GRAD_STEP, |s| {
                let mut tape = Tape::new(s);
                let loss = build(&mut tape)?;
                tape.backward(loss)?;
                Ok((tape.scalar(loss), tape.param_grads()))
            })
            .expect("gradient check runs");
            assert!(
                report.passed(),
                "{op} instance {i}: rel err {} at {}[{}]",
                report.max_rel_err,
                report.worst_param,
                report.worst_index
            );
            worst = worst.max(report.max_rel_err);
            checked += report.entries_checked;
        }
    }

    // Full training-loss graphs: both architectures, both loss variants,
    // attention supervision on and off.
    let dims = ModelDims {
        vocab: 6,
        embed: 3,
        hidden: 4,
        filters: 3,
        z: 3,
    };
    for i in 0..GRAD_INSTANCES {
        let mut rng = rng_for("loss-graph", i as u64);
        let variant = if i % 2 == 0 {
            LossVariant::SigmoidBce
        } else {
            LossVariant::SoftmaxXent
        };
        let (kind, supervised) = match i % 4 {
            0 => (ModelKind::Cnn, false),
            1 => (ModelKind::Lstm, false),
            _ => (ModelKind::LstmRationale, true),
        };
        let len = rng.random_range(1..=5usize);
        let ids: Vec<u32> = (0..len).map(|_| rng.random_range(0..6u32)).collect();
        let context = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let gold = Label::ALL[rng.random_range(0..3usize)];
        let a_star = if supervised {
            let k = rng.random_range(1..=len);
            let positions: BTreeSet<usize> =
                distinct_ids(&mut rng, len, k).into_iter().map(|v| v as usize).collect();
            Some(attention_target(&positions, len).expect("valid target"))
        } else {
            None
        };
        let mut store = init_model_params(kind, &dims, derive_seed(31337, &[i as u64]));
        let report = grad_check(&mut store, GRAD_REL_TOL, GRAD_STEP, |s| {
            loss_with_grads(
                kind,
                s,
                dims.hidden,
                variant,
                &ids,
                &context,
                gold,
                a_star.as_deref(),
                4.0,
            )
        })
        .expect("loss gradient check runs");
        assert!(
            report.passed(),
            "loss graph instance {i} ({kind}, {variant:?}): rel err {} at {}[{}]",
            report.max_rel_err,
            report.worst_param,
            report.worst_index
        );
        worst = worst.max(report.max_rel_err);
        checked += report.entries_checked;
    }

    let elapsed = started.elapsed().as_secs_f64();
    assert!(
        elapsed < GRAD_TIME_LIMIT_SECS,
        "gradient suite took {elapsed:.1}s, limit {GRAD_TIME_LIMIT_SECS}s"
    );
    println!(
        "criterion 1: PASS gradient fidelity ({} ops + loss graphs, {GRAD_INSTANCES} instances each, \
         {checked} entries, max rel err {worst:.3e}, {elapsed:.1}s)",
        ops.len()
    );
}

// ---------------------------------------------------------------------
// Criterion 2: rationale rank equals a brute-force oracle.
// ---------------------------------------------------------------------

#[test]
fn criterion_02_rationale_rank_oracle() {
    for i in 0..RANK_ORACLE_INSTANCES {
        let mut rng = rng_for("rank-oracle", i as u64);
        let len = rng.random_range(1..=RANK_ORACLE_MAX_LEN);
        // Every third instance draws from a coarse grid to force ties.
        let influences: Vec<f64> = (0..len)
            .map(|_| {
                if i % 3 == 0 {
                    [0.0, 0.25, 0.5][rng.random_range(0..3usize)]
                } else {
                    rng.random_range(-1.0..1.0)
                }
            })
            .collect();
        let k = rng.random_range(1..=len);
        let rationales: BTreeSet<usize> = distinct_ids(&mut rng, len, k)
            .into_iter()
            .map(|v| v as usize)
            .collect();

        let oracle = rationales
            .iter()
            .map(|&r| influences.iter().filter(|&&v| v > influences[r]).count())
            .min()
            .expect("nonempty rationale set");
        let got = rationale_rank(&influences, &rationales).expect("valid instance");
        assert_eq!(got, oracle, "instance {i}: influences {influences:?} R {rationales:?}");
    }
    println!(
        "criterion 2: PASS rationale-rank oracle ({RANK_ORACLE_INSTANCES} instances, l <= {RANK_ORACLE_MAX_LEN}, exact)"
    );
}

// ---------------------------------------------------------------------
// Criterion 3: insertion search equals naive enumeration under both
// scorer families.
// ---------------------------------------------------------------------

fn naive_best(scorer: &dyn SequenceScorer, tokens: &[String], unigram: &str) -> (usize, f64) {
    let base = scorer.score(tokens).unwrap();
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for pos in 0..=tokens.len() {
        let mut mutated = tokens.to_vec();
        mutated.insert(pos, unigram.to_string());
        let delta = scorer.score(&mutated).unwrap() - base;
        if delta > best.1 {
            best = (pos, delta);
        }
    }
    best
}

#[test]
fn criterion_03_insertion_search_oracle() {
    let alphabet: Vec<String> = ["a", "b", "c", "d", "e", "f", "g", "h"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rng = rng_for("insertion-corpus", 0);
    let training: Vec<Vec<String>> = (0..60)
        .map(|_| {
            let len = rng.random_range(3..=9usize);
            (0..len)
                .map(|_| alphabet[rng.random_range(0..alphabet.len())].clone())
                .collect()
        })
        .collect();
    let ngram = NgramLm::train(&training, 2, 0.05).expect("ngram trains");
    let lm_config = LmConfig {
        embed_dim: 6,
        hidden_dim: 8,
        epochs: 3,
        patience: 5,
        learning_rate: 0.02,
        batch_size: 16,
        seed: 17,
        ..LmConfig::default()
    };
    let (lm, _) = train_lm(&training, Direction::Forward, &lm_config).expect("lm trains");
    let scorers: [(&str, &dyn SequenceScorer); 2] = [("ngram", &ngram), ("lm", &lm)];

    for i in 0..INSERTION_ORACLE_INSTANCES {
        let mut rng = rng_for("insertion-oracle", i as u64);
        let len = rng.random_range(1..=INSERTION_ORACLE_MAX_LEN);
        let tokens: Vec<String> = (0..len)
            .map(|_| {
                if rng.random_bool(0.05) {
                    "zzz".to_string() // unseen: exercises the UNK path
                } else {
                    alphabet[rng.random_range(0..alphabet.len())].clone()
                }
            })
            .collect();
        let unigram = if rng.random_bool(0.1) {
            "qqq".to_string()
        } else {
            alphabet[rng.random_range(0..alphabet.len())].clone()
        };
        for (name, scorer) in scorers {
            let got = best_insertion(scorer, "t", &tokens, &unigram).expect("search runs");
            let (oracle_pos, oracle_delta) = naive_best(scorer, &tokens, &unigram);
            assert_eq!(
                got.position, oracle_pos,
                "instance {i} under {name}: tokens {tokens:?} unigram {unigram}"
            );
            assert_eq!(got.delta, oracle_delta, "instance {i} under {name}: delta drift");
            assert_eq!(got.mutated.len(), tokens.len() + 1);
            let mut restored = got.mutated.clone();
            restored.remove(got.position);
            assert_eq!(restored, tokens, "instance {i}: deletion must restore the original");
        }
    }
    println!(
        "criterion 3: PASS insertion-search oracle ({INSERTION_ORACLE_INSTANCES} tweets, l <= {INSERTION_ORACLE_MAX_LEN}, both scorers, exact)"
    );
}

// ---------------------------------------------------------------------
// Criteria 4 and 5 share one fixture: a 2,000-tweet corpus whose true
// aggression cues are drawn from a 350-token pool (so each cue is too
// rare to learn without supervision) plus a spurious function word that
// co-occurs with aggression 0.9 vs 0.1. After one epoch the plain model
// leans on the frequent biased token while the supervised one is forced
// onto the rationale positions; that daylight drives both the rank and
// the flip comparisons. Five seeded model pairs.
// ---------------------------------------------------------------------

const BIAS_WORD: &str = "lowkey";
const FLEET_ROOT_SEED: u64 = 4243;

fn fleet_spec() -> SynthSpec {
    SynthSpec {
        n: 2000,
        len_range: (6, 10),
        cue_tokens: (0..350).map(|i| format!("cue{i:03}")).collect(),
        bias: Some(BiasSpec {
            token: BIAS_WORD.into(),
            p_aggression: 0.9,
            p_other: 0.1,
        }),
        ..SynthSpec::default()
    }
}

fn fleet_train_config(seed: u64, lambda: f64, epochs: usize) -> TrainConfig {
    TrainConfig {
        lambda_attn: lambda,
        learning_rate: 0.02,
        epochs,
        batch_size: 32,
        seed,
        loss_variant: LossVariant::SigmoidBce,
        embed_dim: 12,
        hidden_dim: 16,
        z_dim: 16,
        optimizer: OptimizerKind::adaptive(),
        early_stop: None,
        ..TrainConfig::default()
    }
}

struct Fleet {
    corpus: Corpus,
    vocab: Vocabulary,
    all: Vec<usize>,
    baseline: Vec<Model>,
    supervised: Vec<Model>,
    build_secs: f64,
}

static FLEET: Lazy<Fleet> = Lazy::new(|| {
    let started = Instant::now();
    let corpus = synth_corpus(&fleet_spec(), FLEET_ROOT_SEED).expect("synthesis");
    let vocab = Vocabulary::build(corpus.tweets.iter().flat_map(|t| t.tokens.iter()), 1);
    let all: Vec<usize> = (0..corpus.len()).collect();
    let member = |kind: ModelKind, i: usize| {
        let seed = derive_seed(FLEET_ROOT_SEED, &[stage_tag("fleet"), kind as u64, i as u64]);
        train(&corpus, &all, kind, &vocab, &fleet_train_config(seed, 4.0, 1))
            .expect("fleet member trains")
            .model
    };
    let baseline: Vec<Model> = (0..FLEET_SEEDS).map(|i| member(ModelKind::Lstm, i)).collect();
    let supervised: Vec<Model> = (0..FLEET_SEEDS)
        .map(|i| member(ModelKind::LstmRationale, i))
        .collect();
    Fleet {
        corpus,
        vocab,
        all,
        baseline,
        supervised,
        build_secs: started.elapsed().as_secs_f64(),
    }
});

#[test]
fn criterion_04_attention_supervision_effect() {
    let started = Instant::now();
    let fleet = &*FLEET;

    let mut wins = 0;
    let mut rows = String::new();
    for i in 0..FLEET_SEEDS {
        let base = rr_stats(&fleet.baseline[i], &fleet.corpus, &fleet.all, &fleet.vocab)
            .expect("rr computes")
            .expect("nonempty cohort");
        let sup = rr_stats(&fleet.supervised[i], &fleet.corpus, &fleet.all, &fleet.vocab)
            .expect("rr computes")
            .expect("nonempty cohort");
        let win = sup.avg_rr < base.avg_rr && sup.frac_rr0 > base.frac_rr0;
        wins += win as usize;
        rows.push_str(&format!(
            "  seed {i}: avg_rr {:.4} vs {:.4}, frac_rr0 {:.4} vs {:.4} -> {}\n",
            sup.avg_rr,
            base.avg_rr,
            sup.frac_rr0,
            base.frac_rr0,
            if win { "win" } else { "loss" }
        ));
    }
    print!("{rows}");
    assert!(
        wins >= FLEET_MIN_WINS,
        "supervision won only {wins}/{FLEET_SEEDS} seeds\n{rows}"
    );

    // Strong supervision pins attention onto the rationale positions.
    // The attention logit is tanh-bounded, so the softmax ratio between
    // two positions never exceeds e^2 and mass above 0.9 is reachable
    // only when rationale positions are not badly outnumbered; the mass
    // probe therefore uses short tweets that are mostly cue tokens.
    let mass_spec = SynthSpec {
        n: 2000,
        len_range: (1, 2),
        max_cues_per_tweet: 2,
        bias: None,
        ..SynthSpec::default()
    };
    let mass_corpus = synth_corpus(
        &mass_spec,
        derive_seed(FLEET_ROOT_SEED, &[stage_tag("mass-corpus")]),
    )
    .expect("mass corpus synthesizes");
    let mass_vocab =
        Vocabulary::build(mass_corpus.tweets.iter().flat_map(|t| t.tokens.iter()), 1);
    let mass_all: Vec<usize> = (0..mass_corpus.len()).collect();
    let seed = derive_seed(FLEET_ROOT_SEED, &[stage_tag("lambda-100")]);
    let strong_config = TrainConfig {
        learning_rate: 0.04,
        ..fleet_train_config(seed, ATTENTION_LAMBDA, 12)
    };
    let strong = train(
        &mass_corpus,
        &mass_all,
        ModelKind::LstmRationale,
        &mass_vocab,
        &strong_config,
    )
    .expect("strong model trains")
    .model;
    let mut mass_sum = 0.0;
    let mut mass_n = 0usize;
    for tweet in &mass_corpus.tweets {
        if tweet.rationale_indices.is_empty() {
            continue;
        }
        let attention = strong
            .attention(&mass_vocab.encode(&tweet.tokens), &tweet.context_features)
            .expect("attention computes");
        mass_sum += tweet
            .rationale_indices
            .iter()
            .map(|&p| attention[p])
            .sum::<f64>();
        mass_n += 1;
    }
    let mean_mass = mass_sum / mass_n as f64;
    assert!(
        mean_mass > ATTENTION_MASS_MIN,
        "mean attention mass on rationales was {mean_mass:.4} at lambda {ATTENTION_LAMBDA}"
    );

    let elapsed = fleet.build_secs + started.elapsed().as_secs_f64();
    assert!(
        elapsed < SUPERVISION_TIME_LIMIT_SECS,
        "supervision suite took {elapsed:.0}s, limit {SUPERVISION_TIME_LIMIT_SECS}s"
    );
    println!(
        "criterion 4: PASS attention supervision ({wins}/{FLEET_SEEDS} seeds, \
         attention mass {mean_mass:.3} at lambda {ATTENTION_LAMBDA}, {elapsed:.0}s incl. training)"
    );
}

#[test]
fn criterion_05_bias_flip_reduction() {
    let fleet = &*FLEET;
    let sequences: Vec<Vec<String>> =
        fleet.corpus.tweets.iter().map(|t| t.tokens.clone()).collect();
    let scorer = NgramLm::train(&sequences, 3, 0.01).expect("scorer trains");
    let adv_set = build_adv_set(&scorer, &fleet.corpus, &fleet.all, BIAS_WORD, ADV_SET_SIZE)
        .expect("adversarial set builds");

    let count = |model: &Model| {
        flip_rate(model, &fleet.corpus, &fleet.vocab, &adv_set)
            .expect("flip evaluation")
            .flips as f64
    };
    let base_flips: Vec<f64> = fleet.baseline.iter().map(&count).collect();
    let sup_flips: Vec<f64> = fleet.supervised.iter().map(&count).collect();
    let base_mean = base_flips.iter().sum::<f64>() / base_flips.len() as f64;
    let sup_mean = sup_flips.iter().sum::<f64>() / sup_flips.len() as f64;

    assert!(
        base_mean >= BASELINE_FLIPS_MIN,
        "baseline averaged only {base_mean:.1} flips ({base_flips:?}); ratio would be meaningless"
    );
    assert!(
        sup_mean <= FLIP_RATIO_MAX * base_mean,
        "supervised flips {sup_mean:.1} ({sup_flips:?}) exceed {FLIP_RATIO_MAX} x baseline {base_mean:.1} ({base_flips:?})"
    );
    println!(
        "criterion 5: PASS bias flips (baseline {base_mean:.1} {base_flips:?}, \
         supervised {sup_mean:.1} {sup_flips:?}, ratio {:.3})",
        sup_mean / base_mean
    );
}

// ---------------------------------------------------------------------
// Criterion 6: l1 mining surfaces the planted token, zeroes a balanced
// one, and certifies optimality.
// ---------------------------------------------------------------------

fn plain_tweet(id: &str, tokens: &[&str], label: Label) -> Tweet {
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

#[test]
fn criterion_06_l1_mining() {
    // "glock" is the only perfect aggression predictor; the g tokens
    // appear equally in both classes, and "the" plus the f fillers are
    // exactly balanced, so their optimal weights are zero.
    let mut tweets = Vec::new();
    for i in 0..60 {
        let (g_a, g_o) = (format!("g{}", i % 3), format!("g{}", (i + 1) % 3));
        let f = format!("f{}", i % 6);
        tweets.push(plain_tweet(
            &format!("a{i}"),
            &["the", "glock", g_a.as_str(), f.as_str()],
            Label::Aggression,
        ));
        tweets.push(plain_tweet(
            &format!("o{i}"),
            &["the", "chill", g_o.as_str(), f.as_str()],
            if i % 2 == 0 { Label::Other } else { Label::Loss },
        ));
    }
    let corpus = Corpus { tweets };
    let indices: Vec<usize> = (0..corpus.len()).collect();
    let outcome = mine_unigrams(&corpus, &indices, 0.02).expect("mining converges");

    let top3: Vec<&str> = outcome
        .unigrams
        .iter()
        .take(3)
        .map(|u| u.token.as_str())
        .collect();
    assert!(top3.contains(&"glock"), "planted token missed top-3: {top3:?}");
    assert_eq!(outcome.all_weights["the"], 0.0, "balanced token must be exactly zero");
    assert_eq!(outcome.all_weights["f0"], 0.0, "balanced filler must be exactly zero");
    assert!(
        outcome.optimality_gap <= MINING_GAP_TOL,
        "subgradient gap {} exceeds {MINING_GAP_TOL}",
        outcome.optimality_gap
    );
    println!(
        "criterion 6: PASS mining (top-3 {top3:?}, balanced weight 0 exact, gap {:.2e})",
        outcome.optimality_gap
    );
}

// ---------------------------------------------------------------------
// Criterion 7: metric oracles.
// ---------------------------------------------------------------------

struct FixedScores([f64; 3]);

impl Classifier for FixedScores {
    fn class_scores(&self, _: &[u32], _: &[f64; CONTEXT_FEATURES]) -> Result<[f64; 3]> {
        Ok(self.0)
    }
}

#[test]
fn criterion_07_metric_oracles() {
    // KL(target || approx) with target (1, 0) and approx (1/2, 1/2) is ln 2.
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let logits = tape.vector(vec![0.0, 0.0]).unwrap();
    let approx = tape.softmax(logits).unwrap();
    let kl = tape.kl_div(&[1.0, 0.0], approx).unwrap();
    let kl_value = tape.scalar(kl);
    assert!(
        (kl_value - std::f64::consts::LN_2).abs() <= METRIC_TOL,
        "KL oracle: got {kl_value}, want ln 2"
    );

    // Softmax oracle: logits (0, ln 3) give exactly (1/4, 3/4).
    let probs = softmax(&[0.0, 3.0f64.ln()]);
    assert!((probs[0] - 0.25).abs() <= METRIC_TOL && (probs[1] - 0.75).abs() <= METRIC_TOL);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() <= METRIC_TOL);

    // F1 oracle: a class with TP=1, FP=1, FN=1 scores exactly 1/2.
    let predictions = [Label::Aggression, Label::Aggression, Label::Loss, Label::Other];
    let golds = [Label::Aggression, Label::Loss, Label::Aggression, Label::Other];
    let f1 = f1_scores(&predictions, &golds).unwrap();
    assert!(
        (f1.per_class[Label::Aggression.index()].f1 - 0.5).abs() <= METRIC_TOL,
        "F1 oracle: got {}",
        f1.per_class[Label::Aggression.index()].f1
    );

    // Majority vote: two aggression votes beat one loss vote; a full tie
    // falls back to summed scores.
    let voters = [
        FixedScores([0.9, 0.05, 0.05]),
        FixedScores([0.6, 0.3, 0.1]),
        FixedScores([0.1, 0.8, 0.1]),
    ];
    let vote = majority_vote(&voters, &[2u32], &[0.0; 3]).unwrap();
    assert_eq!(vote, Label::Aggression);
    let tied = [
        FixedScores([0.9, 0.05, 0.05]),
        FixedScores([0.1, 0.6, 0.3]),
        FixedScores([0.2, 0.1, 0.7]),
    ];
    // Summed scores: aggression 1.2, loss 0.75, other 1.05.
    let vote = majority_vote(&tied, &[2u32], &[0.0; 3]).unwrap();
    assert_eq!(vote, Label::Aggression);

    // Permutation oracle: impacts (2, 2) vs (1, 1) give exactly p = 1/6
    // under exhaustive enumeration of the 6 assignments.
    let records: Vec<ImpactRecord> = [
        (2.0, TriState::Yes),
        (2.0, TriState::Yes),
        (1.0, TriState::No),
        (1.0, TriState::No),
    ]
    .iter()
    .enumerate()
    .map(|(i, &(impact, group))| ImpactRecord {
        tweet_id: format!("t{i}"),
        impact,
        group,
    })
    .collect();
    let diff = group_difference(&records, 0).unwrap();
    assert!(diff.exact, "4 records must enumerate exactly");
    assert!((diff.mean_diff - 1.0).abs() <= METRIC_TOL);
    assert!(
        (diff.p_value - 1.0 / 6.0).abs() <= METRIC_TOL,
        "permutation oracle: got {}",
        diff.p_value
    );

    println!(
        "criterion 7: PASS metric oracles (KL ln2, softmax 1/4:3/4, F1 1/2, majority vote, p 1/6; all within {METRIC_TOL:.0e})"
    );
}

// ---------------------------------------------------------------------
// Criterion 8: the language model prefers in-distribution sequences and
// the early-stop checkpoint dominates later epochs.
// ---------------------------------------------------------------------

/// Seeded random walk over a sparse successor graph: each state allows
/// exactly two of twelve next states, so shuffling destroys most
/// transition probability.
fn walk(rng: &mut ChaCha8Rng, len: usize) -> Vec<String> {
    let mut state = rng.random_range(0..12usize);
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(format!("w{state}"));
        state = if rng.random_bool(0.5) {
            (state * 5 + 1) % 12
        } else {
            (state * 7 + 3) % 12
        };
    }
    out
}

#[test]
fn criterion_08_lm_sanity() {
    let mut rng = rng_for("lm-sanity", 0);
    let training: Vec<Vec<String>> = (0..300)
        .map(|_| {
            let len = rng.random_range(6..=12usize);
            walk(&mut rng, len)
        })
        .collect();
    let config = LmConfig {
        embed_dim: 12,
        hidden_dim: 24,
        epochs: 30,
        patience: 4,
        learning_rate: 0.01,
        batch_size: 8,
        seed: 99,
        ..LmConfig::default()
    };
    let (lm, _) = train_lm(&training, Direction::Forward, &config).expect("lm trains");

    let mut wins = 0;
    for i in 0..LM_PAIRS {
        let mut pair_rng = rng_for("lm-pair", i as u64);
        let len = pair_rng.random_range(6..=12usize);
        let original = walk(&mut pair_rng, len);
        let mut shuffled = original.clone();
        while shuffled == original {
            shuffled.shuffle(&mut pair_rng);
        }
        let s_orig = lm.score(&original).unwrap();
        let s_shuf = lm.score(&shuffled).unwrap();
        wins += (s_orig > s_shuf) as usize;
    }
    assert!(
        wins >= LM_MIN_WINS,
        "in-distribution won only {wins}/{LM_PAIRS} pairs"
    );

    // A deliberately noisy run: small data and a hot learning rate, so
    // validation loss rises after its best epoch and early stop fires.
    let small: Vec<Vec<String>> = training.iter().take(40).cloned().collect();
    let noisy = LmConfig {
        epochs: 40,
        learning_rate: 0.08,
        patience: 2,
        seed: 7,
        ..config
    };
    let (_, log) = train_lm(&small, Direction::Forward, &noisy).expect("noisy lm trains");
    let best = log.best_epoch;
    assert!(
        best + 1 < log.epochs.len(),
        "run ended at its best epoch; nothing to dominate (best {best}, epochs {})",
        log.epochs.len()
    );
    for later in &log.epochs[best + 1..] {
        assert!(
            log.epochs[best].val_loss <= later.val_loss,
            "epoch {} val {} beats the checkpoint {}",
            later.epoch,
            later.val_loss,
            log.epochs[best].val_loss
        );
    }

    println!(
        "criterion 8: PASS lm sanity ({wins}/{LM_PAIRS} pairs, checkpoint epoch {best} dominates {} later epochs, stopped_early {})",
        log.epochs.len() - best - 1,
        log.stopped_early
    );
}

// ---------------------------------------------------------------------
// Criterion 9: second-order outcomes match the closed form on a linear
// scorer, and the taxonomy appears as report fields.
// ---------------------------------------------------------------------

/// Aggression score is a sum of per-token weights; UNK and PAD weigh 0.
/// Leave-one-out influence at position i is then exactly w[ids[i]], and
/// removing any non-top token never changes which token ranks first.
struct LinearByToken {
    weights: Vec<f64>,
}

impl Classifier for LinearByToken {
    fn class_scores(&self, ids: &[u32], _: &[f64; CONTEXT_FEATURES]) -> Result<[f64; 3]> {
        let sum: f64 = ids.iter().map(|&id| self.weights[id as usize]).sum();
        Ok([sum, 0.0, 0.0])
    }
}

#[test]
fn criterion_09_second_order_machinery() {
    let vocab_size = 40;
    for i in 0..SECOND_ORDER_CASES {
        let mut rng = rng_for("second-order", i as u64);
        // Strictly increasing then shuffled: all weights distinct.
        let mut weights: Vec<f64> = (0..vocab_size).map(|j| 0.05 + 0.13 * j as f64).collect();
        weights[0] = 0.0;
        weights[1] = 0.0;
        let mut assignment: Vec<usize> = (2..vocab_size).collect();
        assignment.shuffle(&mut rng);
        let model = LinearByToken {
            weights: weights.clone(),
        };
        let len = rng.random_range(2..=10usize);
        let ids: Vec<u32> = assignment[..len].iter().map(|&j| j as u32).collect();
        let outcome = second_order_consistency(&model, &ids, &[0.0; 3], Label::Aggression)
            .expect("second-order computes");
        assert_eq!(
            outcome,
            SecondOrder::StaysTop1,
            "case {i}: linear scorer must keep its top token (ids {ids:?})"
        );
    }

    // The three-way taxonomy shows up as fields of the rendered report.
    let report = &SMALL_REPORT.1;
    assert!(
        report.contains("stays_top1,becomes_top2,displaced"),
        "taxonomy header missing from the report"
    );
    let tally_row = report
        .lines()
        .skip_while(|l| !l.starts_with("fold,kind,run,stays_top1"))
        .nth(1)
        .expect("tally row present");
    let fields: Vec<&str> = tally_row.split(',').collect();
    assert_eq!(fields.len(), 6, "row {tally_row}");
    for value in &fields[3..] {
        value.parse::<usize>().expect("tally cells are counts");
    }

    println!(
        "criterion 9: PASS second-order machinery ({SECOND_ORDER_CASES} closed-form cases, taxonomy fields present)"
    );
}

// ---------------------------------------------------------------------
// Criterion 10: rerunning the experiment yields byte-identical bodies.
// ---------------------------------------------------------------------

fn small_experiment_config() -> ExperimentConfig {
    let spec = SynthSpec {
        n: 60,
        len_range: (4, 7),
        context_features: [
            [FeatureDist { mean: 1.0, std: 0.3 }; 3],
            [FeatureDist { mean: -0.5, std: 0.3 }; 3],
            [FeatureDist { mean: 0.0, std: 0.3 }; 3],
        ],
        mention: Some(MentionSpec {
            p_yes: [0.4; 3],
            p_no: [0.4; 3],
            c3_shift_yes: 1.0,
        }),
        ..SynthSpec::default()
    };
    ExperimentConfig {
        corpus: CorpusSource::Synth(spec),
        model_kinds: vec![ModelKind::Cnn, ModelKind::LstmRationale],
        folds: 2,
        runs: 3,
        train: TrainConfig {
            epochs: 2,
            batch_size: 8,
            learning_rate: 0.05,
            optimizer: OptimizerKind::adaptive(),
            embed_dim: 8,
            hidden_dim: 8,
            conv_filters: 8,
            z_dim: 8,
            ensemble_size: 3,
            ..TrainConfig::default()
        },
        unigrams: vec!["today".into()],
        adv_set_size: 20,
        scorer: ScorerSpec::Ngram { order: 2, alpha: 0.1 },
        l1_strength: 0.02,
        min_count: 1,
        seed: 7,
    }
}

static SMALL_REPORT: Lazy<(ExperimentConfig, String)> = Lazy::new(|| {
    let config = small_experiment_config();
    let report = run_experiment(&config).expect("experiment runs");
    assert!(report.is_success(), "failures: {:?}", report.failures);
    let body = render_report(&report);
    (config, body)
});

#[test]
fn criterion_10_report_determinism() {
    let (config, first_body) = &*SMALL_REPORT;

    let rerun = run_experiment(config).expect("rerun succeeds");
    let rerun_body = render_report(&rerun);
    assert_eq!(
        first_body.as_bytes(),
        rerun_body.as_bytes(),
        "rerun produced a different report body"
    );

    // The written artifacts are byte-identical too.
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    write_report(&rerun, dir_a.path()).unwrap();
    write_report(&run_experiment(config).expect("third run"), dir_b.path()).unwrap();
    for name in ["report.md", "votes.csv", "impacts.csv", "adv_sets.jsonl", "flips.jsonl"] {
        let a = std::fs::read(dir_a.path().join(name)).unwrap();
        let b = std::fs::read(dir_b.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between reruns");
    }

    println!(
        "criterion 10: PASS determinism ({} bytes, byte-identical across reruns and writes)",
        first_body.len()
    );
}
