//! Recurrent language model: three stacked LSTM layers and a softmax
//! over the vocabulary, trained on next-token prediction in one
//! direction. A backward model is the same machine run over reversed
//! sequences.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::langmodel::SequenceScorer;
use crate::numerics::{softmax, NodeId, Optimizer, OptimizerKind, ParamStore, Tape};
use crate::rng::{derive_seed, seeded, stage_tag};

/// Stacked layer count; fixed, not configurable.
pub const LM_LAYERS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub epochs: usize,
    /// Consecutive non-improving validation epochs tolerated; 0 stops
    /// at the first one.
    pub patience: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    pub optimizer: OptimizerKind,
    pub min_count: usize,
}

impl Default for LmConfig {
    fn default() -> LmConfig {
        LmConfig {
            embed_dim: 32,
            hidden_dim: 128,
            epochs: 30,
            patience: 2,
            learning_rate: 0.005,
            batch_size: 16,
            seed: 0,
            validation_fraction: 0.2,
            optimizer: OptimizerKind::adaptive(),
            min_count: 1,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) || self.validation_fraction == 0.0 {
            return Err(Error::Config("validation fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

fn expected_lm_shapes(d: &LmDims) -> Vec<(String, usize, usize)> {
    let mut shapes = vec![("embed".to_string(), d.vocab, d.embed)];
    for layer in 0..LM_LAYERS {
        let input = if layer == 0 { d.embed } else { d.hidden };
        shapes.push((format!("lm{layer}_w_ih"), 4 * d.hidden, input));
        shapes.push((format!("lm{layer}_w_hh"), 4 * d.hidden, d.hidden));
        shapes.push((format!("lm{layer}_b"), 4 * d.hidden, 1));
    }
    shapes.push(("out_w".to_string(), d.vocab, d.hidden));
    shapes.push(("out_b".to_string(), d.vocab, 1));
    shapes
}

fn init_lm_params(dims: &LmDims, seed: u64) -> ParamStore {
    let mut rng = seeded(seed);
    let mut store = ParamStore::new();
    for (name, rows, cols) in expected_lm_shapes(dims) {
        if name.ends_with("_b") {
            store.init_zeros(&name, rows, cols);
        } else {
            store.init_uniform(&name, rows, cols, &mut rng);
        }
    }
    for layer in 0..LM_LAYERS {
        // Forget-gate bias starts at 1 so early cell state persists.
        let b = store.get_mut(&format!("lm{layer}_b")).expect("bias exists");
        for j in dims.hidden..2 * dims.hidden {
            b.values[j] = 1.0;
        }
    }
    store
}

/// One plain (tapeless) LSTM cell step over slices.
fn lstm_step(
    w_ih: &[f64],
    w_hh: &[f64],
    bias: &[f64],
    x: &[f64],
    h: &mut Vec<f64>,
    c: &mut Vec<f64>,
    hidden: usize,
) {
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    let input = x.len();
    let mut h_new = vec![0.0; hidden];
    let mut c_new = vec![0.0; hidden];
    for j in 0..hidden {
        let mut pre = [0.0f64; 4];
        for (g, p) in pre.iter_mut().enumerate() {
            let k = g * hidden + j;
            let mut acc = bias[k];
            for (jj, &xv) in x.iter().enumerate() {
                acc += w_ih[k * input + jj] * xv;
            }
            for (jj, &hv) in h.iter().enumerate() {
                acc += w_hh[k * hidden + jj] * hv;
            }
            *p = acc;
        }
        let (i_g, f_g, g_g, o_g) = (sig(pre[0]), sig(pre[1]), pre[2].tanh(), sig(pre[3]));
        c_new[j] = f_g * c[j] + i_g * g_g;
        h_new[j] = o_g * c_new[j].tanh();
    }
    *h = h_new;
    *c = c_new;
}

/// Per-position next-token distributions for the direction-mapped id
/// sequence: position `t` is `P(. | ids[..t])`, with PAD as the start
/// context.
fn distributions(params: &ParamStore, dims: &LmDims, ids: &[u32]) -> Result<Vec<Vec<f64>>> {
    if ids.is_empty() {
        return Err(Error::EmptySequence);
    }
    let emb = params.get("embed")?;
    let mut layer_params = Vec::with_capacity(LM_LAYERS);
    for layer in 0..LM_LAYERS {
        layer_params.push((
            params.get(&format!("lm{layer}_w_ih"))?,
            params.get(&format!("lm{layer}_w_hh"))?,
            params.get(&format!("lm{layer}_b"))?,
        ));
    }
    let out_w = params.get("out_w")?;
    let out_b = params.get("out_b")?;

    let mut hs = vec![vec![0.0; dims.hidden]; LM_LAYERS];
    let mut cs = vec![vec![0.0; dims.hidden]; LM_LAYERS];
    let mut dists = Vec::with_capacity(ids.len());
    for t in 0..ids.len() {
        let input_id = if t == 0 { Vocabulary::PAD } else { ids[t - 1] };
        if input_id as usize >= dims.vocab {
            return Err(Error::TokenIdOutOfRange {
                id: input_id,
                vocab: dims.vocab,
            });
        }
        let mut x: Vec<f64> =
            emb.values[input_id as usize * dims.embed..(input_id as usize + 1) * dims.embed].to_vec();
        for (layer, (w_ih, w_hh, b)) in layer_params.iter().enumerate() {
            lstm_step(
                &w_ih.values,
                &w_hh.values,
                &b.values,
                &x,
                &mut hs[layer],
                &mut cs[layer],
                dims.hidden,
            );
            x = hs[layer].clone();
        }
        let mut logits = vec![0.0; dims.vocab];
        for (k, logit) in logits.iter_mut().enumerate() {
            let mut acc = out_b.values[k];
            for (j, &hv) in x.iter().enumerate() {
                acc += out_w.values[k * dims.hidden + j] * hv;
            }
            *logit = acc;
        }
        dists.push(softmax(&logits));
    }
    Ok(dists)
}

/// Tape loss for one direction-mapped sequence: mean next-token cross
/// entropy per position.
fn sequence_loss(tape: &mut Tape, dims: &LmDims, ids: &[u32]) -> Result<NodeId> {
    let emb = tape.param("embed")?;
    let mut layer_ids = Vec::with_capacity(LM_LAYERS);
    for layer in 0..LM_LAYERS {
        layer_ids.push((
            tape.param(&format!("lm{layer}_w_ih"))?,
            tape.param(&format!("lm{layer}_w_hh"))?,
            tape.param(&format!("lm{layer}_b"))?,
        ));
    }
    let out_w = tape.param("out_w")?;
    let out_b = tape.param("out_b")?;

    let mut hs = Vec::with_capacity(LM_LAYERS);
    let mut cs = Vec::with_capacity(LM_LAYERS);
    for _ in 0..LM_LAYERS {
        hs.push(tape.vector(vec![0.0; dims.hidden])?);
        cs.push(tape.vector(vec![0.0; dims.hidden])?);
    }

    let mut ce_terms = Vec::with_capacity(ids.len());
    for t in 0..ids.len() {
        let input_id = if t == 0 { Vocabulary::PAD } else { ids[t - 1] };
        let row = tape.embed(emb, &[input_id])?;
        let mut x = tape.maxpool_over_time(row)?; // (1, d) -> (d, 1)
        for (layer, &(w_ih, w_hh, b)) in layer_ids.iter().enumerate() {
            let hc = tape.lstm_cell(w_ih, w_hh, b, x, hs[layer], cs[layer])?;
            hs[layer] = tape.slice(hc, 0, dims.hidden)?;
            cs[layer] = tape.slice(hc, dims.hidden, dims.hidden)?;
            x = hs[layer];
        }
        let logits = tape.dense(out_w, x, Some(out_b))?;
        let probs = tape.softmax(logits)?;
        let mut one_hot = vec![0.0; dims.vocab];
        one_hot[ids[t] as usize] = 1.0;
        ce_terms.push(tape.kl_div(&one_hot, probs)?);
    }
    let stacked = tape.stack(&ce_terms)?;
    let mean_weights = tape.vector(vec![1.0 / ids.len() as f64; ids.len()])?;
    tape.dot(mean_weights, stacked)
}

/// A trained recurrent language model, bundled with its vocabulary so
/// it scores raw token sequences directly.
#[derive(Debug, Clone)]
pub struct LstmLm {
    pub direction: Direction,
    pub dims: LmDims,
    pub params: ParamStore,
    vocab: Vocabulary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LmTrainLog {
    pub epochs: Vec<LmEpoch>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl LmTrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{:.6},{:.6}\n", e.epoch, e.train_loss, e.val_loss));
        }
        out
    }
}

/// Decides when training should stop: an epoch either improves on the
/// best validation loss seen so far or burns patience.
#[derive(Debug, Clone)]
pub(crate) struct EarlyStopTracker {
    patience: usize,
    best: Option<f64>,
    bad: usize,
}

impl EarlyStopTracker {
    pub(crate) fn new(patience: usize) -> EarlyStopTracker {
        EarlyStopTracker {
            patience,
            best: None,
            bad: 0,
        }
    }

    /// Returns (improved, stop).
    pub(crate) fn observe(&mut self, val_loss: f64) -> (bool, bool) {
        let improved = self.best.map_or(true, |b| val_loss < b);
        if improved {
            self.best = Some(val_loss);
            self.bad = 0;
        } else {
            self.bad += 1;
        }
        (improved, self.bad > self.patience)
    }
}

fn mean_val_loss(params: &ParamStore, dims: &LmDims, val: &[Vec<u32>]) -> Result<f64> {
    let mut sum = 0.0;
    for ids in val {
        let dists = distributions(params, dims, ids)?;
        let seq: f64 = ids
            .iter()
            .zip(&dists)
            .map(|(&id, dist)| -dist[id as usize].ln())
            .sum();
        sum += seq / ids.len() as f64;
    }
    Ok(sum / val.len() as f64)
}

/// Trains a language model on raw token sequences.
///
/// The vocabulary is built from the sequences; an 80/20 (configurable)
/// seeded split provides validation loss for early stopping, and the
/// parameters of the best validation epoch are returned.
pub fn train_lm(
    sequences: &[Vec<String>],
    direction: Direction,
    config: &LmConfig,
) -> Result<(LstmLm, LmTrainLog)> {
    config.validate()?;
    let vocab = Vocabulary::build(sequences.iter().flatten(), config.min_count);
    let real_tokens = vocab.len() - 2;
    if real_tokens < 2 {
        return Err(Error::VocabTooSmall(real_tokens));
    }
    let mut encoded: Vec<Vec<u32>> = sequences
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| vocab.encode(s))
        .collect();
    if encoded.len() < 2 {
        return Err(Error::Config(
            "language model training needs at least 2 nonempty sequences".into(),
        ));
    }
    if direction == Direction::Backward {
        for ids in &mut encoded {
            ids.reverse();
        }
    }

    let dims = LmDims {
        vocab: vocab.len(),
        embed: config.embed_dim,
        hidden: config.hidden_dim,
    };
    let mut params = init_lm_params(&dims, derive_seed(config.seed, &[stage_tag("lm-init")]));
    let mut rng = seeded(derive_seed(config.seed, &[stage_tag("lm-order")]));

    let mut order: Vec<usize> = (0..encoded.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((encoded.len() as f64) * config.validation_fraction)
        .round()
        .clamp(1.0, (encoded.len() - 1) as f64) as usize;
    let (val_rows, train_rows) = order.split_at(n_val);
    let val: Vec<Vec<u32>> = val_rows.iter().map(|&i| encoded[i].clone()).collect();

    let mut optimizer = Optimizer::new(config.optimizer);
    let mut tracker = EarlyStopTracker::new(config.patience);
    let mut log = LmTrainLog::default();
    let mut best: Option<(ParamStore, usize)> = None;

    for epoch in 0..config.epochs {
        let mut shuffled = train_rows.to_vec();
        shuffled.shuffle(&mut rng);
        let mut train_loss_sum = 0.0;
        for (batch_no, batch) in shuffled.chunks(config.batch_size).enumerate() {
            params.zero_grads();
            for &row in batch {
                let mut tape = Tape::new(&params);
                let loss = sequence_loss(&mut tape, &dims, &encoded[row])?;
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: batch_no });
                }
                train_loss_sum += value;
                tape.backward(loss)?;
                for (name, grad) in tape.param_grads() {
                    params.add_grad(&name, &grad)?;
                }
            }
            params.scale_grads(1.0 / batch.len() as f64);
            optimizer.step(&mut params, config.learning_rate)?;
        }
        let val_loss = mean_val_loss(&params, &dims, &val)?;
        log.epochs.push(LmEpoch {
            epoch,
            train_loss: train_loss_sum / shuffled.len() as f64,
            val_loss,
        });
        let (improved, stop) = tracker.observe(val_loss);
        if improved {
            best = Some((params.clone(), epoch));
        }
        if stop {
            log.stopped_early = true;
            break;
        }
    }

    let (best_params, best_epoch) = best.expect("at least one epoch ran");
    log.best_epoch = best_epoch;
    Ok((
        LstmLm {
            direction,
            dims,
            params: best_params,
            vocab,
        },
        log,
    ))
}

const LM_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LmRecord {
    version: u32,
    direction: Direction,
    dims: LmDims,
    vocab: Vec<String>,
    params: serde_json::Value,
}

impl LstmLm {
    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Per-position next-token distributions in processing order (the
    /// reversed sequence for a backward model). Each sums to 1.
    pub fn step_distributions(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>> {
        distributions(&self.params, &self.dims, &self.mapped_ids(tokens))
    }

    fn mapped_ids(&self, tokens: &[String]) -> Vec<u32> {
        let mut ids = self.vocab.encode(tokens);
        if self.direction == Direction::Backward {
            ids.reverse();
        }
        ids
    }

    /// Unnormalized log-likelihood (sum over positions).
    pub fn log_likelihood(&self, tokens: &[String]) -> Result<f64> {
        let ids = self.mapped_ids(tokens);
        let dists = distributions(&self.params, &self.dims, &ids)?;
        Ok(ids
            .iter()
            .zip(&dists)
            .map(|(&id, dist)| dist[id as usize].ln())
            .sum())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let record = LmRecord {
            version: LM_VERSION,
            direction: self.direction,
            dims: self.dims,
            vocab: self.vocab.tokens_in_id_order().to_vec(),
            params: self.params.to_json(),
        };
        fs::write(path, serde_json::to_string(&record)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<LstmLm> {
        let text = fs::read_to_string(path)?;
        let record: LmRecord = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("unreadable language model checkpoint: {e}")))?;
        if record.version != LM_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported language model version {}",
                record.version
            )));
        }
        let vocab = Vocabulary::from_tokens(record.vocab)?;
        let params = ParamStore::from_json(record.params)?;
        for (name, rows, cols) in expected_lm_shapes(&record.dims) {
            let t = params.get(&name).map_err(|_| {
                Error::Checkpoint(format!("missing language model parameter `{name}`"))
            })?;
            if (t.rows(), t.cols()) != (rows, cols) {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` is {}x{}, expected {rows}x{cols}",
                    t.rows(),
                    t.cols()
                )));
            }
        }
        if vocab.len() != record.dims.vocab {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} entries but dims say {}",
                vocab.len(),
                record.dims.vocab
            )));
        }
        Ok(LstmLm {
            direction: record.direction,
            dims: record.dims,
            params,
            vocab,
        })
    }
}

impl SequenceScorer for LstmLm {
    fn score(&self, tokens: &[String]) -> Result<f64> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        Ok(self.log_likelihood(tokens)? / tokens.len() as f64)
    }
}

/// Mean of a forward and a backward model over the same vocabulary.
#[derive(Debug, Clone)]
pub struct AveragedLm {
    pub forward: LstmLm,
    pub backward: LstmLm,
}

impl AveragedLm {
    pub fn new(forward: LstmLm, backward: LstmLm) -> Result<AveragedLm> {
        if forward.direction != Direction::Forward || backward.direction != Direction::Backward {
            return Err(Error::Config(
                "averaged scorer needs one forward and one backward model".into(),
            ));
        }
        if forward.vocab.hash() != backward.vocab.hash() {
            return Err(Error::Config(
                "averaged scorer needs both models on the same vocabulary".into(),
            ));
        }
        Ok(AveragedLm { forward, backward })
    }
}

impl SequenceScorer for AveragedLm {
    fn score(&self, tokens: &[String]) -> Result<f64> {
        Ok(0.5 * (self.forward.score(tokens)? + self.backward.score(tokens)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::langmodel::perplexity;
    use crate::numerics::grad_check;
    use approx::assert_relative_eq;

    fn toks(raw: &[&str]) -> Vec<String> {
        raw.iter().map(|t| t.to_string()).collect()
    }

    fn repeated_corpus(n: usize) -> Vec<Vec<String>> {
        (0..n).map(|_| toks(&["a", "b", "c", "d"])).collect()
    }

    fn tiny_config() -> LmConfig {
        LmConfig {
            embed_dim: 8,
            hidden_dim: 12,
            epochs: 25,
            patience: 3,
            learning_rate: 0.02,
            batch_size: 8,
            seed: 11,
            ..LmConfig::default()
        }
    }

    #[test]
    fn early_stop_tracker_patience_zero_stops_at_first_non_improvement() {
        let mut t = EarlyStopTracker::new(0);
        assert_eq!(t.observe(1.0), (true, false));
        assert_eq!(t.observe(0.5), (true, false));
        assert_eq!(t.observe(0.5), (false, true));
    }

    #[test]
    fn early_stop_tracker_respects_patience() {
        let mut t = EarlyStopTracker::new(2);
        assert_eq!(t.observe(1.0), (true, false));
        assert_eq!(t.observe(1.1), (false, false));
        assert_eq!(t.observe(1.2), (false, false));
        assert_eq!(t.observe(0.9), (true, false));
        assert_eq!(t.observe(0.95), (false, false));
        assert_eq!(t.observe(0.96), (false, false));
        assert_eq!(t.observe(0.97), (false, true));
    }

    #[test]
    fn memorizes_a_repeated_sentence() {
        let (lm, log) = train_lm(&repeated_corpus(40), Direction::Forward, &tiny_config()).unwrap();
        let ppl = perplexity(&lm, &toks(&["a", "b", "c", "d"])).unwrap();
        assert!(ppl < 1.5, "perplexity {ppl} after {} epochs", log.epochs.len());
        // Shuffled order breaks the memorized transitions.
        let shuffled = lm.score(&toks(&["d", "a", "c", "b"])).unwrap();
        let in_order = lm.score(&toks(&["a", "b", "c", "d"])).unwrap();
        assert!(in_order > shuffled);
    }

    #[test]
    fn best_checkpoint_dominates_every_later_epoch() {
        let (_, log) = train_lm(&repeated_corpus(30), Direction::Forward, &tiny_config()).unwrap();
        let vals: Vec<f64> = log.epochs.iter().map(|e| e.val_loss).collect();
        let best = vals[log.best_epoch];
        for (i, &v) in vals.iter().enumerate() {
            assert!(best <= v || i < log.best_epoch, "epoch {i} beat the kept checkpoint");
        }
        assert_eq!(
            best,
            vals.iter().cloned().fold(f64::INFINITY, f64::min),
            "kept checkpoint must be the global validation minimum"
        );
        if log.stopped_early {
            let trailing = vals.len() - 1 - log.best_epoch;
            assert_eq!(trailing, tiny_config().patience + 1);
        } else {
            assert_eq!(vals.len(), tiny_config().epochs);
        }
    }

    #[test]
    fn backward_model_scores_the_reversal() {
        let (forward, _) =
            train_lm(&repeated_corpus(20), Direction::Forward, &tiny_config()).unwrap();
        let mut mirrored = forward.clone();
        mirrored.direction = Direction::Backward;
        let seq = toks(&["a", "b", "c"]);
        let reversed = toks(&["c", "b", "a"]);
        assert_eq!(
            mirrored.score(&seq).unwrap(),
            forward.score(&reversed).unwrap()
        );
    }

    #[test]
    fn step_distributions_sum_to_one() {
        let (lm, _) = train_lm(&repeated_corpus(20), Direction::Forward, &tiny_config()).unwrap();
        for dist in lm.step_distributions(&toks(&["a", "b", "zzz"])).unwrap() {
            let sum: f64 = dist.iter().sum();
            assert_relative_eq!(sum, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn rejects_tiny_vocabularies_and_corpora() {
        let one_token: Vec<Vec<String>> = (0..10).map(|_| toks(&["a", "a"])).collect();
        assert!(matches!(
            train_lm(&one_token, Direction::Forward, &tiny_config()).unwrap_err(),
            Error::VocabTooSmall(1)
        ));
        let single = vec![toks(&["a", "b"])];
        assert!(train_lm(&single, Direction::Forward, &tiny_config()).is_err());
    }

    #[test]
    fn training_is_seed_deterministic() {
        let config = LmConfig {
            epochs: 3,
            ..tiny_config()
        };
        let (a, _) = train_lm(&repeated_corpus(12), Direction::Forward, &config).unwrap();
        let (b, _) = train_lm(&repeated_corpus(12), Direction::Forward, &config).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn checkpoint_round_trips() {
        let config = LmConfig {
            epochs: 2,
            ..tiny_config()
        };
        let (lm, _) = train_lm(&repeated_corpus(12), Direction::Backward, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.json");
        lm.save(&path).unwrap();
        let loaded = LstmLm::load(&path).unwrap();
        assert_eq!(loaded.direction, Direction::Backward);
        let probe = toks(&["a", "d", "b"]);
        assert_eq!(lm.score(&probe).unwrap(), loaded.score(&probe).unwrap());
    }

    #[test]
    fn averaged_scorer_is_the_mean_of_both_directions() {
        let config = LmConfig {
            epochs: 2,
            ..tiny_config()
        };
        let (forward, _) = train_lm(&repeated_corpus(12), Direction::Forward, &config).unwrap();
        let (backward, _) = train_lm(&repeated_corpus(12), Direction::Backward, &config).unwrap();
        let avg = AveragedLm::new(forward.clone(), backward.clone()).unwrap();
        let probe = toks(&["a", "b", "c"]);
        assert_relative_eq!(
            avg.score(&probe).unwrap(),
            0.5 * (forward.score(&probe).unwrap() + backward.score(&probe).unwrap()),
            max_relative = 1e-15
        );
        assert!(AveragedLm::new(backward.clone(), backward.clone()).is_err());
        let other_corpus: Vec<Vec<String>> = (0..12).map(|_| toks(&["x", "y", "z"])).collect();
        let (mismatched, _) = train_lm(&other_corpus, Direction::Backward, &config).unwrap();
        assert!(AveragedLm::new(forward, mismatched).is_err());
    }

    #[test]
    fn sequence_loss_passes_grad_check() {
        let dims = LmDims {
            vocab: 5,
            embed: 3,
            hidden: 4,
        };
        let mut params = init_lm_params(&dims, 7);
        let ids = [2u32, 4, 3];
        let report = grad_check(&mut params, 1e-6, 1e-5, |store| {
            let mut tape = Tape::new(store);
            let loss = sequence_loss(&mut tape, &dims, &ids)?;
            tape.backward(loss)?;
            Ok((tape.scalar(loss), tape.param_grads()))
        })
        .unwrap();
        assert!(
            report.passed(),
            "max rel err {} at {}[{}]",
            report.max_rel_err,
            report.worst_param,
            report.worst_index
        );
    }
}
