//! Classifier architectures, training, and ensembles.
//!
//! Two families share one output head over [representation; context
//! features]:
//!
//! * a CNN with width-1 and width-2 convolutions, tanh, max pooling over
//!   time, and a linear projection to the tweet representation;
//! * a single-layer LSTM with additive attention: per-step scores
//!   `alpha_t = tanh(v . h_t)`, attention `A = softmax(alpha)`, and
//!   representation `sum_t A(t) h_t`.
//!
//! The rationale-supervised variant trains the LSTM with an extra
//! `lambda * KL(A* || A)` term pulling attention toward the annotated
//! rationale positions; tweets without rationales contribute only the
//! classification term.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Label, Tweet, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{argmax, softmax, NodeId, Optimizer, OptimizerKind, ParamStore, Tape};
use crate::rng::{derive_seed, seeded, stage_tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Cnn,
    Lstm,
    LstmRationale,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Cnn, ModelKind::Lstm, ModelKind::LstmRationale];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Cnn => "cnn",
            ModelKind::Lstm => "lstm",
            ModelKind::LstmRationale => "lstm_rationale",
        }
    }

    /// Whether training supervises attention with rationales.
    pub fn uses_rationales(self) -> bool {
        self == ModelKind::LstmRationale
    }

    fn is_lstm(self) -> bool {
        matches!(self, ModelKind::Lstm | ModelKind::LstmRationale)
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How logits become per-class scores and what the classification loss
/// is. The default scores each class with an independent sigmoid and
/// sums binary cross entropies; the alternative is softmax with cross
/// entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    #[default]
    SigmoidBce,
    SoftmaxXent,
}

pub const CONTEXT_FEATURES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub filters: usize,
    pub z: usize,
}

/// Early stopping on a held-out slice of the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub validation_fraction: f64,
    /// Number of consecutive non-improving epochs tolerated; 0 stops at
    /// the first one.
    pub patience: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_attn: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_variant: LossVariant,
    pub ensemble_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub conv_filters: usize,
    pub z_dim: usize,
    pub optimizer: OptimizerKind,
    pub early_stop: Option<EarlyStop>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lambda_attn: 4.0,
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            loss_variant: LossVariant::default(),
            ensemble_size: 5,
            embed_dim: 32,
            hidden_dim: 64,
            conv_filters: 64,
            z_dim: 64,
            optimizer: OptimizerKind::Sgd,
            early_stop: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_attn < 0.0 {
            return Err(Error::Config("lambda_attn must be nonnegative".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if self.ensemble_size == 0 || self.ensemble_size % 2 == 0 {
            return Err(Error::Config(format!(
                "ensemble size must be odd and positive, got {}",
                self.ensemble_size
            )));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.conv_filters == 0 || self.z_dim == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if let Some(es) = &self.early_stop {
            if !(0.0..1.0).contains(&es.validation_fraction) || es.validation_fraction == 0.0 {
                return Err(Error::Config(
                    "early-stop validation fraction must lie in (0, 1)".into(),
                ));
            }
        }
        Ok(())
    }

    fn dims(&self, vocab: usize) -> ModelDims {
        ModelDims {
            vocab,
            embed: self.embed_dim,
            hidden: self.hidden_dim,
            filters: self.conv_filters,
            z: self.z_dim,
        }
    }
}

/// Anything that scores a token sequence plus context features.
/// Scores are in class order (aggression, loss, other).
pub trait Classifier {
    fn class_scores(&self, token_ids: &[u32], context: &[f64; CONTEXT_FEATURES])
        -> Result<[f64; 3]>;
}

impl<M: Classifier + ?Sized> Classifier for &M {
    fn class_scores(
        &self,
        token_ids: &[u32],
        context: &[f64; CONTEXT_FEATURES],
    ) -> Result<[f64; 3]> {
        (**self).class_scores(token_ids, context)
    }
}

/// A trained model: weights plus everything needed to apply them.
#[derive(Debug, Clone)]
pub struct Model {
    pub kind: ModelKind,
    pub dims: ModelDims,
    pub loss_variant: LossVariant,
    pub params: ParamStore,
    /// Hash of the vocabulary the model was trained against.
    pub vocab_hash: u64,
}

fn expected_shapes(kind: ModelKind, d: &ModelDims) -> Vec<(&'static str, usize, usize)> {
    let mut shapes = vec![("embed", d.vocab, d.embed)];
    if kind.is_lstm() {
        shapes.extend([
            ("lstm_w_ih", 4 * d.hidden, d.embed),
            ("lstm_w_hh", 4 * d.hidden, d.hidden),
            ("lstm_b", 4 * d.hidden, 1),
            ("attn_v", d.hidden, 1),
            ("out_w", 3, d.hidden + CONTEXT_FEATURES),
            ("out_b", 3, 1),
        ]);
    } else {
        shapes.extend([
            ("conv1_w", d.filters, d.embed),
            ("conv1_b", d.filters, 1),
            ("conv2_w", d.filters, 2 * d.embed),
            ("conv2_b", d.filters, 1),
            ("z_w", d.z, 2 * d.filters),
            ("z_b", d.z, 1),
            ("out_w", 3, d.z + CONTEXT_FEATURES),
            ("out_b", 3, 1),
        ]);
    }
    shapes
}

fn init_params(kind: ModelKind, dims: &ModelDims, seed: u64) -> ParamStore {
    let mut rng = seeded(seed);
    let mut store = ParamStore::new();
    for (name, rows, cols) in expected_shapes(kind, dims) {
        if name.ends_with("_b") {
            store.init_zeros(name, rows, cols);
        } else {
            store.init_uniform(name, rows, cols, &mut rng);
        }
    }
    if kind.is_lstm() {
        // Forget-gate bias starts at 1 so early cell state persists.
        let b = store.get_mut("lstm_b").expect("lstm bias exists");
        for j in dims.hidden..2 * dims.hidden {
            b.values[j] = 1.0;
        }
    }
    store
}

const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelRecord {
    version: u32,
    kind: ModelKind,
    dims: ModelDims,
    loss_variant: LossVariant,
    vocab_hash: u64,
    params: serde_json::Value,
}

impl Model {
    /// Zero-weight model, useful as a neutral baseline.
    pub fn zeroed(kind: ModelKind, dims: ModelDims, loss_variant: LossVariant) -> Model {
        let mut params = ParamStore::new();
        for (name, rows, cols) in expected_shapes(kind, &dims) {
            params.init_zeros(name, rows, cols);
        }
        Model {
            kind,
            dims,
            loss_variant,
            params,
            vocab_hash: 0,
        }
    }

    fn validate_shapes(&self) -> Result<()> {
        for (name, rows, cols) in expected_shapes(self.kind, &self.dims) {
            let t = self.params.get(name).map_err(|_| {
                Error::Checkpoint(format!("missing parameter `{name}` for a {} model", self.kind))
            })?;
            if (t.rows(), t.cols()) != (rows, cols) {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` is {}x{}, expected {rows}x{cols}",
                    t.rows(),
                    t.cols()
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let record = ModelRecord {
            version: MODEL_VERSION,
            kind: self.kind,
            dims: self.dims,
            loss_variant: self.loss_variant,
            vocab_hash: self.vocab_hash,
            params: self.params.to_json(),
        };
        fs::write(path, serde_json::to_string(&record)?)?;
        Ok(())
    }

    /// Loads a checkpoint, validating version and parameter shapes. If
    /// `expected_vocab_hash` is given it must match the stored hash, so
    /// a checkpoint cannot silently run against a different vocabulary.
    pub fn load(path: &Path, expected_vocab_hash: Option<u64>) -> Result<Model> {
        let text = fs::read_to_string(path)?;
        let record: ModelRecord = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("unreadable model checkpoint: {e}")))?;
        if record.version != MODEL_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported model version {}",
                record.version
            )));
        }
        if let Some(expected) = expected_vocab_hash {
            if expected != record.vocab_hash {
                return Err(Error::Checkpoint(
                    "checkpoint was trained against a different vocabulary".into(),
                ));
            }
        }
        let model = Model {
            kind: record.kind,
            dims: record.dims,
            loss_variant: record.loss_variant,
            params: ParamStore::from_json(record.params)?,
            vocab_hash: record.vocab_hash,
        };
        model.validate_shapes()?;
        Ok(model)
    }

    /// Attention distribution over token positions (LSTM kinds only).
    pub fn attention(
        &self,
        token_ids: &[u32],
        context: &[f64; CONTEXT_FEATURES],
    ) -> Result<Vec<f64>> {
        if !self.kind.is_lstm() {
            return Err(Error::Config(format!(
                "{} models have no attention distribution",
                self.kind
            )));
        }
        let (_, attention) = lstm_forward(&self.params, &self.dims, token_ids, context, self.loss_variant)?;
        Ok(attention)
    }
}

impl Classifier for Model {
    fn class_scores(
        &self,
        token_ids: &[u32],
        context: &[f64; CONTEXT_FEATURES],
    ) -> Result<[f64; 3]> {
        if token_ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        if self.kind.is_lstm() {
            let (scores, _) = lstm_forward(&self.params, &self.dims, token_ids, context, self.loss_variant)?;
            Ok(scores)
        } else {
            cnn_forward(&self.params, &self.dims, token_ids, context, self.loss_variant)
        }
    }
}

fn embed_rows(params: &ParamStore, ids: &[u32], dim: usize) -> Result<Vec<f64>> {
    let table = params.get("embed")?;
    let vocab = table.rows();
    let mut out = Vec::with_capacity(ids.len() * dim);
    for &id in ids {
        if id as usize >= vocab {
            return Err(Error::TokenIdOutOfRange { id, vocab });
        }
        out.extend_from_slice(&table.values[id as usize * dim..(id as usize + 1) * dim]);
    }
    Ok(out)
}

fn finish_scores(logits: [f64; 3], variant: LossVariant) -> [f64; 3] {
    match variant {
        LossVariant::SigmoidBce => {
            let mut s = [0.0; 3];
            for (o, l) in s.iter_mut().zip(logits) {
                *o = 1.0 / (1.0 + (-l).exp());
            }
            s
        }
        LossVariant::SoftmaxXent => {
            let s = softmax(&logits);
            [s[0], s[1], s[2]]
        }
    }
}

fn output_head(
    params: &ParamStore,
    rep: &[f64],
    context: &[f64; CONTEXT_FEATURES],
) -> Result<[f64; 3]> {
    let w = params.get("out_w")?;
    let b = params.get("out_b")?;
    let n = rep.len() + CONTEXT_FEATURES;
    if w.cols() != n || w.rows() != 3 {
        return Err(Error::ShapeMismatch {
            op: "output_head",
            detail: format!("out_w is {}x{}, expected 3x{n}", w.rows(), w.cols()),
        });
    }
    let mut logits = [0.0; 3];
    for c in 0..3 {
        let row = &w.values[c * n..(c + 1) * n];
        let mut acc = b.values[c];
        for (j, &r) in rep.iter().enumerate() {
            acc += row[j] * r;
        }
        for (j, &f) in context.iter().enumerate() {
            acc += row[rep.len() + j] * f;
        }
        logits[c] = acc;
    }
    Ok(logits)
}

/// CNN forward pass without a tape.
fn cnn_forward(
    params: &ParamStore,
    dims: &ModelDims,
    ids: &[u32],
    context: &[f64; CONTEXT_FEATURES],
    variant: LossVariant,
) -> Result<[f64; 3]> {
    let d = dims.embed;
    let f = dims.filters;
    let l = ids.len();
    let seq = embed_rows(params, ids, d)?;
    let (w1, b1) = (params.get("conv1_w")?, params.get("conv1_b")?);
    let (w2, b2) = (params.get("conv2_w")?, params.get("conv2_b")?);

    let mut pooled = vec![f64::NEG_INFINITY; 2 * f];
    for t in 0..l {
        for k in 0..f {
            let mut acc = b1.values[k];
            for j in 0..d {
                acc += w1.values[k * d + j] * seq[t * d + j];
            }
            let v = acc.tanh();
            if v > pooled[k] {
                pooled[k] = v;
            }
        }
        for k in 0..f {
            let mut acc = b2.values[k];
            for j in 0..d {
                acc += w2.values[k * 2 * d + j] * seq[t * d + j];
            }
            if t + 1 < l {
                for j in 0..d {
                    acc += w2.values[k * 2 * d + d + j] * seq[(t + 1) * d + j];
                }
            }
            let v = acc.tanh();
            if v > pooled[f + k] {
                pooled[f + k] = v;
            }
        }
    }

    let (zw, zb) = (params.get("z_w")?, params.get("z_b")?);
    let mut z = vec![0.0; dims.z];
    for (i, zi) in z.iter_mut().enumerate() {
        let mut acc = zb.values[i];
        for (k, &p) in pooled.iter().enumerate() {
            acc += zw.values[i * 2 * f + k] * p;
        }
        *zi = acc;
    }
    Ok(finish_scores(output_head(params, &z, context)?, variant))
}

/// LSTM forward pass without a tape; returns scores and attention.
fn lstm_forward(
    params: &ParamStore,
    dims: &ModelDims,
    ids: &[u32],
    context: &[f64; CONTEXT_FEATURES],
    variant: LossVariant,
) -> Result<([f64; 3], Vec<f64>)> {
    let d = dims.embed;
    let hdim = dims.hidden;
    let l = ids.len();
    let seq = embed_rows(params, ids, d)?;
    let w_ih = params.get("lstm_w_ih")?;
    let w_hh = params.get("lstm_w_hh")?;
    let bias = params.get("lstm_b")?;
    let v = params.get("attn_v")?;

    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    let mut h = vec![0.0; hdim];
    let mut c = vec![0.0; hdim];
    let mut hs = Vec::with_capacity(l);
    let mut alpha = Vec::with_capacity(l);
    for t in 0..l {
        let x = &seq[t * d..(t + 1) * d];
        let mut h_new = vec![0.0; hdim];
        let mut c_new = vec![0.0; hdim];
        for j in 0..hdim {
            let mut pre = [0.0f64; 4];
            for (g, p) in pre.iter_mut().enumerate() {
                let k = g * hdim + j;
                let mut acc = bias.values[k];
                for (jj, &xv) in x.iter().enumerate() {
                    acc += w_ih.values[k * d + jj] * xv;
                }
                for (jj, &hv) in h.iter().enumerate() {
                    acc += w_hh.values[k * hdim + jj] * hv;
                }
                *p = acc;
            }
            let (i_g, f_g, g_g, o_g) = (sig(pre[0]), sig(pre[1]), pre[2].tanh(), sig(pre[3]));
            c_new[j] = f_g * c[j] + i_g * g_g;
            h_new[j] = o_g * c_new[j].tanh();
        }
        h = h_new;
        c = c_new;
        let score: f64 = v.values.iter().zip(&h).map(|(a, b)| a * b).sum();
        alpha.push(score.tanh());
        hs.push(h.clone());
    }
    let attention = softmax(&alpha);
    let mut rep = vec![0.0; hdim];
    for (t, ht) in hs.iter().enumerate() {
        for (r, &hv) in rep.iter_mut().zip(ht) {
            *r += attention[t] * hv;
        }
    }
    let scores = finish_scores(output_head(params, &rep, context)?, variant);
    Ok((scores, attention))
}

/// Uniform attention target over the rationale positions: mass 1/|R| at
/// each annotated index, zero elsewhere.
pub fn attention_target(rationales: &BTreeSet<usize>, len: usize) -> Result<Vec<f64>> {
    if rationales.is_empty() {
        return Err(Error::EmptyRationaleSet);
    }
    let mut target = vec![0.0; len];
    let mass = 1.0 / rationales.len() as f64;
    for &index in rationales {
        if index >= len {
            return Err(Error::IndexOutOfRange { index, len });
        }
        target[index] = mass;
    }
    Ok(target)
}

/// Training loss for one example under the default scoring variant:
/// summed per-class binary cross entropy against the one-hot gold label,
/// plus `lambda * KL(a_star || a)` when an attention pair is supplied.
pub fn total_loss(
    scores: &[f64; 3],
    gold: Label,
    attention: Option<(&[f64], &[f64])>,
    lambda_attn: f64,
) -> Result<f64> {
    use crate::numerics::BCE_EPS;
    let mut clf = 0.0;
    for (c, &s) in scores.iter().enumerate() {
        let t = if c == gold.index() { 1.0 } else { 0.0 };
        let s = s.clamp(BCE_EPS, 1.0 - BCE_EPS);
        clf -= t * s.ln() + (1.0 - t) * (1.0 - s).ln();
    }
    match attention {
        None => Ok(clf),
        Some((a_star, a)) => {
            let kl = crate::numerics::kl_divergence(a_star, a)?;
            Ok(clf + lambda_attn * kl)
        }
    }
}

/// Node handles for one example's loss graph.
pub(crate) struct LossNodes {
    pub total: NodeId,
    pub clf: NodeId,
    pub attn_kl: Option<NodeId>,
}

fn one_hot(gold: Label) -> [f64; 3] {
    let mut t = [0.0; 3];
    t[gold.index()] = 1.0;
    t
}

fn classification_loss(
    tape: &mut Tape,
    logits: NodeId,
    gold: Label,
    variant: LossVariant,
) -> Result<NodeId> {
    match variant {
        LossVariant::SigmoidBce => {
            let probs = tape.sigmoid(logits)?;
            tape.bce(probs, &one_hot(gold))
        }
        LossVariant::SoftmaxXent => {
            // KL against a one-hot target is exactly -ln q[gold].
            let probs = tape.softmax(logits)?;
            tape.kl_div(&one_hot(gold), probs)
        }
    }
}

fn tape_output_head(
    tape: &mut Tape,
    rep: NodeId,
    context: &[f64; CONTEXT_FEATURES],
) -> Result<NodeId> {
    let w = tape.param("out_w")?;
    let b = tape.param("out_b")?;
    let ctx = tape.vector(context.to_vec())?;
    let zc = tape.concat(&[rep, ctx])?;
    tape.dense(w, zc, Some(b))
}

/// Builds the CNN loss graph for one example.
pub(crate) fn build_cnn_loss(
    tape: &mut Tape,
    ids: &[u32],
    context: &[f64; CONTEXT_FEATURES],
    gold: Label,
    variant: LossVariant,
) -> Result<LossNodes> {
    let emb = tape.param("embed")?;
    let seq = tape.embed(emb, ids)?;
    let w1 = tape.param("conv1_w")?;
    let b1 = tape.param("conv1_b")?;
    let w2 = tape.param("conv2_w")?;
    let b2 = tape.param("conv2_b")?;
    let c1 = tape.conv_w1(w1, b1, seq)?;
    let c2 = tape.conv_w2(w2, b2, seq)?;
    let t1 = tape.tanh(c1)?;
    let t2 = tape.tanh(c2)?;
    let p1 = tape.maxpool_over_time(t1)?;
    let p2 = tape.maxpool_over_time(t2)?;
    let pooled = tape.concat(&[p1, p2])?;
    let zw = tape.param("z_w")?;
    let zb = tape.param("z_b")?;
    let z = tape.dense(zw, pooled, Some(zb))?;
    let logits = tape_output_head(tape, z, context)?;
    let clf = classification_loss(tape, logits, gold, variant)?;
    Ok(LossNodes {
        total: clf,
        clf,
        attn_kl: None,
    })
}

/// Builds the LSTM loss graph for one example. `a_star` adds the
/// attention supervision term scaled by `lambda`.
pub(crate) fn build_lstm_loss(
    tape: &mut Tape,
    ids: &[u32],
    context: &[f64; CONTEXT_FEATURES],
    gold: Label,
    variant: LossVariant,
    hidden: usize,
    a_star: Option<&[f64]>,
    lambda: f64,
) -> Result<LossNodes> {
    let emb = tape.param("embed")?;
    let w_ih = tape.param("lstm_w_ih")?;
    let w_hh = tape.param("lstm_w_hh")?;
    let b = tape.param("lstm_b")?;
    let v = tape.param("attn_v")?;

    let mut h = tape.vector(vec![0.0; hidden])?;
    let mut c = tape.vector(vec![0.0; hidden])?;
    let mut hs = Vec::with_capacity(ids.len());
    for &id in ids {
        let row = tape.embed(emb, &[id])?;
        let x = tape.maxpool_over_time(row)?; // (1, d) -> (d, 1)
        let hc = tape.lstm_cell(w_ih, w_hh, b, x, h, c)?;
        h = tape.slice(hc, 0, hidden)?;
        c = tape.slice(hc, hidden, hidden)?;
        hs.push(h);
    }
    let alpha: Vec<NodeId> = hs
        .iter()
        .map(|&ht| {
            let s = tape.dot(v, ht)?;
            tape.tanh(s)
        })
        .collect::<Result<_>>()?;
    let stacked = tape.stack(&alpha)?;
    let attn = tape.softmax(stacked)?;
    let z = tape.weighted_sum(attn, &hs)?;
    let logits = tape_output_head(tape, z, context)?;
    let clf = classification_loss(tape, logits, gold, variant)?;
    match a_star {
        None => Ok(LossNodes {
            total: clf,
            clf,
            attn_kl: None,
        }),
        Some(target) => {
            let kl = tape.kl_div(target, attn)?;
            let scaled = tape.scale(kl, lambda)?;
            let total = tape.add(clf, scaled)?;
            Ok(LossNodes {
                total,
                clf,
                attn_kl: Some(kl),
            })
        }
    }
}

/// Freshly initialized parameters for `kind` at `dims`, exactly as
/// training would draw them. Exposed so external gradient checks can
/// perturb realistic (non-degenerate) parameter points.
pub fn init_model_params(kind: ModelKind, dims: &ModelDims, seed: u64) -> ParamStore {
    init_params(kind, dims, seed)
}

/// Builds the full training-loss graph for one example on `params`,
/// runs backward, and returns the loss with per-parameter gradients.
/// This is the seam finite-difference verification drives; training
/// uses the same graph builders.
#[allow(clippy::too_many_arguments)]
pub fn loss_with_grads(
    kind: ModelKind,
    params: &ParamStore,
    hidden: usize,
    variant: LossVariant,
    ids: &[u32],
    context: &[f64; CONTEXT_FEATURES],
    gold: Label,
    a_star: Option<&[f64]>,
    lambda: f64,
) -> Result<(f64, Vec<(String, Vec<f64>)>)> {
    let mut tape = Tape::new(params);
    let nodes = match kind {
        ModelKind::Cnn => build_cnn_loss(&mut tape, ids, context, gold, variant)?,
        ModelKind::Lstm | ModelKind::LstmRationale => {
            build_lstm_loss(&mut tape, ids, context, gold, variant, hidden, a_star, lambda)?
        }
    };
    tape.backward(nodes.total)?;
    Ok((tape.scalar(nodes.total), tape.param_grads()))
}

/// Per-epoch mean losses over the training examples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub l_clf: f64,
    pub l_attn: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose parameters were kept (differs from the last epoch
    /// only under early stopping).
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,l_clf,l_attn,l_total\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                e.epoch, e.l_clf, e.l_attn, e.l_total
            ));
        }
        out
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
}

struct Encoded {
    ids: Vec<u32>,
    context: [f64; CONTEXT_FEATURES],
    gold: Label,
    a_star: Option<Vec<f64>>,
}

fn encode_examples(
    corpus: &Corpus,
    indices: &[usize],
    kind: ModelKind,
    vocab: &Vocabulary,
) -> Result<Vec<Encoded>> {
    indices
        .iter()
        .map(|&i| {
            let t: &Tweet = &corpus.tweets[i];
            let a_star = if kind.uses_rationales() && !t.rationale_indices.is_empty() {
                Some(attention_target(&t.rationale_indices, t.tokens.len())?)
            } else {
                None
            };
            Ok(Encoded {
                ids: vocab.encode(&t.tokens),
                context: t.context_features,
                gold: t.label,
                a_star,
            })
        })
        .collect()
}

fn example_loss_nodes(
    tape: &mut Tape,
    ex: &Encoded,
    kind: ModelKind,
    config: &TrainConfig,
) -> Result<LossNodes> {
    if kind.is_lstm() {
        build_lstm_loss(
            tape,
            &ex.ids,
            &ex.context,
            ex.gold,
            config.loss_variant,
            config.hidden_dim,
            ex.a_star.as_deref(),
            config.lambda_attn,
        )
    } else {
        build_cnn_loss(tape, &ex.ids, &ex.context, ex.gold, config.loss_variant)
    }
}

/// Trains one model on the given corpus rows.
///
/// Minibatch gradient descent over shuffled examples; gradients are
/// averaged within each batch. With early stopping configured, a seeded
/// slice of the rows is held out and the parameters of the best
/// validation epoch are returned.
pub fn train(
    corpus: &Corpus,
    indices: &[usize],
    kind: ModelKind,
    vocab: &Vocabulary,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if indices.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let examples = encode_examples(corpus, indices, kind, vocab)?;
    let dims = config.dims(vocab.len());
    let mut params = init_params(kind, &dims, derive_seed(config.seed, &[stage_tag("init")]));
    let mut rng = seeded(derive_seed(config.seed, &[stage_tag("order")]));

    // Optional validation holdout for early stopping.
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let (train_rows, val_rows) = match &config.early_stop {
        Some(es) => {
            order.shuffle(&mut rng);
            let n_val = ((examples.len() as f64) * es.validation_fraction).round() as usize;
            let n_val = n_val.clamp(1, examples.len().saturating_sub(1).max(1));
            let (val, tr) = order.split_at(n_val);
            if tr.is_empty() {
                return Err(Error::Config(
                    "early stopping left an empty training split".into(),
                ));
            }
            (tr.to_vec(), val.to_vec())
        }
        None => (order.clone(), Vec::new()),
    };

    let mut optimizer = Optimizer::new(config.optimizer);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, ParamStore, usize)> = None;
    let mut bad_epochs = 0usize;

    for epoch in 0..config.epochs {
        let mut shuffled = train_rows.clone();
        shuffled.shuffle(&mut rng);
        let mut sum_clf = 0.0;
        let mut sum_attn = 0.0;
        let mut sum_total = 0.0;
        for (batch_no, batch) in shuffled.chunks(config.batch_size).enumerate() {
            params.zero_grads();
            let mut batch_grads: Vec<(String, Vec<f64>)> = Vec::new();
            for &row in batch {
                let ex = &examples[row];
                let mut tape = Tape::new(&params);
                let nodes = example_loss_nodes(&mut tape, ex, kind, config)?;
                let total = tape.scalar(nodes.total);
                if !total.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: batch_no });
                }
                sum_total += total;
                sum_clf += tape.scalar(nodes.clf);
                if let Some(klid) = nodes.attn_kl {
                    sum_attn += tape.scalar(klid);
                }
                tape.backward(nodes.total)?;
                batch_grads.extend(tape.param_grads());
            }
            for (name, grad) in &batch_grads {
                params.add_grad(name, grad)?;
            }
            params.scale_grads(1.0 / batch.len() as f64);
            optimizer.step(&mut params, config.learning_rate)?;
        }
        let n = shuffled.len() as f64;
        log.epochs.push(EpochStats {
            epoch,
            l_clf: sum_clf / n,
            l_attn: sum_attn / n,
            l_total: sum_total / n,
        });

        if config.early_stop.is_some() {
            let mut val_loss = 0.0;
            for &row in &val_rows {
                let ex = &examples[row];
                let mut tape = Tape::new(&params);
                let nodes = example_loss_nodes(&mut tape, ex, kind, config)?;
                val_loss += tape.scalar(nodes.total);
            }
            val_loss /= val_rows.len() as f64;
            let improved = best.as_ref().map_or(true, |(b, _, _)| val_loss < *b);
            if improved {
                best = Some((val_loss, params.clone(), epoch));
                bad_epochs = 0;
            } else {
                bad_epochs += 1;
                if bad_epochs > config.early_stop.as_ref().unwrap().patience {
                    break;
                }
            }
        }
    }

    let (final_params, best_epoch) = match best {
        Some((_, p, e)) => (p, e),
        None => {
            let last = log.epochs.len().saturating_sub(1);
            (params, last)
        }
    };
    log.best_epoch = best_epoch;
    Ok(TrainOutcome {
        model: Model {
            kind,
            dims,
            loss_variant: config.loss_variant,
            params: final_params,
            vocab_hash: vocab.hash(),
        },
        log,
    })
}

/// Trains `config.ensemble_size` models with seeds derived per member.
pub fn train_ensemble(
    corpus: &Corpus,
    indices: &[usize],
    kind: ModelKind,
    vocab: &Vocabulary,
    config: &TrainConfig,
) -> Result<Vec<TrainOutcome>> {
    config.validate()?;
    (0..config.ensemble_size)
        .map(|member| {
            let mut member_config = config.clone();
            member_config.seed =
                derive_seed(config.seed, &[stage_tag("member"), member as u64]);
            train(corpus, indices, kind, vocab, &member_config)
        })
        .collect()
}

/// Argmax over class scores with ties broken by class order.
pub fn argmax_label(scores: &[f64; 3]) -> Label {
    Label::from_index(argmax(scores)).expect("three classes")
}

pub fn predict<M: Classifier>(
    model: &M,
    token_ids: &[u32],
    context: &[f64; CONTEXT_FEATURES],
) -> Result<Label> {
    Ok(argmax_label(&model.class_scores(token_ids, context)?))
}

/// Checks ensemble structural invariants: nonempty, odd-sized, and all
/// members of the same kind.
pub fn validate_ensemble(models: &[Model]) -> Result<()> {
    if models.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    if models.len() % 2 == 0 {
        return Err(Error::Config(format!(
            "ensemble size must be odd, got {}",
            models.len()
        )));
    }
    if models.iter().any(|m| m.kind != models[0].kind) {
        return Err(Error::MixedEnsemble);
    }
    Ok(())
}

/// Majority vote over an odd-sized ensemble.
///
/// Each member votes for its top class; vote ties are broken by summed
/// class scores across members, and any remaining tie by class order.
pub fn majority_vote<M: Classifier>(
    models: &[M],
    token_ids: &[u32],
    context: &[f64; CONTEXT_FEATURES],
) -> Result<Label> {
    if models.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    if models.len() % 2 == 0 {
        return Err(Error::Config(format!(
            "ensemble size must be odd, got {}",
            models.len()
        )));
    }
    let mut votes = [0usize; 3];
    let mut summed = [0.0f64; 3];
    for m in models {
        let scores = m.class_scores(token_ids, context)?;
        votes[argmax_label(&scores).index()] += 1;
        for (acc, s) in summed.iter_mut().zip(scores) {
            *acc += s;
        }
    }
    let top_votes = *votes.iter().max().expect("three classes");
    let mut winner = None;
    for label in Label::ALL {
        if votes[label.index()] != top_votes {
            continue;
        }
        winner = match winner {
            None => Some(label),
            Some(best) if summed[label.index()] > summed[best.index()] => Some(label),
            keep => keep,
        };
    }
    Ok(winner.expect("at least one class has the top vote count"))
}
