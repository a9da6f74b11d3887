//! Reverse-mode autodiff on an append-only tape.
//!
//! Each operation pushes one node holding its output value, shape, and
//! enough cached state to run the backward step. Parameter leaves borrow
//! their values straight from a [`ParamStore`]; everything else owns its
//! buffer. `backward` walks the tape once in reverse, so a node's
//! gradient is complete before it propagates to its inputs.
//!
//! Shapes are row-major `(rows, cols)`; vectors are `(len, 1)`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::store::ParamStore;

pub type NodeId = usize;

enum Storage<'s> {
    Owned(Vec<f64>),
    Param(&'s [f64]),
}

impl Storage<'_> {
    fn as_slice(&self) -> &[f64] {
        match self {
            Storage::Owned(v) => v,
            Storage::Param(s) => s,
        }
    }
}

/// Cached forward state for one LSTM cell application.
struct LstmCache {
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    tanh_c: Vec<f64>,
}

enum Op {
    Leaf,
    /// Row lookup: out[t] = table[ids[t]].
    Embed { table: NodeId, ids: Vec<u32> },
    /// w (m,n) @ x (n,1) + b (m,1).
    Dense { w: NodeId, x: NodeId, b: Option<NodeId> },
    /// Width-1 convolution over a (l,d) sequence: per-step dense.
    ConvW1 { w: NodeId, b: NodeId, seq: NodeId },
    /// Width-2 convolution; the last window pads with a zero vector so
    /// the output keeps length l.
    ConvW2 { w: NodeId, b: NodeId, seq: NodeId },
    /// Per-feature max over time; `argmax` holds the first maximizing
    /// step for each feature.
    MaxPoolTime { seq: NodeId, argmax: Vec<usize> },
    /// Fused LSTM cell; output is [h; c] of shape (2h, 1).
    LstmCell {
        w_ih: NodeId,
        w_hh: NodeId,
        b: NodeId,
        x: NodeId,
        h_prev: NodeId,
        c_prev: NodeId,
        cache: Box<LstmCache>,
    },
    Slice { src: NodeId, start: usize },
    Tanh { x: NodeId },
    Sigmoid { x: NodeId },
    Softmax { x: NodeId },
    Dot { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: f64 },
    Concat { parts: Vec<NodeId> },
    Stack { parts: Vec<NodeId> },
    /// out = sum_i weights[i] * rows[i], weights (l,1), rows (h,1) each.
    WeightedSum { weights: NodeId, rows: Vec<NodeId> },
    /// Summed binary cross entropy of `scores` against 0/1 targets,
    /// with scores clamped to [eps, 1-eps].
    Bce { scores: NodeId, targets: Vec<f64> },
    /// KL(target || approx) with the 0 ln 0 = 0 convention.
    KlDiv { approx: NodeId, target: Vec<f64> },
}

struct Node<'s> {
    rows: usize,
    cols: usize,
    value: Storage<'s>,
    op: Op,
}

impl Node<'_> {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

/// Probability floor for binary cross entropy.
pub const BCE_EPS: f64 = 1e-7;

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node<'s>>,
    params: BTreeMap<String, NodeId>,
    grads: Vec<Vec<f64>>,
    backward_done: bool,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Tape<'s> {
        Tape {
            store,
            nodes: Vec::new(),
            params: BTreeMap::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value: Storage::Owned(value),
            op,
        });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        self.nodes[id].value.as_slice()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id)[0]
    }

    fn check_vector(&self, op: &'static str, id: NodeId) -> Result<usize> {
        let (r, c) = self.shape(id);
        if c != 1 {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("expected a column vector, got {r}x{c}"),
            });
        }
        Ok(r)
    }

    /// Leaf node borrowing the named parameter. Repeated calls for the
    /// same name return the same node.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let store: &'s ParamStore = self.store;
        let tensor = store.get(name)?;
        self.nodes.push(Node {
            rows: tensor.rows(),
            cols: tensor.cols(),
            value: Storage::Param(&tensor.values),
            op: Op::Leaf,
        });
        let id = self.nodes.len() - 1;
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    /// Constant leaf; no gradient flows out of it.
    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<NodeId> {
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "constant",
                detail: format!("{rows}x{cols} needs {} values, got {}", rows * cols, values.len()),
            });
        }
        Ok(self.push(rows, cols, values, Op::Leaf))
    }

    pub fn vector(&mut self, values: Vec<f64>) -> Result<NodeId> {
        let rows = values.len();
        self.constant(rows, 1, values)
    }

    pub fn embed(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let (vocab, dim) = self.shape(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::TokenIdOutOfRange { id, vocab });
            }
            let row = &self.value(table)[id as usize * dim..(id as usize + 1) * dim];
            out.extend_from_slice(row);
        }
        Ok(self.push(ids.len(), dim, out, Op::Embed { table, ids: ids.to_vec() }))
    }

    pub fn dense(&mut self, w: NodeId, x: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (m, n) = self.shape(w);
        let xr = self.check_vector("dense", x)?;
        if xr != n {
            return Err(Error::ShapeMismatch {
                op: "dense",
                detail: format!("weight is {m}x{n}, input has {xr} rows"),
            });
        }
        if let Some(b) = b {
            let br = self.check_vector("dense", b)?;
            if br != m {
                return Err(Error::ShapeMismatch {
                    op: "dense",
                    detail: format!("bias has {br} rows, weight has {m}"),
                });
            }
        }
        let wv = self.value(w);
        let xv = self.value(x);
        let mut out = vec![0.0; m];
        for i in 0..m {
            let mut acc = 0.0;
            for j in 0..n {
                acc += wv[i * n + j] * xv[j];
            }
            out[i] = acc;
        }
        if let Some(b) = b {
            let bv = self.value(b);
            for i in 0..m {
                out[i] += bv[i];
            }
        }
        Ok(self.push(m, 1, out, Op::Dense { w, x, b }))
    }

    pub fn conv_w1(&mut self, w: NodeId, b: NodeId, seq: NodeId) -> Result<NodeId> {
        let (f, d) = self.shape(w);
        let (l, sd) = self.shape(seq);
        let br = self.check_vector("conv_w1", b)?;
        if sd != d || br != f {
            return Err(Error::ShapeMismatch {
                op: "conv_w1",
                detail: format!("weight {f}x{d}, bias {br}, sequence {l}x{sd}"),
            });
        }
        let wv = self.value(w);
        let bv = self.value(b);
        let sv = self.value(seq);
        let mut out = vec![0.0; l * f];
        for t in 0..l {
            for k in 0..f {
                let mut acc = bv[k];
                for j in 0..d {
                    acc += wv[k * d + j] * sv[t * d + j];
                }
                out[t * f + k] = acc;
            }
        }
        Ok(self.push(l, f, out, Op::ConvW1 { w, b, seq }))
    }

    pub fn conv_w2(&mut self, w: NodeId, b: NodeId, seq: NodeId) -> Result<NodeId> {
        let (f, d2) = self.shape(w);
        let (l, d) = self.shape(seq);
        let br = self.check_vector("conv_w2", b)?;
        if d2 != 2 * d || br != f {
            return Err(Error::ShapeMismatch {
                op: "conv_w2",
                detail: format!("weight {f}x{d2}, bias {br}, sequence {l}x{d}"),
            });
        }
        let wv = self.value(w);
        let bv = self.value(b);
        let sv = self.value(seq);
        let mut out = vec![0.0; l * f];
        for t in 0..l {
            for k in 0..f {
                let mut acc = bv[k];
                for j in 0..d {
                    acc += wv[k * d2 + j] * sv[t * d + j];
                }
                if t + 1 < l {
                    for j in 0..d {
                        acc += wv[k * d2 + d + j] * sv[(t + 1) * d + j];
                    }
                }
                out[t * f + k] = acc;
            }
        }
        Ok(self.push(l, f, out, Op::ConvW2 { w, b, seq }))
    }

    pub fn maxpool_over_time(&mut self, seq: NodeId) -> Result<NodeId> {
        let (l, f) = self.shape(seq);
        if l == 0 {
            return Err(Error::ShapeMismatch {
                op: "maxpool_over_time",
                detail: "empty sequence".into(),
            });
        }
        let sv = self.value(seq);
        let mut out = vec![f64::NEG_INFINITY; f];
        let mut argmax = vec![0usize; f];
        for t in 0..l {
            for k in 0..f {
                let v = sv[t * f + k];
                if v > out[k] {
                    out[k] = v;
                    argmax[k] = t;
                }
            }
        }
        Ok(self.push(f, 1, out, Op::MaxPoolTime { seq, argmax }))
    }

    /// One LSTM step. Gate order in `w_ih`, `w_hh`, and `b` is
    /// input, forget, candidate, output. Returns [h; c].
    pub fn lstm_cell(
        &mut self,
        w_ih: NodeId,
        w_hh: NodeId,
        b: NodeId,
        x: NodeId,
        h_prev: NodeId,
        c_prev: NodeId,
    ) -> Result<NodeId> {
        let (four_h, d) = self.shape(w_ih);
        let h = four_h / 4;
        let (hh_rows, hh_cols) = self.shape(w_hh);
        let br = self.check_vector("lstm_cell", b)?;
        let xr = self.check_vector("lstm_cell", x)?;
        let hr = self.check_vector("lstm_cell", h_prev)?;
        let cr = self.check_vector("lstm_cell", c_prev)?;
        if four_h != 4 * h
            || hh_rows != four_h
            || hh_cols != h
            || br != four_h
            || xr != d
            || hr != h
            || cr != h
        {
            return Err(Error::ShapeMismatch {
                op: "lstm_cell",
                detail: format!(
                    "w_ih {four_h}x{d}, w_hh {hh_rows}x{hh_cols}, b {br}, x {xr}, h {hr}, c {cr}"
                ),
            });
        }
        let wih = self.value(w_ih);
        let whh = self.value(w_hh);
        let bv = self.value(b);
        let xv = self.value(x);
        let hv = self.value(h_prev);
        let cv = self.value(c_prev);

        let mut pre = vec![0.0; 4 * h];
        for k in 0..4 * h {
            let mut acc = bv[k];
            for j in 0..d {
                acc += wih[k * d + j] * xv[j];
            }
            for j in 0..h {
                acc += whh[k * h + j] * hv[j];
            }
            pre[k] = acc;
        }
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let mut cache = LstmCache {
            i: vec![0.0; h],
            f: vec![0.0; h],
            g: vec![0.0; h],
            o: vec![0.0; h],
            tanh_c: vec![0.0; h],
        };
        let mut out = vec![0.0; 2 * h];
        for j in 0..h {
            cache.i[j] = sig(pre[j]);
            cache.f[j] = sig(pre[h + j]);
            cache.g[j] = pre[2 * h + j].tanh();
            cache.o[j] = sig(pre[3 * h + j]);
            let c_new = cache.f[j] * cv[j] + cache.i[j] * cache.g[j];
            cache.tanh_c[j] = c_new.tanh();
            out[j] = cache.o[j] * cache.tanh_c[j];
            out[h + j] = c_new;
        }
        Ok(self.push(
            2 * h,
            1,
            out,
            Op::LstmCell {
                w_ih,
                w_hh,
                b,
                x,
                h_prev,
                c_prev,
                cache: Box::new(cache),
            },
        ))
    }

    pub fn slice(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let n = self.check_vector("slice", src)?;
        if start + len > n {
            return Err(Error::ShapeMismatch {
                op: "slice",
                detail: format!("[{start}, {}) out of range for length {n}", start + len),
            });
        }
        let out = self.value(src)[start..start + len].to_vec();
        Ok(self.push(len, 1, out, Op::Slice { src, start }))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        let out: Vec<f64> = self.value(x).iter().map(|v| v.tanh()).collect();
        Ok(self.push(r, c, out, Op::Tanh { x }))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        let out: Vec<f64> = self.value(x).iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        Ok(self.push(r, c, out, Op::Sigmoid { x }))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.check_vector("softmax", x)?;
        let out = super::softmax(self.value(x));
        Ok(self.push(n, 1, out, Op::Softmax { x }))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ar = self.check_vector("dot", a)?;
        let br = self.check_vector("dot", b)?;
        if ar != br {
            return Err(Error::ShapeMismatch {
                op: "dot",
                detail: format!("lengths {ar} and {br}"),
            });
        }
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(1, 1, vec![v], Op::Dot { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if (ar, ac) != (br, bc) {
            return Err(Error::ShapeMismatch {
                op: "add",
                detail: format!("{ar}x{ac} vs {br}x{bc}"),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(ar, ac, out, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        let out: Vec<f64> = self.value(x).iter().map(|v| v * factor).collect();
        Ok(self.push(r, c, out, Op::Scale { x, factor }))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                detail: "no parts".into(),
            });
        }
        let mut out = Vec::new();
        for &p in parts {
            self.check_vector("concat", p)?;
            out.extend_from_slice(self.value(p));
        }
        let rows = out.len();
        Ok(self.push(rows, 1, out, Op::Concat { parts: parts.to_vec() }))
    }

    pub fn stack(&mut self, scalars: &[NodeId]) -> Result<NodeId> {
        if scalars.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "stack",
                detail: "no parts".into(),
            });
        }
        let mut out = Vec::with_capacity(scalars.len());
        for &s in scalars {
            if self.nodes[s].len() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    detail: "parts must be scalars".into(),
                });
            }
            out.push(self.scalar(s));
        }
        let rows = out.len();
        Ok(self.push(rows, 1, out, Op::Stack { parts: scalars.to_vec() }))
    }

    pub fn weighted_sum(&mut self, weights: NodeId, rows: &[NodeId]) -> Result<NodeId> {
        let wl = self.check_vector("weighted_sum", weights)?;
        if wl != rows.len() || rows.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                detail: format!("{wl} weights for {} rows", rows.len()),
            });
        }
        let h = self.check_vector("weighted_sum", rows[0])?;
        let mut out = vec![0.0; h];
        for (i, &row) in rows.iter().enumerate() {
            let rl = self.check_vector("weighted_sum", row)?;
            if rl != h {
                return Err(Error::ShapeMismatch {
                    op: "weighted_sum",
                    detail: format!("row {i} has length {rl}, expected {h}"),
                });
            }
            let w = self.value(weights)[i];
            for (acc, v) in out.iter_mut().zip(self.value(row)) {
                *acc += w * v;
            }
        }
        Ok(self.push(h, 1, out, Op::WeightedSum { weights, rows: rows.to_vec() }))
    }

    pub fn bce(&mut self, scores: NodeId, targets: &[f64]) -> Result<NodeId> {
        let n = self.check_vector("bce", scores)?;
        if n != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "bce",
                detail: format!("{n} scores, {} targets", targets.len()),
            });
        }
        let mut loss = 0.0;
        for (&s, &t) in self.value(scores).iter().zip(targets) {
            let s = s.clamp(BCE_EPS, 1.0 - BCE_EPS);
            loss -= t * s.ln() + (1.0 - t) * (1.0 - s).ln();
        }
        Ok(self.push(1, 1, vec![loss], Op::Bce { scores, targets: targets.to_vec() }))
    }

    pub fn kl_div(&mut self, target: &[f64], approx: NodeId) -> Result<NodeId> {
        let n = self.check_vector("kl_div", approx)?;
        if n != target.len() {
            return Err(Error::ShapeMismatch {
                op: "kl_div",
                detail: format!("target length {}, approx length {n}", target.len()),
            });
        }
        let loss = super::kl_divergence(target, self.value(approx))?;
        Ok(self.push(1, 1, vec![loss], Op::KlDiv { approx, target: target.to_vec() }))
    }

    /// Reverse sweep from a scalar `loss` node. May run once per tape.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.nodes[loss].len() != 1 {
            let (r, c) = self.shape(loss);
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!("loss must be a scalar, got {r}x{c}"),
            });
        }
        self.backward_done = true;
        self.grads = self.nodes.iter().map(|n| vec![0.0; n.len()]).collect();
        self.grads[loss][0] = 1.0;

        // Disjoint borrows: node values and ops are read-only here while
        // gradients are written.
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |nid: NodeId| nodes[nid].value.as_slice();

        for id in (0..=loss).rev() {
            // Detach this node's gradient; inputs always have smaller ids.
            let gout = std::mem::take(&mut grads[id]);
            if gout.iter().all(|&g| g == 0.0) {
                grads[id] = gout;
                continue;
            }
            match &nodes[id].op {
                Op::Leaf => {}
                Op::Embed { table, ids } => {
                    let dim = nodes[*table].cols;
                    for (t, &tok) in ids.iter().enumerate() {
                        for j in 0..dim {
                            grads[*table][tok as usize * dim + j] += gout[t * dim + j];
                        }
                    }
                }
                Op::Dense { w, x, b } => {
                    let (m, n) = (nodes[*w].rows, nodes[*w].cols);
                    for i in 0..m {
                        let gi = gout[i];
                        for j in 0..n {
                            grads[*w][i * n + j] += gi * val(*x)[j];
                        }
                        for j in 0..n {
                            grads[*x][j] += val(*w)[i * n + j] * gi;
                        }
                        if let Some(b) = b {
                            grads[*b][i] += gi;
                        }
                    }
                }
                Op::ConvW1 { w, b, seq } => {
                    let (f, d) = (nodes[*w].rows, nodes[*w].cols);
                    let l = nodes[*seq].rows;
                    for t in 0..l {
                        for k in 0..f {
                            let gk = gout[t * f + k];
                            if gk == 0.0 {
                                continue;
                            }
                            grads[*b][k] += gk;
                            for j in 0..d {
                                grads[*w][k * d + j] += gk * val(*seq)[t * d + j];
                            }
                            for j in 0..d {
                                grads[*seq][t * d + j] += val(*w)[k * d + j] * gk;
                            }
                        }
                    }
                }
                Op::ConvW2 { w, b, seq } => {
                    let (f, d2) = (nodes[*w].rows, nodes[*w].cols);
                    let (l, d) = (nodes[*seq].rows, nodes[*seq].cols);
                    for t in 0..l {
                        for k in 0..f {
                            let gk = gout[t * f + k];
                            if gk == 0.0 {
                                continue;
                            }
                            grads[*b][k] += gk;
                            for j in 0..d {
                                grads[*w][k * d2 + j] += gk * val(*seq)[t * d + j];
                            }
                            for j in 0..d {
                                grads[*seq][t * d + j] += val(*w)[k * d2 + j] * gk;
                            }
                            if t + 1 < l {
                                for j in 0..d {
                                    grads[*w][k * d2 + d + j] += gk * val(*seq)[(t + 1) * d + j];
                                }
                                for j in 0..d {
                                    grads[*seq][(t + 1) * d + j] += val(*w)[k * d2 + d + j] * gk;
                                }
                            }
                        }
                    }
                }
                Op::MaxPoolTime { seq, argmax } => {
                    let f = nodes[id].rows;
                    for k in 0..f {
                        grads[*seq][argmax[k] * f + k] += gout[k];
                    }
                }
                Op::LstmCell {
                    w_ih,
                    w_hh,
                    b,
                    x,
                    h_prev,
                    c_prev,
                    cache,
                } => {
                    let h = nodes[id].rows / 2;
                    let d = nodes[*w_ih].cols;
                    let (gh, gc_out) = gout.split_at(h);
                    // ga is the gradient at the pre-activations, gate
                    // order (i, f, g, o).
                    let mut ga = vec![0.0; 4 * h];
                    let mut gc_prev = vec![0.0; h];
                    for j in 0..h {
                        let tc = cache.tanh_c[j];
                        let gc = gc_out[j] + gh[j] * cache.o[j] * (1.0 - tc * tc);
                        let go = gh[j] * tc;
                        ga[j] = gc * cache.g[j] * cache.i[j] * (1.0 - cache.i[j]);
                        ga[h + j] = gc * val(*c_prev)[j] * cache.f[j] * (1.0 - cache.f[j]);
                        ga[2 * h + j] = gc * cache.i[j] * (1.0 - cache.g[j] * cache.g[j]);
                        ga[3 * h + j] = go * cache.o[j] * (1.0 - cache.o[j]);
                        gc_prev[j] = gc * cache.f[j];
                    }
                    for k in 0..4 * h {
                        let gk = ga[k];
                        grads[*b][k] += gk;
                        if gk == 0.0 {
                            continue;
                        }
                        for j in 0..d {
                            grads[*w_ih][k * d + j] += gk * val(*x)[j];
                        }
                        for j in 0..d {
                            grads[*x][j] += val(*w_ih)[k * d + j] * gk;
                        }
                        for j in 0..h {
                            grads[*w_hh][k * h + j] += gk * val(*h_prev)[j];
                        }
                        for j in 0..h {
                            grads[*h_prev][j] += val(*w_hh)[k * h + j] * gk;
                        }
                    }
                    for j in 0..h {
                        grads[*c_prev][j] += gc_prev[j];
                    }
                }
                Op::Slice { src, start } => {
                    for (j, &g) in gout.iter().enumerate() {
                        grads[*src][start + j] += g;
                    }
                }
                Op::Tanh { x } => {
                    for j in 0..gout.len() {
                        let y = val(id)[j];
                        grads[*x][j] += gout[j] * (1.0 - y * y);
                    }
                }
                Op::Sigmoid { x } => {
                    for j in 0..gout.len() {
                        let y = val(id)[j];
                        grads[*x][j] += gout[j] * y * (1.0 - y);
                    }
                }
                Op::Softmax { x } => {
                    let y = val(id);
                    let inner: f64 = gout.iter().zip(y).map(|(g, v)| g * v).sum();
                    for j in 0..gout.len() {
                        grads[*x][j] += y[j] * (gout[j] - inner);
                    }
                }
                Op::Dot { a, b } => {
                    let g = gout[0];
                    for j in 0..nodes[*a].len() {
                        grads[*a][j] += g * val(*b)[j];
                    }
                    for j in 0..nodes[*a].len() {
                        grads[*b][j] += g * val(*a)[j];
                    }
                }
                Op::Add { a, b } => {
                    for (j, &g) in gout.iter().enumerate() {
                        grads[*a][j] += g;
                    }
                    for (j, &g) in gout.iter().enumerate() {
                        grads[*b][j] += g;
                    }
                }
                Op::Scale { x, factor } => {
                    for (j, &g) in gout.iter().enumerate() {
                        grads[*x][j] += g * factor;
                    }
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p].len();
                        for j in 0..len {
                            grads[p][j] += gout[offset + j];
                        }
                        offset += len;
                    }
                }
                Op::Stack { parts } => {
                    for (j, &p) in parts.iter().enumerate() {
                        grads[p][0] += gout[j];
                    }
                }
                Op::WeightedSum { weights, rows } => {
                    for (i, &row) in rows.iter().enumerate() {
                        let wi = val(*weights)[i];
                        let mut acc = 0.0;
                        for (j, &g) in gout.iter().enumerate() {
                            acc += g * val(row)[j];
                            grads[row][j] += wi * g;
                        }
                        grads[*weights][i] += acc;
                    }
                }
                Op::Bce { scores, targets } => {
                    let g = gout[0];
                    for (j, &t) in targets.iter().enumerate() {
                        let s = val(*scores)[j];
                        // Outside the clamp the loss is locally constant
                        // in the score, so no gradient flows.
                        if s > BCE_EPS && s < 1.0 - BCE_EPS {
                            grads[*scores][j] += g * (-t / s + (1.0 - t) / (1.0 - s));
                        }
                    }
                }
                Op::KlDiv { approx, target } => {
                    let g = gout[0];
                    for (j, &p) in target.iter().enumerate() {
                        if p > 0.0 {
                            grads[*approx][j] -= g * p / val(*approx)[j];
                        }
                    }
                }
            }
            grads[id] = gout;
        }
        Ok(())
    }

    /// Gradient of the most recent backward pass at `id`.
    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.grads[id]
    }

    /// Parameter gradients in name order. Parameters the loss never
    /// touched report zeros.
    pub fn param_grads(&self) -> Vec<(String, Vec<f64>)> {
        self.params
            .iter()
            .map(|(name, &id)| (name.clone(), self.grads[id].clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn store_with(pairs: &[(&str, usize, usize, Vec<f64>)]) -> ParamStore {
        use crate::numerics::store::Tensor;
        let mut s = ParamStore::new();
        for (name, r, c, v) in pairs {
            s.insert(name, Tensor::from_values(*r, *c, v.clone()).unwrap());
        }
        s
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.vector(vec![0.0, 0.0, 0.0]).unwrap();
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y) {
            assert_relative_eq!(v, 1.0 / 3.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn maxpool_takes_per_feature_max() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let seq = tape.constant(2, 2, vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        let pooled = tape.maxpool_over_time(seq).unwrap();
        assert_eq!(tape.value(pooled), &[3.0, 5.0]);
    }

    #[test]
    fn maxpool_backward_routes_to_first_argmax() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        // Feature 0 ties at steps 0 and 1; gradient goes to step 0.
        let seq = tape.constant(2, 1, vec![4.0, 4.0]).unwrap();
        let pooled = tape.maxpool_over_time(seq).unwrap();
        tape.backward(pooled).unwrap();
        assert_eq!(tape.grad(seq), &[1.0, 0.0]);
    }

    #[test]
    fn dense_matches_hand_computation() {
        let store = store_with(&[
            ("w", 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            ("b", 2, 1, vec![0.5, -0.5]),
        ]);
        let mut tape = Tape::new(&store);
        let w = tape.param("w").unwrap();
        let b = tape.param("b").unwrap();
        let x = tape.vector(vec![1.0, 0.0, -1.0]).unwrap();
        let y = tape.dense(w, x, Some(b)).unwrap();
        assert_eq!(tape.value(y), &[1.0 - 3.0 + 0.5, 4.0 - 6.0 - 0.5]);
    }

    #[test]
    fn bce_handles_saturated_scores() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let s = tape.vector(vec![1.0, 0.0]).unwrap();
        let loss = tape.bce(s, &[1.0, 0.0]).unwrap();
        // Perfect scores cost -2 ln(1 - eps), tiny but finite.
        assert!(tape.scalar(loss).is_finite());
        assert!(tape.scalar(loss) < 1e-6);
    }

    #[test]
    fn kl_div_rejects_zero_approx_where_target_positive() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let q = tape.vector(vec![0.0, 1.0]).unwrap();
        let err = tape.kl_div(&[0.5, 0.5], q).unwrap_err();
        assert!(matches!(err, Error::UnsupportedDivergence { index: 0, .. }));
    }

    #[test]
    fn embed_rejects_out_of_range_ids() {
        let store = store_with(&[("emb", 2, 2, vec![1.0, 2.0, 3.0, 4.0])]);
        let mut tape = Tape::new(&store);
        let table = tape.param("emb").unwrap();
        assert!(matches!(
            tape.embed(table, &[2]).unwrap_err(),
            Error::TokenIdOutOfRange { id: 2, vocab: 2 }
        ));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let store = store_with(&[("w", 1, 1, vec![2.0])]);
        let mut tape = Tape::new(&store);
        let w = tape.param("w").unwrap();
        let y = tape.scale(w, 3.0).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y).unwrap_err(), Error::BackwardTwice));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let v = tape.vector(vec![1.0, 2.0]).unwrap();
        assert!(tape.backward(v).is_err());
    }

    #[test]
    fn unreached_params_get_zero_grads() {
        let store = store_with(&[("used", 1, 1, vec![2.0]), ("unused", 2, 1, vec![1.0, 1.0])]);
        let mut tape = Tape::new(&store);
        let used = tape.param("used").unwrap();
        let _unused = tape.param("unused").unwrap();
        let y = tape.scale(used, 5.0).unwrap();
        tape.backward(y).unwrap();
        let grads = tape.param_grads();
        assert_eq!(grads.len(), 2);
        assert_eq!(grads[0], ("unused".to_string(), vec![0.0, 0.0]));
        assert_eq!(grads[1], ("used".to_string(), vec![5.0]));
    }

    #[test]
    fn shared_param_node_accumulates_both_uses() {
        // y = w . w, so dy/dw = 2w.
        let store = store_with(&[("w", 2, 1, vec![3.0, -1.0])]);
        let mut tape = Tape::new(&store);
        let w1 = tape.param("w").unwrap();
        let w2 = tape.param("w").unwrap();
        assert_eq!(w1, w2);
        let y = tape.dot(w1, w2).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(w1), &[6.0, -2.0]);
    }

    #[test]
    fn softmax_backward_matches_jacobian() {
        let store = store_with(&[("x", 3, 1, vec![0.2, -0.4, 0.9])]);
        let mut tape = Tape::new(&store);
        let x = tape.param("x").unwrap();
        let y = tape.softmax(x).unwrap();
        let first = tape.slice(y, 0, 1).unwrap();
        tape.backward(first).unwrap();
        let s = super::super::softmax(&[0.2, -0.4, 0.9]);
        // d s0 / d x_j = s0 (delta_0j - s_j).
        for j in 0..3 {
            let expect = s[0] * (if j == 0 { 1.0 } else { 0.0 } - s[j]);
            assert_relative_eq!(tape.grad(x)[j], expect, max_relative = 1e-12);
        }
    }
}
