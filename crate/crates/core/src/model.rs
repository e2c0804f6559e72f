//! A small masked-LM: mean-of-embeddings context, one tanh hidden layer and
//! a softmax over the vocabulary at the mask position.
//!
//! ```text
//! ctx    = mean(E[t] for t != mask)        (zero when no context)
//! hidden = tanh(ctx · W1 + b1)             W1: d×h
//! out    = hidden · W2 + b2                W2: h×d
//! logits = U · out                         U: V×d (U = E when tied)
//! ```
//!
//! Parameters are stored as `T` (f32 for checkpoints, f64 for gradient
//! checks); all arithmetic is carried out in f64.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;

use crate::datastore::LabelDatastore;
use crate::error::{Error, Result};
use crate::example::MinedExample;
use crate::rng::{streams, Stream};
use crate::task::TaskSpec;
use crate::tokenize::{MASK_TOKEN, OOV_TOKEN};

pub trait Scalar: Copy + Debug + PartialEq + Into<f64> + 'static {
    fn from_f64(v: f64) -> Self;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub vocab: usize,
    pub dim: usize,
    pub hidden: usize,
    pub tied: bool,
}

/// Parameter tensors in checkpoint order. `out` is empty when tied.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensors<T> {
    pub emb: Vec<T>,
    pub out: Vec<T>,
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
}

impl<T: Scalar> Tensors<T> {
    fn zeros(shape: Shape, zero: T) -> Self {
        Tensors {
            emb: vec![zero; shape.vocab * shape.dim],
            out: if shape.tied { Vec::new() } else { vec![zero; shape.vocab * shape.dim] },
            w1: vec![zero; shape.dim * shape.hidden],
            b1: vec![zero; shape.hidden],
            w2: vec![zero; shape.hidden * shape.dim],
            b2: vec![zero; shape.dim],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &[T]> {
        [&self.emb, &self.out, &self.w1, &self.b1, &self.w2, &self.b2].into_iter().map(Vec::as_slice)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Vec<T>> {
        [&mut self.emb, &mut self.out, &mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2].into_iter()
    }

    fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Tensors<U> {
        let m = |v: &Vec<T>| v.iter().map(|&x| f(x)).collect();
        Tensors { emb: m(&self.emb), out: m(&self.out), w1: m(&self.w1), b1: m(&self.b1), w2: m(&self.w2), b2: m(&self.b2) }
    }
}

/// Gradients share the tensor layout.
pub type Gradients = Tensors<f64>;

impl Gradients {
    pub fn norm(&self) -> f64 {
        libm::sqrt(self.iter().flat_map(|t| t.iter()).map(|g| g * g).sum())
    }
}

/// Activations of one forward pass, consumed by [`Mlm::backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    context_rows: Vec<usize>,
    ctx: Vec<f64>,
    hidden: Vec<f64>,
    out: Vec<f64>,
    probs: Vec<f64>,
}

impl ForwardTrace {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlm<T> {
    vocab: Vec<String>,
    index: BTreeMap<String, usize>,
    shape: Shape,
    rng_seed: u64,
    tensors: Tensors<T>,
}

pub type ModelParams = Mlm<f32>;

fn index_vocab(vocab: &[String]) -> Result<BTreeMap<String, usize>> {
    let mut index = BTreeMap::new();
    for (i, t) in vocab.iter().enumerate() {
        if t.is_empty() || t.contains(['\n', '\r']) {
            return Err(Error::InvalidToken(t.clone()));
        }
        if index.insert(t.clone(), i).is_some() {
            return Err(Error::DuplicateToken(t.clone()));
        }
    }
    for special in [MASK_TOKEN, OOV_TOKEN] {
        if !index.contains_key(special) {
            return Err(Error::InvalidModel(alloc::format!("vocabulary lacks {special}")));
        }
    }
    Ok(index)
}

fn with_specials(mut vocab: Vec<String>) -> Vec<String> {
    for special in [MASK_TOKEN, OOV_TOKEN] {
        if !vocab.iter().any(|t| t == special) {
            vocab.push(special.to_string());
        }
    }
    vocab
}

fn fill_uniform<T: Scalar>(dst: &mut [T], seed: u64, stream: u64) {
    let mut rng = Stream::new(seed, streams::INIT_BASE + stream);
    for v in dst {
        *v = T::from_f64(rng.uniform(-0.1, 0.1));
    }
}

impl<T: Scalar> Mlm<T> {
    /// Fresh parameters, uniform in (-0.1, 0.1). The mask and OOV tokens are
    /// appended to the vocabulary when missing.
    pub fn init(vocab: Vec<String>, dim: usize, hidden: usize, tied: bool, rng_seed: u64) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::InvalidModel("dimensions must be positive".to_string()));
        }
        let vocab = with_specials(vocab);
        let index = index_vocab(&vocab)?;
        let shape = Shape { vocab: vocab.len(), dim, hidden, tied };
        let mut tensors = Tensors::zeros(shape, T::from_f64(0.0));
        for (i, t) in tensors.iter_mut().enumerate() {
            fill_uniform(t, rng_seed, i as u64);
        }
        Ok(Mlm { vocab, index, shape, rng_seed, tensors })
    }

    /// Fresh parameters whose output projection rows (and input rows too, when
    /// tied) are copied from the datastore, so the output layer starts from the
    /// datastore's label geometry.
    pub fn init_from_datastore(ds: &LabelDatastore, hidden: usize, tied: bool, rng_seed: u64) -> Result<Self> {
        let mut m = Self::init(ds.tokens().to_vec(), ds.dim(), hidden, tied, rng_seed)?;
        let d = ds.dim();
        let target = if tied { &mut m.tensors.emb } else { &mut m.tensors.out };
        for row in 0..ds.len() {
            for (dst, &src) in target[row * d..(row + 1) * d].iter_mut().zip(ds.row(row)) {
                *dst = T::from_f64(src as f64);
            }
        }
        Ok(m)
    }

    pub fn from_parts(vocab: Vec<String>, shape: Shape, tensors: Tensors<T>, rng_seed: u64) -> Result<Self> {
        let index = index_vocab(&vocab)?;
        if shape.vocab != vocab.len() {
            return Err(Error::InvalidModel(alloc::format!("shape says {} tokens, vocabulary has {}", shape.vocab, vocab.len())));
        }
        let expected = Tensors::zeros(shape, T::from_f64(0.0));
        for (i, (got, want)) in tensors.iter().zip(expected.iter()).enumerate() {
            if got.len() != want.len() {
                return Err(Error::InvalidModel(alloc::format!(
                    "tensor {i} has {} values, expected {}",
                    got.len(),
                    want.len()
                )));
            }
            if got.iter().any(|v| !(*v).into().is_finite()) {
                return Err(Error::InvalidModel(alloc::format!("tensor {i} has non-finite values")));
            }
        }
        Ok(Mlm { vocab, index, shape, rng_seed, tensors })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn tensors(&self) -> &Tensors<T> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut Tensors<T> {
        &mut self.tensors
    }

    pub fn row_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn to_f64(&self) -> Mlm<f64> {
        Mlm {
            vocab: self.vocab.clone(),
            index: self.index.clone(),
            shape: self.shape,
            rng_seed: self.rng_seed,
            tensors: self.tensors.map(|v| v.into()),
        }
    }

    fn output(&self) -> &[T] {
        if self.shape.tied {
            &self.tensors.emb
        } else {
            &self.tensors.out
        }
    }

    fn context_rows<S: AsRef<str>>(&self, tokens: &[S], mask_index: usize) -> Result<Vec<usize>> {
        if mask_index >= tokens.len() {
            return Err(Error::InvalidMaskIndex { index: mask_index, len: tokens.len() });
        }
        let oov = self.index[OOV_TOKEN];
        Ok(tokens
            .iter()
            .enumerate()
            .filter(|(i, t)| *i != mask_index && t.as_ref() != MASK_TOKEN)
            .map(|(_, t)| self.row_of(t.as_ref()).unwrap_or(oov))
            .collect())
    }

    fn logits_from_rows(&self, context_rows: Vec<usize>) -> (ForwardTrace, Vec<f64>) {
        let Shape { vocab, dim, hidden, .. } = self.shape;
        let t = &self.tensors;
        let mut ctx = vec![0.0; dim];
        if !context_rows.is_empty() {
            for &r in &context_rows {
                for (c, &e) in ctx.iter_mut().zip(&t.emb[r * dim..(r + 1) * dim]) {
                    *c += e.into();
                }
            }
            let n = context_rows.len() as f64;
            for c in &mut ctx {
                *c /= n;
            }
        }
        let mut hid: Vec<f64> = t.b1.iter().map(|&b| b.into()).collect();
        for (i, &c) in ctx.iter().enumerate() {
            if c != 0.0 {
                for (h, &w) in hid.iter_mut().zip(&t.w1[i * hidden..(i + 1) * hidden]) {
                    *h += c * w.into();
                }
            }
        }
        for h in &mut hid {
            *h = libm::tanh(*h);
        }
        let mut out: Vec<f64> = t.b2.iter().map(|&b| b.into()).collect();
        for (j, &h) in hid.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(&t.w2[j * dim..(j + 1) * dim]) {
                *o += h * w.into();
            }
        }
        let u = self.output();
        let logits: Vec<f64> = (0..vocab)
            .map(|v| u[v * dim..(v + 1) * dim].iter().zip(&out).map(|(&a, b)| a.into() * b).sum())
            .collect();
        let trace = ForwardTrace { context_rows, ctx, hidden: hid, out, probs: Vec::new() };
        (trace, logits)
    }

    /// Distribution over the vocabulary at `mask_index`.
    pub fn forward<S: AsRef<str>>(&self, tokens: &[S], mask_index: usize) -> Result<(Vec<f64>, ForwardTrace)> {
        let rows = self.context_rows(tokens, mask_index)?;
        let (mut trace, logits) = self.logits_from_rows(rows);
        trace.probs = softmax(&logits);
        Ok((trace.probs.clone(), trace))
    }

    /// Log-probabilities at `mask_index`, computed from the logits directly.
    pub fn log_probs<S: AsRef<str>>(&self, tokens: &[S], mask_index: usize) -> Result<Vec<f64>> {
        let rows = self.context_rows(tokens, mask_index)?;
        let (_, logits) = self.logits_from_rows(rows);
        Ok(log_softmax(&logits))
    }

    /// Accumulates the gradient of `coef * dlogits` into `grads`, where
    /// `dlogits` is the gradient of the loss with respect to the logits.
    pub fn backward(&self, trace: ForwardTrace, dlogits: &[f64], grads: &mut Gradients) {
        let Shape { vocab, dim, hidden, tied } = self.shape;
        let t = &self.tensors;
        let u = self.output();
        let mut d_out = vec![0.0; dim];
        {
            let du = if tied { &mut grads.emb } else { &mut grads.out };
            for v in 0..vocab {
                let g = dlogits[v];
                if g == 0.0 {
                    continue;
                }
                let urow = &u[v * dim..(v + 1) * dim];
                let drow = &mut du[v * dim..(v + 1) * dim];
                for k in 0..dim {
                    drow[k] += g * trace.out[k];
                    d_out[k] += g * urow[k].into();
                }
            }
        }
        let mut d_pre = vec![0.0; hidden];
        for j in 0..hidden {
            let hj = trace.hidden[j];
            let w2row = &t.w2[j * dim..(j + 1) * dim];
            let gw2 = &mut grads.w2[j * dim..(j + 1) * dim];
            let mut acc = 0.0;
            for k in 0..dim {
                gw2[k] += hj * d_out[k];
                acc += w2row[k].into() * d_out[k];
            }
            d_pre[j] = acc * (1.0 - hj * hj);
        }
        for (b, d) in grads.b2.iter_mut().zip(&d_out) {
            *b += d;
        }
        for (b, d) in grads.b1.iter_mut().zip(&d_pre) {
            *b += d;
        }
        if trace.context_rows.is_empty() {
            return;
        }
        let mut d_ctx = vec![0.0; dim];
        for i in 0..dim {
            let ci = trace.ctx[i];
            let w1row = &t.w1[i * hidden..(i + 1) * hidden];
            let gw1 = &mut grads.w1[i * hidden..(i + 1) * hidden];
            let mut acc = 0.0;
            for j in 0..hidden {
                gw1[j] += ci * d_pre[j];
                acc += w1row[j].into() * d_pre[j];
            }
            d_ctx[i] = acc;
        }
        let inv = 1.0 / trace.context_rows.len() as f64;
        for &r in &trace.context_rows {
            for (g, d) in grads.emb[r * dim..(r + 1) * dim].iter_mut().zip(&d_ctx) {
                *g += d * inv;
            }
        }
    }

    pub fn zero_gradients(&self) -> Gradients {
        Tensors::zeros(self.shape, 0.0)
    }

    /// Weighted cross-entropy `-sum_b w_b log p(target_b|x_b) / sum_b w_b` and
    /// its gradient. Examples are reduced in batch order.
    pub fn loss_wce<E: core::borrow::Borrow<MinedExample>>(&self, batch: &[E]) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut targets = Vec::with_capacity(batch.len());
        for ex in batch {
            let ex = ex.borrow();
            targets.push(self.row_of(&ex.target).ok_or_else(|| Error::TargetNotInVocab(ex.target.clone()))?);
        }
        let total: f64 = batch.iter().map(|e| e.borrow().weight).sum();
        if total <= 0.0 || !total.is_finite() {
            return Err(Error::ZeroWeights);
        }
        let mut grads = self.zero_gradients();
        let mut loss = 0.0;
        for (ex, &target) in batch.iter().zip(&targets) {
            let ex = ex.borrow();
            if ex.weight == 0.0 {
                continue;
            }
            let coef = ex.weight / total;
            let rows = self.context_rows(&ex.tokens, ex.mask_index)?;
            let (trace, logits) = self.logits_from_rows(rows);
            let logp = log_softmax(&logits);
            loss -= coef * logp[target];
            let mut dlogits: Vec<f64> = logp.iter().map(|l| coef * libm::exp(*l)).collect();
            dlogits[target] -= coef;
            self.backward(trace, &dlogits, &mut grads);
        }
        Ok((loss, grads))
    }

    /// Plain SGD step, optionally clipping the global gradient norm.
    pub fn apply_gradients(&mut self, grads: &Gradients, lr: f64, clip_norm: Option<f64>) {
        let mut scale = lr;
        if let Some(max) = clip_norm {
            let n = grads.norm();
            if n > max {
                scale *= max / n;
            }
        }
        for (p, g) in self.tensors.iter_mut().zip(grads.iter()) {
            for (pv, gv) in p.iter_mut().zip(g) {
                *pv = T::from_f64((*pv).into() - scale * gv);
            }
        }
    }

    /// Log-probability of each seed label at the masked label slot. One forward
    /// pass serves every label.
    pub fn score_label(&self, spec: &TaskSpec, inputs: &BTreeMap<String, String>) -> Result<Vec<f64>> {
        let mut rows = Vec::with_capacity(spec.seed_labels().len());
        for s in spec.seed_labels() {
            rows.push(self.row_of(s).ok_or_else(|| Error::SeedNotInVocab(s.clone()))?);
        }
        let (tokens, mask) = spec.render_masked(inputs)?;
        let logp = self.log_probs(&tokens, mask)?;
        Ok(rows.into_iter().map(|r| logp[r]).collect())
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|l| libm::exp(l - max)).collect();
    let z: f64 = p.iter().sum();
    for v in &mut p {
        *v /= z;
    }
    p
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| libm::exp(l - max)).sum();
    let lz = max + libm::log(z);
    logits.iter().map(|l| l - lz).collect()
}
