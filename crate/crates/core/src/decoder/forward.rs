//! Forward pass, loss and reverse-mode gradients.
//!
//! Everything runs per sequence; a batch is a loop over sequences. Caches
//! keep the activations each backward step needs. Masked attention entries
//! are skipped rather than multiplied by zero, so the causal and
//! memory-padding invariances hold bit for bit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::model::{DecoderModel, LayerNorm, Linear, MultiHeadAttention};
use super::ops::{attend, mm_acc, mm_nt_acc, mm_tn_acc, positional_encoding, Matrix};
use super::DecoderError;
use crate::features::FeatureMatrix;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active.
    Train,
    /// Deterministic.
    Eval,
}

/// `batch x len x vocab` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub batch: usize,
    pub len: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl Logits {
    /// Logits of sequence `b` at position `i`.
    pub fn at(&self, b: usize, i: usize) -> &[f64] {
        let start = (b * self.len + i) * self.vocab;
        &self.data[start..start + self.vocab]
    }

    fn sequence(&self, b: usize) -> Matrix {
        let n = self.len * self.vocab;
        Matrix::from_vec(self.len, self.vocab, self.data[b * n..(b + 1) * n].to_vec())
    }
}

pub(crate) fn linear_forward(x: &Matrix, lin: &Linear) -> Matrix {
    debug_assert_eq!(x.cols, lin.fan_in);
    let mut out = Matrix::zeros(x.rows, lin.fan_out);
    for i in 0..x.rows {
        out.row_mut(i).copy_from_slice(&lin.b);
    }
    mm_acc(&x.data, &lin.w, x.rows, lin.fan_in, lin.fan_out, &mut out.data);
    out
}

/// Accumulates weight and bias gradients into `g`; returns the input gradient.
pub(crate) fn linear_backward(x: &Matrix, lin: &Linear, dy: &Matrix, g: &mut Linear) -> Matrix {
    mm_tn_acc(&x.data, &dy.data, x.rows, lin.fan_in, lin.fan_out, &mut g.w);
    for i in 0..dy.rows {
        for (gb, d) in g.b.iter_mut().zip(dy.row(i)) {
            *gb += d;
        }
    }
    let mut dx = Matrix::zeros(x.rows, lin.fan_in);
    mm_nt_acc(&dy.data, &lin.w, dy.rows, lin.fan_out, lin.fan_in, &mut dx.data);
    dx
}

/// `M = F W_p + b_p`.
pub fn project_features(features: &Matrix, proj: &Linear) -> Result<Matrix, DecoderError> {
    if features.cols != proj.fan_in {
        return Err(DecoderError::Shape(format!(
            "features have dim {}, projection expects {}",
            features.cols, proj.fan_in
        )));
    }
    Ok(linear_forward(features, proj))
}

/// Widens a stored feature matrix to f64.
pub fn feature_rows(m: &FeatureMatrix) -> Matrix {
    Matrix::from_vec(m.n(), m.dim(), m.data().iter().map(|&v| f64::from(v)).collect())
}

struct LnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

fn layer_norm_forward(x: &Matrix, ln: &LayerNorm) -> (Matrix, LnCache) {
    let d = x.cols as f64;
    let mut y = Matrix::zeros(x.rows, x.cols);
    let mut xhat = Matrix::zeros(x.rows, x.cols);
    let mut inv_std = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        let xh = xhat.row_mut(i);
        for (h, v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * inv;
        }
        let xh = xhat.row(i);
        for (c, out) in y.row_mut(i).iter_mut().enumerate() {
            *out = ln.gain[c] * xh[c] + ln.bias[c];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(dy: &Matrix, ln: &LayerNorm, cache: &LnCache, g: &mut LayerNorm) -> Matrix {
    let d = dy.cols;
    let mut dx = Matrix::zeros(dy.rows, d);
    let mut dxhat = vec![0.0; d];
    for i in 0..dy.rows {
        let xh = cache.xhat.row(i);
        let dyr = dy.row(i);
        for c in 0..d {
            g.gain[c] += dyr[c] * xh[c];
            g.bias[c] += dyr[c];
            dxhat[c] = dyr[c] * ln.gain[c];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let inv = cache.inv_std[i];
        for (c, out) in dx.row_mut(i).iter_mut().enumerate() {
            *out = inv * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    dx
}

struct AttnCache {
    xq: Matrix,
    xkv: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    concat: Matrix,
}

fn mha_forward(
    xq: &Matrix,
    xkv: &Matrix,
    attn: &MultiHeadAttention,
    heads: usize,
    bias: impl Fn(usize, usize) -> f64 + Copy,
) -> Result<(Matrix, AttnCache), DecoderError> {
    let q = linear_forward(xq, &attn.q);
    let k = linear_forward(xkv, &attn.k);
    let v = linear_forward(xkv, &attn.v);
    let dk = q.cols / heads;
    let mut concat = Matrix::zeros(xq.rows, q.cols);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (oh, ph) = attend(&q.columns(h * dk, dk), &k.columns(h * dk, dk), &v.columns(h * dk, dk), bias)?;
        concat.set_columns(h * dk, &oh);
        probs.push(ph);
    }
    let out = linear_forward(&concat, &attn.o);
    Ok((out, AttnCache { xq: xq.clone(), xkv: xkv.clone(), q, k, v, probs, concat }))
}

/// Returns `(d xq, d xkv)`.
fn mha_backward(
    dout: &Matrix,
    attn: &MultiHeadAttention,
    cache: &AttnCache,
    g: &mut MultiHeadAttention,
) -> (Matrix, Matrix) {
    let heads = cache.probs.len();
    let dk = cache.q.cols / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let dconcat = linear_backward(&cache.concat, &attn.o, dout, &mut g.o);
    let (lq, lk) = (cache.q.rows, cache.k.rows);
    let mut dq = Matrix::zeros(lq, cache.q.cols);
    let mut dkm = Matrix::zeros(lk, cache.k.cols);
    let mut dv = Matrix::zeros(lk, cache.v.cols);
    for (h, p) in cache.probs.iter().enumerate() {
        let doh = dconcat.columns(h * dk, dk);
        let (qh, kh, vh) = (cache.q.columns(h * dk, dk), cache.k.columns(h * dk, dk), cache.v.columns(h * dk, dk));
        let mut dp = Matrix::zeros(lq, lk);
        mm_nt_acc(&doh.data, &vh.data, lq, dk, lk, &mut dp.data);
        let mut dvh = Matrix::zeros(lk, dk);
        mm_tn_acc(&p.data, &doh.data, lq, lk, dk, &mut dvh.data);
        let mut ds = Matrix::zeros(lq, lk);
        for i in 0..lq {
            let (pr, dpr) = (p.row(i), dp.row(i));
            let dot: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
            for (j, s) in ds.row_mut(i).iter_mut().enumerate() {
                *s = pr[j] * (dpr[j] - dot) * scale;
            }
        }
        let mut dqh = Matrix::zeros(lq, dk);
        mm_acc(&ds.data, &kh.data, lq, lk, dk, &mut dqh.data);
        let mut dkh = Matrix::zeros(lk, dk);
        mm_tn_acc(&ds.data, &qh.data, lq, lk, dk, &mut dkh.data);
        dq.add_columns(h * dk, &dqh);
        dkm.add_columns(h * dk, &dkh);
        dv.add_columns(h * dk, &dvh);
    }
    let dxq = linear_backward(&cache.xq, &attn.q, &dq, &mut g.q);
    let mut dxkv = linear_backward(&cache.xkv, &attn.k, &dkm, &mut g.k);
    dxkv.add_assign(&linear_backward(&cache.xkv, &attn.v, &dv, &mut g.v));
    (dxq, dxkv)
}

/// Inverted dropout in place; returns the per-element scale for backward.
fn dropout(x: &mut Matrix, ctx: &mut Option<(f64, &mut ChaCha8Rng)>) -> Option<Vec<f64>> {
    let (p, rng) = ctx.as_mut()?;
    if *p == 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - *p);
    let mask: Vec<f64> = (0..x.data.len()).map(|_| if rng.gen::<f64>() < *p { 0.0 } else { keep }).collect();
    for (v, m) in x.data.iter_mut().zip(&mask) {
        *v *= m;
    }
    Some(mask)
}

fn apply_mask(dx: &Matrix, mask: &Option<Vec<f64>>) -> Matrix {
    match mask {
        None => dx.clone(),
        Some(m) => Matrix::from_vec(dx.rows, dx.cols, dx.data.iter().zip(m).map(|(a, b)| a * b).collect()),
    }
}

struct LayerCache {
    self_attn: AttnCache,
    drop1: Option<Vec<f64>>,
    ln1: LnCache,
    cross_attn: AttnCache,
    drop2: Option<Vec<f64>>,
    ln2: LnCache,
    x2: Matrix,
    pre: Matrix,
    hidden: Matrix,
    drop3: Option<Vec<f64>>,
    ln3: LnCache,
}

pub(crate) struct SampleCache {
    tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    final_x: Matrix,
}

fn check_inputs(model: &DecoderModel, tokens: &[u32], memory: &Matrix, mem_pad: &[bool]) -> Result<(), DecoderError> {
    let cfg = &model.config;
    if tokens.is_empty() {
        return Err(DecoderError::Shape("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_len {
        return Err(DecoderError::TooLong { len: tokens.len(), max_len: cfg.max_len });
    }
    if let Some(&id) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
        return Err(DecoderError::TokenOutOfRange { id, vocab: cfg.vocab });
    }
    if memory.rows == 0 {
        return Err(DecoderError::EmptyMemory);
    }
    if memory.cols != cfg.d_model || mem_pad.len() != memory.rows {
        return Err(DecoderError::Shape(format!(
            "memory {}x{} with {} padding flags, d_model {}",
            memory.rows,
            memory.cols,
            mem_pad.len(),
            cfg.d_model
        )));
    }
    if mem_pad.iter().all(|&p| p) {
        return Err(DecoderError::AllMemoryPadded);
    }
    Ok(())
}

/// Runs one sequence through the stack. `dropout` is `None` in eval mode.
pub(crate) fn forward_sample(
    model: &DecoderModel,
    tokens: &[u32],
    memory: &Matrix,
    mem_pad: &[bool],
    mut dropout_ctx: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<(Matrix, SampleCache), DecoderError> {
    check_inputs(model, tokens, memory, mem_pad)?;
    let cfg = &model.config;
    let d = cfg.d_model;
    let pe = positional_encoding(tokens.len(), d)?;
    let mut x = Matrix::zeros(tokens.len(), d);
    for (i, &t) in tokens.iter().enumerate() {
        let emb = &model.embed[t as usize * d..(t as usize + 1) * d];
        for ((o, e), p) in x.row_mut(i).iter_mut().zip(emb).zip(pe.row(i)) {
            *o = e + p;
        }
    }

    let causal = |i: usize, j: usize| if i >= j { 0.0 } else { f64::NEG_INFINITY };
    let padding = |_: usize, j: usize| if mem_pad[j] { f64::NEG_INFINITY } else { 0.0 };
    let mut caches = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let (mut a, self_c) = mha_forward(&x, &x, &layer.self_attn, cfg.heads, causal)?;
        let drop1 = dropout(&mut a, &mut dropout_ctx);
        a.add_assign(&x);
        let (x1, ln1) = layer_norm_forward(&a, &layer.norm1);

        let (mut c, cross_c) = mha_forward(&x1, memory, &layer.cross_attn, cfg.heads, padding)?;
        let drop2 = dropout(&mut c, &mut dropout_ctx);
        c.add_assign(&x1);
        let (x2, ln2) = layer_norm_forward(&c, &layer.norm2);

        let pre = linear_forward(&x2, &layer.ff1);
        let hidden = Matrix::from_vec(pre.rows, pre.cols, pre.data.iter().map(|&v| v.max(0.0)).collect());
        let mut f = linear_forward(&hidden, &layer.ff2);
        let drop3 = dropout(&mut f, &mut dropout_ctx);
        f.add_assign(&x2);
        let (x3, ln3) = layer_norm_forward(&f, &layer.norm3);

        caches.push(LayerCache {
            self_attn: self_c,
            drop1,
            ln1,
            cross_attn: cross_c,
            drop2,
            ln2,
            x2,
            pre,
            hidden,
            drop3,
            ln3,
        });
        x = x3;
    }
    let logits = linear_forward(&x, &model.head);
    Ok((logits, SampleCache { tokens: tokens.to_vec(), layers: caches, final_x: x }))
}

/// Accumulates parameter gradients into `g` and returns the gradient with
/// respect to the (projected) memory.
pub(crate) fn backward_sample(
    model: &DecoderModel,
    cache: &SampleCache,
    dlogits: &Matrix,
    g: &mut DecoderModel,
) -> Matrix {
    let d = model.config.d_model;
    let mut dx = linear_backward(&cache.final_x, &model.head, dlogits, &mut g.head);
    let mem_rows = cache.layers.first().map_or(0, |c| c.cross_attn.xkv.rows);
    let mut dmem = Matrix::zeros(mem_rows, d);
    for ((layer, lc), gl) in model.layers.iter().zip(&cache.layers).zip(g.layers.iter_mut()).rev() {
        let dh3 = layer_norm_backward(&dx, &layer.norm3, &lc.ln3, &mut gl.norm3);
        let df = apply_mask(&dh3, &lc.drop3);
        let dhidden = linear_backward(&lc.hidden, &layer.ff2, &df, &mut gl.ff2);
        let dpre = Matrix::from_vec(
            dhidden.rows,
            dhidden.cols,
            dhidden.data.iter().zip(&lc.pre.data).map(|(g, &p)| if p > 0.0 { *g } else { 0.0 }).collect(),
        );
        let mut dx2 = linear_backward(&lc.x2, &layer.ff1, &dpre, &mut gl.ff1);
        dx2.add_assign(&dh3);

        let dh2 = layer_norm_backward(&dx2, &layer.norm2, &lc.ln2, &mut gl.norm2);
        let dc = apply_mask(&dh2, &lc.drop2);
        let (mut dx1, dm) = mha_backward(&dc, &layer.cross_attn, &lc.cross_attn, &mut gl.cross_attn);
        dmem.add_assign(&dm);
        dx1.add_assign(&dh2);

        let dh1 = layer_norm_backward(&dx1, &layer.norm1, &lc.ln1, &mut gl.norm1);
        let da = apply_mask(&dh1, &lc.drop1);
        let (mut dxq, dxkv) = mha_backward(&da, &layer.self_attn, &lc.self_attn, &mut gl.self_attn);
        dxq.add_assign(&dxkv);
        dxq.add_assign(&dh1);
        dx = dxq;
    }
    for (i, &t) in cache.tokens.iter().enumerate() {
        let ge = &mut g.embed[t as usize * d..(t as usize + 1) * d];
        for (a, b) in ge.iter_mut().zip(dx.row(i)) {
            *a += b;
        }
    }
    dmem
}

/// Logits for a batch of equal-length token rows over already-projected memory.
pub fn decoder_forward(
    model: &DecoderModel,
    tokens: &[Vec<u32>],
    memory: &[Matrix],
    mem_pad: &[Vec<bool>],
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<Logits, DecoderError> {
    if tokens.len() != memory.len() || tokens.len() != mem_pad.len() {
        return Err(DecoderError::Shape(format!(
            "batch of {} token rows, {} memories, {} padding masks",
            tokens.len(),
            memory.len(),
            mem_pad.len()
        )));
    }
    let len = tokens.first().map_or(0, Vec::len);
    if tokens.iter().any(|t| t.len() != len) {
        return Err(DecoderError::Shape("token rows differ in length".into()));
    }
    let vocab = model.config.vocab;
    let mut data = Vec::with_capacity(tokens.len() * len * vocab);
    for ((t, m), p) in tokens.iter().zip(memory).zip(mem_pad) {
        let ctx = match mode {
            Mode::Train => Some((model.config.dropout, &mut *rng)),
            Mode::Eval => None,
        };
        let (logits, _) = forward_sample(model, t, m, p, ctx)?;
        data.extend_from_slice(&logits.data);
    }
    Ok(Logits { batch: tokens.len(), len, vocab, data })
}

/// Sum of token losses over non-pad targets, their count, and the
/// unnormalized logit gradient `softmax - onehot` (zero rows at padding).
pub(crate) fn sequence_loss(logits: &Matrix, targets: &[u32], pad_id: u32) -> (f64, usize, Matrix) {
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    let mut sum = 0.0;
    let mut count = 0;
    for (i, &t) in targets.iter().enumerate() {
        if t == pad_id {
            continue;
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + z.ln();
        sum += lse - row[t as usize];
        count += 1;
        for (g, v) in grad.row_mut(i).iter_mut().zip(row) {
            *g = (v - lse).exp();
        }
        grad.row_mut(i)[t as usize] -= 1.0;
    }
    (sum, count, grad)
}

/// Mean negative log-likelihood over target positions that are not `pad_id`.
pub fn cross_entropy_loss(logits: &Logits, targets: &[Vec<u32>], pad_id: u32) -> Result<f64, DecoderError> {
    if targets.len() != logits.batch || targets.iter().any(|t| t.len() != logits.len) {
        return Err(DecoderError::Shape("targets do not match logits".into()));
    }
    if let Some(&id) = targets.iter().flatten().find(|&&t| t != pad_id && t as usize >= logits.vocab) {
        return Err(DecoderError::TokenOutOfRange { id, vocab: logits.vocab });
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (b, t) in targets.iter().enumerate() {
        let (s, c, _) = sequence_loss(&logits.sequence(b), t, pad_id);
        sum += s;
        count += c;
    }
    if count == 0 {
        return Err(DecoderError::AllPadTargets);
    }
    Ok(sum / count as f64)
}
