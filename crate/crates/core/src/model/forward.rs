//! Forward passes: incremental decoding, full traces, head masking and
//! partial re-forward from an arbitrary layer.

use crate::error::{Error, Result};
use crate::linalg::{self, add_matvec_cols, dot, gelu, layer_norm, matvec, softmax};

use super::{HeadMask, Model, TokenId};

/// Observation/intervention points inside a forward pass.
///
/// Implementations must be pure functions of their arguments so that hooked
/// passes stay deterministic.
pub trait ForwardHook: Sync {
    /// Sees (and may overwrite) the attention output `a_l` of `layer` at `pos`.
    fn attn_output(&self, _layer: usize, _pos: usize, _a: &mut [f64]) {}

    /// Sees (and may overwrite) the block output `h_l` of `layer` at `pos`.
    fn block_output(&self, _layer: usize, _pos: usize, _h: &mut [f64]) {}
}

/// The identity hook.
pub struct NoHook;

impl ForwardHook for NoHook {}

/// Everything one attention sublayer produces for a single position.
pub(crate) struct AttnStep {
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Per-head outputs before the output projection, `d_head` each.
    pub head_out: Vec<Vec<f64>>,
    /// Per-head contributions after the output projection, `d_model` each.
    pub head_contrib: Vec<Vec<f64>>,
    /// `a_l`, the sum of `head_contrib`.
    pub attn: Vec<f64>,
}

pub(crate) fn embed(model: &Model, token: TokenId, pos: usize) -> Vec<f64> {
    let d = model.config.d_model;
    let t = token as usize;
    model.tok_embed[t * d..(t + 1) * d]
        .iter()
        .zip(&model.pos_embed[pos * d..(pos + 1) * d])
        .map(|(&a, &b)| f64::from(a) + f64::from(b))
        .collect()
}

/// Causal attention for the newest position: `past_k`/`past_v` hold the keys
/// and values of every earlier position at this layer.
pub(crate) fn attention(model: &Model, layer: usize, x: &[f64], past_k: &[Vec<f64>], past_v: &[Vec<f64>]) -> AttnStep {
    let cfg = &model.config;
    let d = cfg.d_model;
    let dh = cfg.d_head();
    let lw = &model.layers[layer];
    let q = matvec(&lw.wq, d, d, x);
    let k = matvec(&lw.wk, d, d, x);
    let v = matvec(&lw.wv, d, d, x);
    let scale = 1.0 / (dh as f64).sqrt();

    let mut head_out = Vec::with_capacity(cfg.n_heads);
    let mut head_contrib = Vec::with_capacity(cfg.n_heads);
    let mut attn = vec![0.0; d];
    let mut scores = Vec::with_capacity(past_k.len() + 1);
    for h in 0..cfg.n_heads {
        let r = h * dh..(h + 1) * dh;
        scores.clear();
        scores.extend(past_k.iter().map(|pk| dot(&q[r.clone()], &pk[r.clone()]) * scale));
        scores.push(dot(&q[r.clone()], &k[r.clone()]) * scale);
        let p = softmax(&scores);
        let mut o = vec![0.0; dh];
        for (j, pj) in p.iter().enumerate() {
            let vj = if j < past_v.len() {
                &past_v[j][r.clone()]
            } else {
                &v[r.clone()]
            };
            for (oi, vi) in o.iter_mut().zip(vj) {
                *oi += pj * vi;
            }
        }
        let mut c = vec![0.0; d];
        add_matvec_cols(&lw.wo, d, h * dh, &o, &mut c);
        for (ai, ci) in attn.iter_mut().zip(&c) {
            *ai += ci;
        }
        head_out.push(o);
        head_contrib.push(c);
    }
    AttnStep {
        k,
        v,
        head_out,
        head_contrib,
        attn,
    }
}

/// Residual add, LN, MLP and the outer LN: returns `h_l` given `h_{l-1}` and `a_l`.
pub(crate) fn finish_block(model: &Model, layer: usize, x: &[f64], a: &[f64]) -> Vec<f64> {
    let cfg = &model.config;
    let lw = &model.layers[layer];
    let sum: Vec<f64> = x.iter().zip(a).map(|(p, q)| p + q).collect();
    let z = layer_norm(&sum, &lw.ln1_g, &lw.ln1_b);
    let mut hidden = matvec(&lw.w1, cfg.d_mlp, cfg.d_model, &z);
    for (hv, &b) in hidden.iter_mut().zip(&lw.b1) {
        *hv = gelu(*hv + f64::from(b));
    }
    let mlp = matvec(&lw.w2, cfg.d_model, cfg.d_mlp, &hidden);
    let out: Vec<f64> = mlp
        .iter()
        .zip(&lw.b2)
        .zip(&z)
        .map(|((m, &b), zi)| m + f64::from(b) + zi)
        .collect();
    layer_norm(&out, &lw.ln2_g, &lw.ln2_b)
}

pub(crate) fn unembed(model: &Model, h: &[f64]) -> Vec<f64> {
    let v = model.config.vocab_size;
    let mut logits = vec![0.0; v];
    for (i, &hi) in h.iter().enumerate() {
        let row = &model.unembed[i * v..(i + 1) * v];
        for (l, &u) in logits.iter_mut().zip(row) {
            *l += hi * f64::from(u);
        }
    }
    logits
}

/// Per-position, per-layer record of a teacher-forced pass.
#[derive(Debug, Clone)]
pub struct LayerRecord {
    pub resid_in: Vec<f64>,
    pub head_out: Vec<Vec<f64>>,
    pub head_contrib: Vec<Vec<f64>>,
    pub attn_out: Vec<f64>,
    pub block_out: Vec<f64>,
}

/// Full record of one forward pass over a fixed token sequence.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    tokens: Vec<TokenId>,
    /// `records[pos][layer]`
    records: Vec<Vec<LayerRecord>>,
    /// `keys[layer][pos]`, all heads concatenated
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
    logits: Vec<Vec<f64>>,
    probs: Vec<Vec<f64>>,
    model_hash: u64,
}

impl ForwardTrace {
    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn record(&self, pos: usize, layer: usize) -> &LayerRecord {
        &self.records[pos][layer]
    }

    /// `h_{l-1}` at `pos` (the embedding when `layer == 0`).
    pub fn resid_in(&self, pos: usize, layer: usize) -> &[f64] {
        &self.records[pos][layer].resid_in
    }

    pub fn attn_out(&self, pos: usize, layer: usize) -> &[f64] {
        &self.records[pos][layer].attn_out
    }

    pub fn head_out(&self, pos: usize, layer: usize, head: usize) -> &[f64] {
        &self.records[pos][layer].head_out[head]
    }

    pub fn head_contrib(&self, pos: usize, layer: usize, head: usize) -> &[f64] {
        &self.records[pos][layer].head_contrib[head]
    }

    pub fn block_out(&self, pos: usize, layer: usize) -> &[f64] {
        &self.records[pos][layer].block_out
    }

    pub fn logits(&self, pos: usize) -> &[f64] {
        &self.logits[pos]
    }

    pub fn probs(&self, pos: usize) -> &[f64] {
        &self.probs[pos]
    }
}

/// Cheap fingerprint tying a trace to the model that produced it.
fn model_fingerprint(model: &Model) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    model.config.n_layers.hash(&mut h);
    model.config.d_model.hash(&mut h);
    model.config.vocab_size.hash(&mut h);
    for w in model.unembed.iter().step_by(7).chain(model.tok_embed.iter().step_by(7)) {
        w.to_bits().hash(&mut h);
    }
    for lw in &model.layers {
        for w in lw.wo.iter().chain(&lw.wv).chain(&lw.w2).step_by(13) {
            w.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

/// Incremental decoder with a key/value cache.
#[derive(Clone)]
pub struct DecodeState<'m> {
    model: &'m Model,
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
    len: usize,
}

impl<'m> DecodeState<'m> {
    pub fn new(model: &'m Model) -> Self {
        let l = model.config.n_layers;
        DecodeState {
            model,
            keys: vec![Vec::new(); l],
            values: vec![Vec::new(); l],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn check_token(&self, token: TokenId) -> Result<()> {
        let cfg = &self.model.config;
        if token as usize >= cfg.vocab_size {
            return Err(Error::Input(format!(
                "token id {token} out of range for vocabulary of {}",
                cfg.vocab_size
            )));
        }
        if self.len >= cfg.max_seq_len {
            return Err(Error::Capacity {
                len: self.len + 1,
                max: cfg.max_seq_len,
            });
        }
        Ok(())
    }

    /// Feeds one token and returns the next-token logits.
    pub fn step(&mut self, token: TokenId, hook: &dyn ForwardHook) -> Result<Vec<f64>> {
        self.check_token(token)?;
        let pos = self.len;
        let mut x = embed(self.model, token, pos);
        for l in 0..self.model.config.n_layers {
            let mut st = attention(self.model, l, &x, &self.keys[l], &self.values[l]);
            hook.attn_output(l, pos, &mut st.attn);
            let mut h = finish_block(self.model, l, &x, &st.attn);
            hook.block_output(l, pos, &mut h);
            self.keys[l].push(st.k);
            self.values[l].push(st.v);
            x = h;
        }
        self.len += 1;
        Ok(unembed(self.model, &x))
    }

    /// Feeds one token and returns the full per-layer record plus logits.
    fn step_recorded(&mut self, token: TokenId, hook: &dyn ForwardHook) -> Result<(Vec<LayerRecord>, Vec<f64>)> {
        self.check_token(token)?;
        let pos = self.len;
        let mut x = embed(self.model, token, pos);
        let mut recs = Vec::with_capacity(self.model.config.n_layers);
        for l in 0..self.model.config.n_layers {
            let mut st = attention(self.model, l, &x, &self.keys[l], &self.values[l]);
            hook.attn_output(l, pos, &mut st.attn);
            let mut h = finish_block(self.model, l, &x, &st.attn);
            hook.block_output(l, pos, &mut h);
            self.keys[l].push(st.k);
            self.values[l].push(st.v);
            recs.push(LayerRecord {
                resid_in: std::mem::replace(&mut x, h.clone()),
                head_out: st.head_out,
                head_contrib: st.head_contrib,
                attn_out: st.attn,
                block_out: h,
            });
        }
        self.len += 1;
        Ok((recs, unembed(self.model, &x)))
    }
}

/// Teacher-forced forward over `tokens` with the identity hook.
pub fn forward_full(model: &Model, tokens: &[TokenId]) -> Result<ForwardTrace> {
    forward_with_hook(model, tokens, &NoHook)
}

/// Teacher-forced forward with interventions supplied by `hook`.
pub fn forward_with_hook(model: &Model, tokens: &[TokenId], hook: &dyn ForwardHook) -> Result<ForwardTrace> {
    let cfg = &model.config;
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::Capacity {
            len: tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    let mut st = DecodeState::new(model);
    let mut records = Vec::with_capacity(tokens.len());
    let mut logits = Vec::with_capacity(tokens.len());
    let mut probs = Vec::with_capacity(tokens.len());
    for &t in tokens {
        let (rec, lg) = st.step_recorded(t, hook)?;
        probs.push(softmax(&lg));
        logits.push(lg);
        records.push(rec);
    }
    Ok(ForwardTrace {
        tokens: tokens.to_vec(),
        records,
        keys: st.keys,
        values: st.values,
        logits,
        probs,
        model_hash: model_fingerprint(model),
    })
}

/// Next-token distribution at `position` when the attention output of `layer`
/// there is replaced by `a_override`: resumes the block at `layer` and runs
/// the remaining blocks for that position against the trace's cached context.
pub fn logits_from(
    model: &Model,
    trace: &ForwardTrace,
    layer: usize,
    a_override: &[f64],
    position: usize,
) -> Result<Vec<f64>> {
    let cfg = &model.config;
    if trace.model_hash != model_fingerprint(model) || trace.n_layers() != cfg.n_layers {
        return Err(Error::Input("trace was not produced by this model".into()));
    }
    if layer >= cfg.n_layers {
        return Err(Error::Input(format!("layer {layer} out of range")));
    }
    if position >= trace.len() {
        return Err(Error::Input(format!(
            "position {position} out of range for trace of length {}",
            trace.len()
        )));
    }
    if a_override.len() != cfg.d_model {
        return Err(Error::Input(format!(
            "override has length {}, expected d_model {}",
            a_override.len(),
            cfg.d_model
        )));
    }
    let mut h = finish_block(model, layer, trace.resid_in(position, layer), a_override);
    for l in layer + 1..cfg.n_layers {
        let st = attention(model, l, &h, &trace.keys[l][..position], &trace.values[l][..position]);
        h = finish_block(model, l, &h, &st.attn);
    }
    Ok(softmax(&unembed(model, &h)))
}

/// `a_l ⊙ M^h`: the stored attention output with head `mask.head`'s
/// post-projection contribution removed.
pub fn apply_head_mask(trace: &ForwardTrace, mask: HeadMask, position: usize) -> Result<Vec<f64>> {
    if position >= trace.len() {
        return Err(Error::Input(format!("position {position} out of range")));
    }
    if mask.layer >= trace.n_layers() {
        return Err(Error::Input(format!("layer {} out of range", mask.layer)));
    }
    let rec = trace.record(position, mask.layer);
    if mask.head >= rec.head_contrib.len() {
        return Err(Error::Input(format!("head {} out of range", mask.head)));
    }
    Ok(rec
        .attn_out
        .iter()
        .zip(&rec.head_contrib[mask.head])
        .map(|(a, c)| a - c)
        .collect())
}

/// The same quantity as [`apply_head_mask`], computed by zeroing the head's
/// pre-projection output and re-applying the shared output projection.
pub fn reproject_without_head(
    model: &Model,
    trace: &ForwardTrace,
    mask: HeadMask,
    position: usize,
) -> Result<Vec<f64>> {
    mask.check(model.config())?;
    if position >= trace.len() {
        return Err(Error::Input(format!("position {position} out of range")));
    }
    let cfg = model.config();
    let d = cfg.d_model;
    let dh = cfg.d_head();
    let mut concat = Vec::with_capacity(d);
    for h in 0..cfg.n_heads {
        if h == mask.head {
            concat.extend(std::iter::repeat_n(0.0, dh));
        } else {
            concat.extend_from_slice(trace.head_out(position, mask.layer, h));
        }
    }
    Ok(linalg::matvec(&model.layer(mask.layer).wo, d, d, &concat))
}
