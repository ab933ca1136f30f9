//! Seeded initialization and planted-circuit synthesis.
//!
//! A planted model is a small-noise random transformer with hand-wired
//! circuits written on top of an orthonormal feature basis that lives in the
//! zero-mean subspace of the residual stream (so LayerNorm acts as a pure
//! rescaling on it):
//!
//! * task layers: a region head (first task layer) marks positions after
//!   `<sep>`; copy, anti-repeat and probe heads (last task layer) turn the
//!   scene segment into caption logits and yes/no evidence; the final MLP
//!   holds one gate neuron per object that fires `yes` when a probe token and
//!   the matching object's output feature are both present.
//! * hallucination layers: one head per layer attends to the trigger token
//!   and writes `strength` times the unit unembedding direction of the
//!   spurious token.
//!
//! Attention scores and write sizes are calibrated against activations of
//! the partially built model, layer by layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, orthogonalize};

use super::forward::{forward_with_hook, ForwardHook};
use super::vocab::{self, WorldLayout};
use super::{forward_full, LayerWeights, Model, ModelConfig, PlantedSpec, TokenId};

/// Tunable constants of the planted world. Scores are pre-softmax attention
/// logits; writes are residual-stream coefficients before the next LayerNorm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircuitGains {
    pub weight_noise: f64,
    pub embed_noise: f64,
    pub embed_identity: f64,
    pub embed_kind: f64,
    pub embed_flag: f64,
    pub embed_bias: f64,
    pub score_match: f64,
    pub score_sink: f64,
    /// Anti-repeat attention to mentioned objects sits this far below its sink.
    pub anti_gap: f64,
    pub region_write: f64,
    pub copy_write: f64,
    pub anti_write: f64,
    pub probe_write: f64,
    pub gate_gain: f64,
    pub gate_threshold: f64,
    pub gate_write: f64,
    pub unembed_object: f64,
    pub unembed_period: f64,
    pub unembed_eos: f64,
    pub unembed_yes: f64,
    pub unembed_no: f64,
    pub unembed_noise: f64,
}

impl Default for CircuitGains {
    fn default() -> Self {
        CircuitGains {
            weight_noise: 0.01,
            embed_noise: 0.02,
            embed_identity: 5.0,
            embed_kind: 4.0,
            embed_flag: 6.0,
            embed_bias: 4.0,
            score_match: 14.0,
            score_sink: 7.0,
            anti_gap: 0.5,
            region_write: 4.0,
            copy_write: 6.0,
            anti_write: 45.0,
            probe_write: 4.0,
            gate_gain: 2.0,
            gate_threshold: 5.5,
            gate_write: 4.0,
            unembed_object: 2.4,
            unembed_period: 3.0,
            unembed_eos: 0.45,
            unembed_yes: 2.5,
            unembed_no: 1.6,
            unembed_noise: 0.02,
        }
    }
}

fn normal(rng: &mut ChaCha8Rng, std: f64, n: usize) -> Vec<f32> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng) as f32).collect()
}

/// A generic seeded random transformer (no world layout required).
///
/// Matrices use `1/sqrt(fan_in)` scaling so attention patterns and MLPs are
/// far from degenerate.
pub fn random_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let m = config.d_mlp;
    let sd = 1.0 / (d as f64).sqrt();
    let sm = 1.0 / (m as f64).sqrt();
    let tok = normal(&mut rng, 1.0, config.vocab_size * d);
    let pos = normal(&mut rng, 0.3, config.max_seq_len * d);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let mut lw = LayerWeights::zeros(config);
        lw.wq = normal(&mut rng, sd, d * d);
        lw.wk = normal(&mut rng, sd, d * d);
        lw.wv = normal(&mut rng, sd, d * d);
        lw.wo = normal(&mut rng, sd, d * d);
        lw.w1 = normal(&mut rng, sd, m * d);
        lw.b1 = normal(&mut rng, 0.1, m);
        lw.w2 = normal(&mut rng, sm, d * m);
        lw.b2 = normal(&mut rng, 0.1, d);
        for g in lw.ln1_g.iter_mut().chain(lw.ln2_g.iter_mut()) {
            *g = 1.0 + normal(&mut rng, 0.1, 1)[0];
        }
        lw.ln1_b = normal(&mut rng, 0.1, d);
        lw.ln2_b = normal(&mut rng, 0.1, d);
        layers.push(lw);
    }
    let unembed = normal(&mut rng, sd, d * config.vocab_size);
    Model::from_parts(*config, tok, pos, layers, unembed, None)
}

/// Orthonormal feature directions, all orthogonal to the all-ones vector.
struct Features {
    id: Vec<Vec<f64>>,
    pid: Vec<Vec<f64>>,
    oid: Vec<Vec<f64>>,
    flag: Vec<Vec<f64>>,
    obj: Vec<f64>,
    probe: Vec<f64>,
    one: Vec<f64>,
    resp: Vec<f64>,
    resp_obj: Vec<f64>,
    yes_out: Vec<f64>,
}

impl Features {
    fn required(n_objects: usize) -> usize {
        3 * n_objects + vocab::N_STRUCTURAL + 6
    }

    fn new(d: usize, n_objects: usize, rng: &mut ChaCha8Rng) -> Self {
        let ones = vec![1.0 / (d as f64).sqrt(); d];
        let mut basis: Vec<Vec<f64>> = vec![ones];
        let dist = Normal::new(0.0, 1.0).expect("unit normal");
        while basis.len() < Self::required(n_objects) + 1 {
            let g: Vec<f64> = (0..d).map(|_| dist.sample(rng)).collect();
            let r = orthogonalize(&g, &basis);
            let n = norm(&r);
            if n > 1e-6 {
                basis.push(r.iter().map(|x| x / n).collect());
            }
        }
        let mut it = basis.into_iter().skip(1);
        let mut take = |k: usize| -> Vec<Vec<f64>> { (0..k).map(|_| it.next().expect("basis size")).collect() };
        let id = take(n_objects);
        let pid = take(n_objects);
        let oid = take(n_objects);
        let flag = take(vocab::N_STRUCTURAL);
        let mut rest = take(6);
        let resp_obj = rest.pop().unwrap();
        let yes_out = rest.pop().unwrap();
        let resp = rest.pop().unwrap();
        let one = rest.pop().unwrap();
        let probe = rest.pop().unwrap();
        let obj = rest.pop().unwrap();
        Features {
            id,
            pid,
            oid,
            flag,
            obj,
            probe,
            one,
            resp,
            resp_obj,
            yes_out,
        }
    }
}

fn add_row(mat: &mut [f32], cols: usize, row: usize, f: &[f64], scale: f64) {
    for (w, x) in mat[row * cols..(row + 1) * cols].iter_mut().zip(f) {
        *w += (scale * x) as f32;
    }
}

fn add_col(mat: &mut [f32], cols: usize, col: usize, f: &[f64], scale: f64) {
    for (i, x) in f.iter().enumerate() {
        mat[i * cols + col] += (scale * x) as f32;
    }
}

fn zero_head(lw: &mut LayerWeights, d: usize, dh: usize, head: usize) {
    for r in head * dh..(head + 1) * dh {
        for c in 0..d {
            lw.wq[r * d + c] = 0.0;
            lw.wk[r * d + c] = 0.0;
            lw.wv[r * d + c] = 0.0;
            lw.wo[c * d + r] = 0.0;
        }
    }
}

struct Builder {
    config: ModelConfig,
    gains: CircuitGains,
    layout: WorldLayout,
    f: Features,
    tok: Vec<f32>,
    pos: Vec<f32>,
    layers: Vec<LayerWeights>,
    unembed: Vec<f32>,
    /// Objects used by the reference prompts (never the trigger or spurious token).
    refs: [usize; 3],
}

impl Builder {
    fn model(&self) -> Model {
        Model::from_parts(
            self.config,
            self.tok.clone(),
            self.pos.clone(),
            self.layers.clone(),
            self.unembed.clone(),
            None,
        )
        .expect("builder keeps shapes consistent")
    }

    /// Coefficients of `feats` in `h_{layer-1}` at `pos` of `tokens`.
    fn measure(&self, tokens: &[TokenId], layer: usize, pos: usize, feats: &[&[f64]]) -> Vec<f64> {
        let t = forward_full(&self.model(), tokens).expect("reference prompt fits");
        let h = t.resid_in(pos, layer);
        feats.iter().map(|f| dot(h, f)).collect()
    }

    fn d(&self) -> usize {
        self.config.d_model
    }

    fn dh(&self) -> usize {
        self.config.d_head()
    }

    /// Score scale that turns `q_coef * k_coef` into `target`.
    fn qk_scale(&self, q_coef: f64, k_coef: f64, target: f64) -> f64 {
        let denom = (q_coef * k_coef).abs().max(1e-3);
        target * (self.dh() as f64).sqrt() / denom
    }

    /// Reference caption context: scene {o0, o1, o2}, response "o0 . o1".
    fn caption_ref(&self) -> Vec<TokenId> {
        let w = &self.layout;
        vec![
            vocab::BOS,
            w.object(self.refs[0]),
            w.object(self.refs[1]),
            w.object(self.refs[2]),
            vocab::SEP,
            w.object(self.refs[0]),
            vocab::PERIOD,
            w.object(self.refs[1]),
        ]
    }

    fn probe_ref(&self) -> Vec<TokenId> {
        let w = &self.layout;
        vec![
            vocab::BOS,
            w.object(self.refs[0]),
            w.object(self.refs[1]),
            vocab::SEP,
            w.probe(self.refs[0]),
        ]
    }

    /// Every sequence starts with `<bos>`, so its residual at `layer` is the
    /// same in every context. Folding its value into the `<bos>` flag makes
    /// the head write exactly nothing when it rests on the sink.
    fn cancel_sink_value(&mut self, layer: usize, head: usize) {
        let (d, dh) = (self.d(), self.dh());
        let t = forward_full(&self.model(), &[vocab::BOS]).expect("single token fits");
        let h = t.resid_in(0, layer).to_vec();
        let bos = self.f.flag[vocab::BOS as usize].clone();
        let c_bos = dot(&h, &bos);
        let lw = &mut self.layers[layer];
        for r in head * dh..(head + 1) * dh {
            let v: f64 = lw.wv[r * d..(r + 1) * d]
                .iter()
                .zip(&h)
                .map(|(&w, x)| f64::from(w) * x)
                .sum();
            add_row(&mut lw.wv, d, r, &bos, -v / c_bos);
        }
    }

    fn wire_region(&mut self, layer: usize, head: usize) {
        let g = self.gains;
        let (d, dh) = (self.d(), self.dh());
        let cap = self.caption_ref();
        let c = self.measure(&cap, layer, 4, &[&self.f.one, &self.f.flag[vocab::SEP as usize]]);
        let (c_one, c_sep) = (c[0], c[1]);
        let c_bos = self.measure(&cap, layer, 0, &[&self.f.flag[vocab::BOS as usize]])[0];
        let e0 = head * dh;
        let lw = &mut self.layers[layer];
        zero_head(lw, d, dh, head);
        add_row(&mut lw.wq, d, e0, &self.f.one, 1.0);
        let s_sep = g.score_match * (dh as f64).sqrt() / (c_one * c_sep);
        let s_bos = g.score_sink * (dh as f64).sqrt() / (c_one * c_bos);
        add_row(&mut lw.wk, d, e0, &self.f.flag[vocab::SEP as usize], s_sep);
        add_row(&mut lw.wk, d, e0, &self.f.flag[vocab::BOS as usize], s_bos);
        add_row(&mut lw.wv, d, e0, &self.f.flag[vocab::SEP as usize], 1.0 / c_sep);
        add_col(&mut lw.wo, d, e0, &self.f.resp, g.region_write);
        self.cancel_sink_value(layer, head);
    }

    /// MLP neuron pair at the region layer that marks objects inside the
    /// response. The pair forms a clipped ramp so the mark has a fixed size.
    /// `layer + 1` must exist: the block output stands in for the MLP input.
    fn wire_response_object(&mut self, layer: usize, neurons: [usize; 2]) {
        let g = self.gains;
        let (d, m) = (self.d(), self.config.d_mlp);
        let cap = self.caption_ref();
        let sum = |c: Vec<f64>| c[0] + c[1];
        let feats: [&[f64]; 2] = [&self.f.obj, &self.f.resp];
        let scene = sum(self.measure(&cap, layer + 1, 2, &feats));
        let resp_obj = sum(self.measure(&cap, layer + 1, 5, &feats));
        let resp_period = sum(self.measure(&cap, layer + 1, 6, &feats));
        let sep = sum(self.measure(&cap, layer + 1, 4, &feats));
        let below = scene.max(resp_period).max(sep);
        let mid = 0.5 * (below + resp_obj);
        let gain = 4.0 / (resp_obj - mid).max(1e-3);
        let lw = &mut self.layers[layer];
        for (i, &nr) in neurons.iter().enumerate() {
            for c in 0..d {
                lw.w1[nr * d + c] = 0.0;
                lw.w2[c * m + nr] = 0.0;
            }
            add_row(&mut lw.w1, d, nr, &self.f.obj, gain);
            add_row(&mut lw.w1, d, nr, &self.f.resp, gain);
            let shift = if i == 0 { 2.0 } else { -2.0 };
            lw.b1[nr] = (-gain * mid + shift) as f32;
            let sign = if i == 0 { 1.0 } else { -1.0 };
            add_col(&mut lw.w2, m, nr, &self.f.resp_obj, sign * g.region_write / 4.0);
        }
    }

    fn wire_readout(&mut self, layer: usize, heads: [usize; 3]) {
        let g = self.gains;
        let (d, dh) = (self.d(), self.dh());
        let n = self.layout.n_objects;
        let cap = self.caption_ref();
        let prb = self.probe_ref();
        let bos = self.f.flag[vocab::BOS as usize].clone();
        // coefficients at a response position (query side) and the scene / response objects (key side)
        let q = self.measure(&cap, layer, 6, &[&self.f.one, &self.f.resp]);
        let scene = self.measure(
            &cap,
            layer,
            2,
            &[&self.f.one, &self.f.obj, &self.f.resp, &self.f.id[self.refs[1]]],
        );
        let resp_obj = self.measure(
            &cap,
            layer,
            5,
            &[&self.f.one, &self.f.obj, &self.f.resp, &self.f.resp_obj],
        );
        let c_bos = self.measure(&cap, layer, 0, &[&bos])[0];
        let pq = self.measure(
            &prb,
            layer,
            4,
            &[&self.f.one, &self.f.pid[self.refs[0]], &self.f.probe, &self.f.resp],
        );
        let (q_one, q_resp) = (q[0], q[1]);
        let c_id = scene[3];

        // copy: response positions attend to scene objects, probes are excluded
        {
            let h = heads[0];
            let lw = &mut self.layers[layer];
            zero_head(lw, d, dh, h);
            let e0 = h * dh;
            let e1 = e0 + 1;
            let k_scene = scene[1];
            add_row(&mut lw.wq, d, e0, &self.f.resp, 1.0);
            // the probe flag cancels the response flag at probe positions
            add_row(&mut lw.wq, d, e0, &self.f.probe, -pq[3] / pq[2].max(1e-3));
            let s = g.score_match * (dh as f64).sqrt() / (q_resp * k_scene);
            add_row(&mut lw.wk, d, e0, &self.f.obj, s);
            add_row(&mut lw.wk, d, e0, &self.f.resp_obj, -s * resp_obj[1] / resp_obj[3]);
            add_row(&mut lw.wq, d, e1, &self.f.one, 1.0);
            add_row(
                &mut lw.wk,
                d,
                e1,
                &bos,
                g.score_sink * (dh as f64).sqrt() / (q_one * c_bos),
            );
            for k in 0..n {
                let r = e0 + k;
                add_row(&mut lw.wv, d, r, &self.f.id[k], 1.0 / c_id);
                add_col(&mut lw.wo, d, r, &self.f.oid[k], g.copy_write);
            }
        }
        // anti-repeat: response positions attend to earlier response objects
        {
            let h = heads[1];
            let lw = &mut self.layers[layer];
            zero_head(lw, d, dh, h);
            let e0 = h * dh;
            let e1 = e0 + 1;
            let sink = g.score_sink + 8.0;
            let s = (sink - g.anti_gap) * (dh as f64).sqrt() / (q_resp * resp_obj[3]);
            add_row(&mut lw.wq, d, e0, &self.f.resp, 1.0);
            add_row(&mut lw.wk, d, e0, &self.f.resp_obj, s);
            add_row(&mut lw.wq, d, e1, &self.f.one, 1.0);
            add_row(&mut lw.wk, d, e1, &bos, sink * (dh as f64).sqrt() / (q_one * c_bos));
            for k in 0..n {
                let r = e0 + k;
                add_row(&mut lw.wv, d, r, &self.f.id[k], 1.0 / c_id);
                add_col(&mut lw.wo, d, r, &self.f.oid[k], -g.anti_write);
            }
        }
        // probe: "is X?" attends to X in the scene and copies its output feature
        {
            let h = heads[2];
            let lw = &mut self.layers[layer];
            zero_head(lw, d, dh, h);
            let e0 = h * dh;
            let sink = e0 + dh - 1;
            let s = g.score_match * (dh as f64).sqrt() / (pq[1] * c_id);
            for k in 0..n {
                add_row(&mut lw.wq, d, e0 + k, &self.f.pid[k], 1.0);
                add_row(&mut lw.wk, d, e0 + k, &self.f.id[k], s);
                add_row(&mut lw.wv, d, e0 + k, &self.f.id[k], 1.0 / c_id);
                add_col(&mut lw.wo, d, e0 + k, &self.f.oid[k], g.probe_write);
            }
            add_row(&mut lw.wq, d, sink, &self.f.one, 1.0);
            add_row(
                &mut lw.wk,
                d,
                sink,
                &bos,
                g.score_sink * (dh as f64).sqrt() / (pq[0] * c_bos),
            );
        }
        for h in heads {
            self.cancel_sink_value(layer, h);
        }
    }

    /// One gate neuron per object in the MLP of `layer`: probe feature plus
    /// matching output feature drives `yes`.
    fn wire_gate(&mut self, layer: usize) {
        let g = self.gains;
        let d = self.d();
        let n = self.layout.n_objects;
        let m = self.config.d_mlp;
        let lw = &mut self.layers[layer];
        for k in 0..n {
            for c in 0..d {
                lw.w1[k * d + c] = 0.0;
                lw.w2[c * m + k] = 0.0;
            }
            add_row(&mut lw.w1, d, k, &self.f.pid[k], g.gate_gain);
            add_row(&mut lw.w1, d, k, &self.f.oid[k], g.gate_gain);
            lw.b1[k] = (-g.gate_gain * g.gate_threshold) as f32;
            add_col(&mut lw.w2, m, k, &self.f.yes_out, g.gate_write);
        }
    }

    fn wire_planted(&mut self, layer: usize, head: usize, spec: &PlantedSpec) {
        let (d, dh) = (self.d(), self.dh());
        let trig = spec.trigger_token;
        let probe = [vocab::BOS, trig, vocab::SEP];
        let t_embed: Vec<f64> = {
            let t = trig as usize;
            self.tok[t * d..(t + 1) * d].iter().map(|&x| f64::from(x)).collect()
        };
        // trigger direction: its embedding without the shared components
        let mut trig_dir = orthogonalize(&t_embed, &[self.f.one.clone(), self.f.obj.clone()]);
        let nt = norm(&trig_dir);
        trig_dir.iter_mut().for_each(|x| *x /= nt);
        let bos = self.f.flag[vocab::BOS as usize].clone();
        let c = self.measure(&probe, layer, 1, &[&self.f.one, &trig_dir]);
        let c_bos = self.measure(&probe, layer, 0, &[&bos])[0];
        let (c_one, c_trig) = (c[0], c[1]);
        let u = {
            let col = self.model().unembed_column(spec.spurious_token);
            let n = norm(&col);
            col.into_iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let g = self.gains;
        let s_trig = self.qk_scale(c_one, c_trig, g.score_match);
        let s_bos = self.qk_scale(c_one, c_bos, g.score_sink);
        let lw = &mut self.layers[layer];
        zero_head(lw, d, dh, head);
        let e0 = head * dh;
        add_row(&mut lw.wq, d, e0, &self.f.one, 1.0);
        add_row(&mut lw.wk, d, e0, &trig_dir, s_trig);
        add_row(&mut lw.wk, d, e0, &bos, s_bos);
        add_row(&mut lw.wv, d, e0, &trig_dir, 1.0 / c_trig);
        add_col(&mut lw.wo, d, e0, &u, spec.strength);
        self.cancel_sink_value(layer, head);
    }
}

/// Zeroes the attention output at every position of the listed layers.
struct ZeroAttention<'a>(&'a [usize]);

impl ForwardHook for ZeroAttention<'_> {
    fn attn_output(&self, layer: usize, _pos: usize, a: &mut [f64]) {
        if self.0.contains(&layer) {
            a.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// Logit drop of the spurious token at the trigger position of `[<bos>, trigger]`
/// when the attention outputs of `layers` are zeroed.
pub fn spurious_logit_drop(model: &Model, spec: &PlantedSpec, layers: &[usize]) -> Result<f64> {
    let toks = [vocab::BOS, spec.trigger_token];
    let s = spec.spurious_token as usize;
    let base = forward_full(model, &toks)?;
    let ablated = forward_with_hook(model, &toks, &ZeroAttention(layers))?;
    Ok(base.logits(1)[s] - ablated.logits(1)[s])
}

/// Builds the planted model for `(config, spec, seed)`.
///
/// With `strength == 0` no hallucination wiring is written and the weights are
/// identical to the task-only model for the same seed.
pub fn build_planted(config: &ModelConfig, spec: &PlantedSpec, seed: u64) -> Result<Model> {
    build_planted_with_gains(config, spec, seed, &CircuitGains::default())
}

pub fn build_planted_with_gains(
    config: &ModelConfig,
    spec: &PlantedSpec,
    seed: u64,
    gains: &CircuitGains,
) -> Result<Model> {
    config.validate()?;
    spec.validate(config)?;
    let layout = WorldLayout::for_vocab(config.vocab_size)?;
    let d = config.d_model;
    let n = layout.n_objects;
    if d - 1 < Features::required(n) {
        return Err(Error::Config(format!(
            "d_model {d} too small for {n} objects (needs > {})",
            Features::required(n)
        )));
    }
    let mut task = spec.task_layers.clone();
    task.sort_unstable();
    task.dedup();
    if !task.is_empty() {
        if task.len() < 2 {
            return Err(Error::Config("task circuits need at least two task layers".into()));
        }
        if config.n_heads < 3 || config.d_head() < n + 1 || config.d_mlp < n {
            return Err(Error::Config(
                "task circuits need n_heads >= 3, d_head > n_objects and d_mlp >= n_objects".into(),
            ));
        }
    }

    // base noise and feature basis come from the seed alone
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = Features::new(d, n, &mut rng);
    let g = *gains;
    let mut tok = normal(&mut rng, g.embed_noise, config.vocab_size * d);
    let pos = normal(&mut rng, g.embed_noise, config.max_seq_len * d);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let mut lw = LayerWeights::zeros(config);
        lw.wq = normal(&mut rng, g.weight_noise, d * d);
        lw.wk = normal(&mut rng, g.weight_noise, d * d);
        lw.wv = normal(&mut rng, g.weight_noise, d * d);
        lw.wo = normal(&mut rng, g.weight_noise, d * d);
        lw.w1 = normal(&mut rng, g.weight_noise, config.d_mlp * d);
        lw.w2 = normal(&mut rng, g.weight_noise, d * config.d_mlp);
        layers.push(lw);
    }
    let mut unembed = normal(&mut rng, g.unembed_noise, d * config.vocab_size);
    let mut head_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);

    // embeddings
    let v = config.vocab_size;
    for t in 0..v as TokenId {
        let ti = t as usize;
        let row = &mut tok[ti * d..(ti + 1) * d];
        let mut add = |f: &[f64], s: f64| {
            for (w, x) in row.iter_mut().zip(f) {
                *w += (s * x) as f32;
            }
        };
        add(&f.one, g.embed_bias);
        if let Some(k) = layout.object_index(t) {
            add(&f.id[k], g.embed_identity);
            add(&f.obj, g.embed_kind);
        } else if let Some(k) = layout.probe_index(t) {
            add(&f.pid[k], g.embed_identity);
            add(&f.probe, g.embed_kind);
        } else {
            add(&f.flag[ti], g.embed_flag);
        }
    }
    // unembedding columns
    {
        let mut col = |t: TokenId, f: &[f64], s: f64| {
            for (i, x) in f.iter().enumerate() {
                unembed[i * v + t as usize] += (s * x) as f32;
            }
        };
        for k in 0..n {
            col(layout.object(k), &f.oid[k], g.unembed_object);
        }
        col(vocab::PERIOD, &f.obj, g.unembed_period);
        col(vocab::EOS, &f.resp, g.unembed_eos);
        col(vocab::YES, &f.yes_out, g.unembed_yes);
        col(vocab::NO, &f.probe, g.unembed_no);
    }

    let mut refs = [0usize; 3];
    let mut free = (0..n).filter(|&k| {
        let t = layout.object(k);
        t != spec.trigger_token && t != spec.spurious_token
    });
    for r in &mut refs {
        *r = free.next().ok_or_else(|| {
            Error::Config("task circuits need at least 3 objects besides trigger and spurious".into())
        })?;
    }
    let mut b = Builder {
        refs,
        config: *config,
        gains: g,
        layout,
        f,
        tok,
        pos,
        layers,
        unembed,
    };
    let wire_hall = spec.strength > 0.0 && !spec.hallucination_layers.is_empty();
    for l in 0..config.n_layers {
        if !task.is_empty() && l == task[0] {
            b.wire_region(l, 0);
            b.wire_response_object(l, [0, 1]);
        }
        if !task.is_empty() && l == *task.last().unwrap() {
            b.wire_readout(l, [0, 1, 2]);
        }
        if wire_hall && spec.hallucination_layers.contains(&l) {
            let head = head_rng.random_range(0..config.n_heads);
            b.wire_planted(l, head, spec);
        }
    }
    if !task.is_empty() {
        b.wire_gate(config.n_layers - 1);
    }

    let model = Model::from_parts(b.config, b.tok, b.pos, b.layers, b.unembed, Some(spec.clone()))?;
    if wire_hall {
        let need = spec.strength / 2.0;
        for &l in &spec.hallucination_layers {
            let drop = spurious_logit_drop(&model, spec, &[l])?;
            if drop.is_nan() || drop < need {
                return Err(Error::Construction(format!(
                    "zeroing layer {l} lowers the spurious logit by {drop:.3} < {need:.3} (seed {seed})"
                )));
            }
        }
        let drop = spurious_logit_drop(&model, spec, &spec.hallucination_layers)?;
        if drop.is_nan() || drop < need {
            return Err(Error::Construction(format!(
                "zeroing all hallucination layers lowers the spurious logit by {drop:.3} < {need:.3} (seed {seed})"
            )));
        }
    }
    Ok(model)
}

/// Tries `seed, seed + 1, ...` until the postcondition holds; returns the model
/// and the seed that produced it.
pub fn build_planted_with_retry(
    config: &ModelConfig,
    spec: &PlantedSpec,
    seed: u64,
    max_tries: usize,
) -> Result<(Model, u64)> {
    let mut last = None;
    for i in 0..max_tries.max(1) as u64 {
        match build_planted(config, spec, seed + i) {
            Ok(m) => return Ok((m, seed + i)),
            Err(e @ Error::Construction(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(layers: &[usize], strength: f64) -> PlantedSpec {
        PlantedSpec {
            hallucination_layers: layers.to_vec(),
            trigger_token: 8,
            spurious_token: 9,
            strength,
            task_layers: vec![1, 6],
        }
    }

    #[test]
    fn deterministic_construction() {
        let cfg = ModelConfig::default();
        let a = build_planted(&cfg, &spec(&[3], 4.0), 11).unwrap();
        let b = build_planted(&cfg, &spec(&[3], 4.0), 11).unwrap();
        assert_eq!(a, b);
        let c = build_planted(&cfg, &spec(&[3], 4.0), 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_strength_matches_baseline() {
        let cfg = ModelConfig::default();
        let planted = build_planted(&cfg, &spec(&[3], 0.0), 5).unwrap();
        let base = build_planted(&cfg, &spec(&[], 4.0), 5).unwrap();
        assert!(planted.same_weights(&base));
    }

    #[test]
    fn logit_drop_contract() {
        let cfg = ModelConfig::default();
        let m = build_planted(&cfg, &spec(&[3], 4.0), 0).unwrap();
        assert!(spurious_logit_drop(&m, m.planted().unwrap(), &[3]).unwrap() >= 2.0);
        let m = build_planted(&cfg, &spec(&[2, 5], 4.0), 0).unwrap();
        for l in [2, 5] {
            assert!(spurious_logit_drop(&m, m.planted().unwrap(), &[l]).unwrap() >= 2.0);
        }
    }

    #[test]
    fn too_small_config_rejected() {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            ..ModelConfig::default()
        };
        assert!(matches!(
            build_planted(&cfg, &spec(&[3], 4.0), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn random_model_is_seeded() {
        let cfg = ModelConfig::default();
        assert_eq!(random_model(&cfg, 1).unwrap(), random_model(&cfg, 1).unwrap());
        assert_ne!(random_model(&cfg, 1).unwrap(), random_model(&cfg, 2).unwrap());
    }
}
