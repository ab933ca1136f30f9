//! Straight-line reference transformer used as an oracle by several test
//! targets. It recomputes every layer over all positions at once with plain
//! loops and shares no code with the engine.

#![allow(dead_code)]

use ltsfs::model::{Model, TokenId};

fn ln(x: &[f64], g: &[f32], b: &[f32]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu: f64 = x.iter().sum::<f64>() / n;
    let var: f64 = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    let s = (var + 1e-5).sqrt();
    (0..x.len())
        .map(|i| (x[i] - mu) / s * g[i] as f64 + b[i] as f64)
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn mv(w: &[f32], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| (0..cols).map(|c| w[r * cols + c] as f64 * x[c]).sum())
        .collect()
}

pub fn probs_of(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Pins the attention output of `layer` at `pos` to `value`.
pub struct Pin {
    pub layer: usize,
    pub pos: usize,
    pub value: Vec<f64>,
}

/// Next-token logits at every position. Position `t` uses the weights of
/// `model_at(t)`; all models must share a configuration.
pub fn reference_logits<'a>(
    model_at: &dyn Fn(usize) -> &'a Model,
    tokens: &[TokenId],
    pin: Option<&Pin>,
) -> Vec<Vec<f64>> {
    let cfg = *model_at(0).config();
    let (d, nh, m, v) = (cfg.d_model, cfg.n_heads, cfg.d_mlp, cfg.vocab_size);
    let dh = d / nh;
    let n = tokens.len();
    let mut x: Vec<Vec<f64>> = (0..n)
        .map(|t| {
            let mdl = model_at(t);
            let k = tokens[t] as usize;
            (0..d)
                .map(|i| mdl.tok_embed()[k * d + i] as f64 + mdl.pos_embed()[t * d + i] as f64)
                .collect()
        })
        .collect();
    for l in 0..cfg.n_layers {
        let q: Vec<Vec<f64>> = (0..n).map(|t| mv(&model_at(t).layer(l).wq, d, d, &x[t])).collect();
        let k: Vec<Vec<f64>> = (0..n).map(|t| mv(&model_at(t).layer(l).wk, d, d, &x[t])).collect();
        let val: Vec<Vec<f64>> = (0..n).map(|t| mv(&model_at(t).layer(l).wv, d, d, &x[t])).collect();
        let mut next = Vec::with_capacity(n);
        for t in 0..n {
            let lw = model_at(t).layer(l);
            let mut concat = vec![0.0; d];
            for h in 0..nh {
                let r = h * dh..(h + 1) * dh;
                let s: Vec<f64> = (0..=t)
                    .map(|j| r.clone().map(|i| q[t][i] * k[j][i]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let p = probs_of(&s);
                for i in r {
                    concat[i] = (0..=t).map(|j| p[j] * val[j][i]).sum();
                }
            }
            let mut a = mv(&lw.wo, d, d, &concat);
            if let Some(pin) = pin {
                if pin.layer == l && pin.pos == t {
                    a = pin.value.clone();
                }
            }
            let sum: Vec<f64> = (0..d).map(|i| x[t][i] + a[i]).collect();
            let z = ln(&sum, &lw.ln1_g, &lw.ln1_b);
            let hid: Vec<f64> = mv(&lw.w1, m, d, &z)
                .into_iter()
                .zip(&lw.b1)
                .map(|(u, &b)| gelu(u + b as f64))
                .collect();
            let out: Vec<f64> = mv(&lw.w2, d, m, &hid)
                .into_iter()
                .enumerate()
                .map(|(i, u)| u + lw.b2[i] as f64 + z[i])
                .collect();
            next.push(ln(&out, &lw.ln2_g, &lw.ln2_b));
        }
        x = next;
    }
    (0..n)
        .map(|t| {
            let u = model_at(t).unembed();
            (0..v)
                .map(|c| (0..d).map(|i| x[t][i] * u[i * v + c] as f64).sum())
                .collect()
        })
        .collect()
}

/// `max |a - b| / max |b|`.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}
