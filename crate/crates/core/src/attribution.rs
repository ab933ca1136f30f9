//! Per-layer attribution of hallucinated tokens.
//!
//! A layer's token score sums, over its heads, the log ratio between the
//! probability of the hallucinated token under the unmodified forward and
//! under the forward with that single head's attention contribution removed.
//! Sentence scores weight token scores by cue, position and hallucination
//! indicators.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Granularity, Sample, Span};
use crate::error::{Error, Result};
use crate::model::{apply_head_mask, forward_full, logits_from, ForwardTrace, HeadMask, Model, TokenId};

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndicatorConfig {
    pub lambda_cue: f64,
    pub lambda_pos: f64,
    pub lambda_hall: f64,
    pub cue_tokens: Vec<TokenId>,
}

impl Default for IndicatorConfig {
    fn default() -> Self {
        IndicatorConfig {
            lambda_cue: 1.0,
            lambda_pos: 1.0,
            lambda_hall: 1.0,
            cue_tokens: crate::dataset::default_cue_tokens(),
        }
    }
}

impl IndicatorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cue", self.lambda_cue),
            ("lambda_pos", self.lambda_pos),
            ("lambda_hall", self.lambda_hall),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenIndicators {
    /// Cue (summary) token.
    pub u: f64,
    /// Relative position in the span, 0 at the first token and 1 at the last.
    pub r: f64,
    /// Hallucinated token.
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenWeights {
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributionMode {
    Token,
    Sentence,
    Both,
}

impl AttributionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AttributionMode::Token => "token",
            AttributionMode::Sentence => "sentence",
            AttributionMode::Both => "both",
        }
    }

    pub fn includes(self, g: Granularity) -> bool {
        match self {
            AttributionMode::Token => g == Granularity::Token,
            AttributionMode::Sentence => g == Granularity::Sentence,
            AttributionMode::Both => true,
        }
    }
}

impl std::str::FromStr for AttributionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token" => Ok(AttributionMode::Token),
            "sentence" => Ok(AttributionMode::Sentence),
            "both" => Ok(AttributionMode::Both),
            _ => Err(Error::Config(format!("unknown attribution mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScores {
    pub mode: AttributionMode,
    pub scores: Vec<f64>,
    pub n_samples: usize,
    pub dropped_zero_vectors: usize,
    pub indicator_config: IndicatorConfig,
    #[serde(default)]
    pub model_hash: String,
}

impl LayerScores {
    pub fn argmax(&self) -> usize {
        crate::linalg::argmax(&self.scores)
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.scores.len() != n_layers {
            return Err(Error::Validation(format!(
                "{} layer scores for a {n_layers}-layer model",
                self.scores.len()
            )));
        }
        if self.scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Validation("non-finite layer score".into()));
        }
        Ok(())
    }
}

fn check_position(trace: &ForwardTrace, position: usize, y: TokenId) -> Result<()> {
    if position >= trace.len() {
        return Err(Error::Input(format!(
            "position {position} out of range for trace of length {}",
            trace.len()
        )));
    }
    if y as usize >= trace.probs(position).len() {
        return Err(Error::Input(format!("token {y} out of vocabulary")));
    }
    Ok(())
}

/// Per-layer score of `y` at the prediction `position`, one head masked at a time.
pub fn token_score(model: &Model, trace: &ForwardTrace, position: usize, y: TokenId) -> Result<Vec<f64>> {
    check_position(trace, position, y)?;
    let cfg = model.config();
    let p = trace.probs(position)[y as usize].max(PROB_FLOOR);
    (0..cfg.n_layers)
        .map(|l| {
            let mut s = 0.0;
            for h in 0..cfg.n_heads {
                let masked = apply_head_mask(trace, HeadMask::new(l, h), position)?;
                let pm = logits_from(model, trace, l, &masked, position)?[y as usize].max(PROB_FLOOR);
                s += (p / pm).ln();
            }
            Ok(s)
        })
        .collect()
}

pub fn token_indicators(tokens: &[TokenId], labels: &[bool], cue_tokens: &[TokenId]) -> Vec<TokenIndicators> {
    let n = tokens.len();
    tokens
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(t, (tok, &hall))| TokenIndicators {
            u: if cue_tokens.contains(tok) { 1.0 } else { 0.0 },
            r: if n > 1 { t as f64 / (n - 1) as f64 } else { 0.0 },
            v: if hall { 1.0 } else { 0.0 },
        })
        .collect()
}

/// Normalized multiplicative indicator weights over one span.
pub fn token_weights(tokens: &[TokenId], labels: &[bool], cfg: &IndicatorConfig) -> Result<TokenWeights> {
    if tokens.is_empty() {
        return Err(Error::Input("empty span".into()));
    }
    if tokens.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} labels for {} span tokens",
            labels.len(),
            tokens.len()
        )));
    }
    let raw: Vec<f64> = token_indicators(tokens, labels, &cfg.cue_tokens)
        .iter()
        .map(|i| (1.0 + cfg.lambda_cue * i.u) * (1.0 + cfg.lambda_pos * i.r) * (1.0 + cfg.lambda_hall * i.v))
        .collect();
    let z: f64 = raw.iter().sum();
    Ok(TokenWeights {
        w: raw.into_iter().map(|x| x / z).collect(),
    })
}

fn check_sample_trace(sample: &Sample, trace: &ForwardTrace) -> Result<()> {
    if trace.len() + 1 < sample.prompt.len() + sample.response.len() {
        return Err(Error::Input(format!(
            "trace of length {} does not cover sample {}",
            trace.len(),
            sample.id
        )));
    }
    Ok(())
}

/// Indicator-weighted sum of token scores over `span` of `sample`'s response.
pub fn sentence_score(
    model: &Model,
    trace: &ForwardTrace,
    sample: &Sample,
    span: &Span,
    cfg: &IndicatorConfig,
) -> Result<Vec<f64>> {
    check_sample_trace(sample, trace)?;
    if span.end > sample.response.len() || span.start >= span.end {
        return Err(Error::Input(format!(
            "span [{}, {}) outside a response of {} tokens",
            span.start,
            span.end,
            sample.response.len()
        )));
    }
    let toks = &sample.response[span.start..span.end];
    let w = token_weights(toks, &sample.token_labels[span.start..span.end], cfg)?;
    let mut out = vec![0.0; model.config().n_layers];
    for (i, wi) in (span.start..span.end).zip(&w.w) {
        let s = token_score(model, trace, sample.prediction_position(i), sample.response[i])?;
        for (o, x) in out.iter_mut().zip(&s) {
            *o += wi * x;
        }
    }
    Ok(out)
}

fn mean_of(vs: &[Vec<f64>]) -> Vec<f64> {
    let n = vs.len() as f64;
    let mut out = vec![0.0; vs[0].len()];
    for v in vs {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x / n;
        }
    }
    out
}

/// Raw score vector of one calibration sample: the mean token score over its
/// hallucinated tokens (token level) or the mean sentence score over its
/// hallucinated spans (sentence level). `None` without hallucinations.
pub fn sample_score(model: &Model, sample: &Sample, cfg: &IndicatorConfig) -> Result<Option<Vec<f64>>> {
    if !sample.has_hallucination() {
        return Ok(None);
    }
    let tokens = sample.full_tokens();
    let trace = forward_full(model, &tokens[..tokens.len() - 1])?;
    let per: Vec<Vec<f64>> = match sample.granularity {
        Granularity::Token => sample
            .hallucinated_positions()
            .map(|i| token_score(model, &trace, sample.prediction_position(i), sample.response[i]))
            .collect::<Result<_>>()?,
        Granularity::Sentence => sample
            .spans
            .iter()
            .filter(|s| s.hallucinated)
            .map(|s| sentence_score(model, &trace, sample, s, cfg))
            .collect::<Result<_>>()?,
    };
    Ok(Some(mean_of(&per)))
}

/// L1-normalizes each vector, drops all-zero ones, and averages per
/// granularity; "both" averages the two granularity means with equal weight.
pub fn pool_scores(
    per_sample: &[(Granularity, Vec<f64>)],
    mode: AttributionMode,
    cfg: &IndicatorConfig,
) -> Result<LayerScores> {
    let mut dropped = 0;
    let mut tok = Vec::new();
    let mut sent = Vec::new();
    for (g, v) in per_sample.iter().filter(|(g, _)| mode.includes(*g)) {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Pooling("non-finite score vector".into()));
        }
        let l1: f64 = v.iter().map(|x| x.abs()).sum();
        if l1 == 0.0 {
            dropped += 1;
            continue;
        }
        let n: Vec<f64> = v.iter().map(|x| x / l1).collect();
        match g {
            Granularity::Token => tok.push(n),
            Granularity::Sentence => sent.push(n),
        }
    }
    if dropped > 0 {
        log::warn!("pooling dropped {dropped} all-zero score vectors");
    }
    let scores = match mode {
        AttributionMode::Token | AttributionMode::Sentence => {
            let v = if mode == AttributionMode::Token { &tok } else { &sent };
            if v.is_empty() {
                return Err(Error::Pooling(
                    format!("no usable {mode:?} score vectors").to_lowercase(),
                ));
            }
            mean_of(v)
        }
        AttributionMode::Both => {
            if tok.is_empty() || sent.is_empty() {
                return Err(Error::Pooling(format!(
                    "both-level pooling needs vectors of each granularity, got {} token and {} sentence",
                    tok.len(),
                    sent.len()
                )));
            }
            let (a, b) = (mean_of(&tok), mean_of(&sent));
            a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect()
        }
    };
    Ok(LayerScores {
        mode,
        scores,
        n_samples: tok.len() + sent.len(),
        dropped_zero_vectors: dropped,
        indicator_config: cfg.clone(),
        model_hash: String::new(),
    })
}

/// Scores every hallucinated sample of the requested granularities, in
/// sample-id order, and pools them.
pub fn attribute_pool(
    model: &Model,
    samples: &[Sample],
    mode: AttributionMode,
    cfg: &IndicatorConfig,
) -> Result<LayerScores> {
    cfg.validate()?;
    let mut chosen: Vec<&Sample> = samples
        .iter()
        .filter(|s| mode.includes(s.granularity) && s.has_hallucination())
        .collect();
    chosen.sort_by_key(|s| s.id);
    let raw: Vec<Option<Vec<f64>>> = chosen
        .par_iter()
        .map(|s| sample_score(model, s, cfg))
        .collect::<Result<_>>()?;
    let per: Vec<(Granularity, Vec<f64>)> = chosen
        .iter()
        .zip(raw)
        .filter_map(|(s, v)| v.map(|v| (s.granularity, v)))
        .collect();
    let mut out = pool_scores(&per, mode, cfg)?;
    out.model_hash = model.content_hash();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{random_model, ModelConfig};

    fn cfg_all(l: f64) -> IndicatorConfig {
        IndicatorConfig {
            lambda_cue: l,
            lambda_pos: l,
            lambda_hall: l,
            cue_tokens: vec![2],
        }
    }

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            n_heads: 2,
            d_model: 8,
            d_mlp: 12,
            vocab_size: 12,
            max_seq_len: 10,
        }
    }

    #[test]
    fn three_token_weights_by_hand() {
        let w = token_weights(&[8, 9, 2], &[false, true, false], &cfg_all(1.0)).unwrap();
        let want = [0.125, 0.375, 0.5];
        for (a, b) in w.w.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn singleton_and_uniform_weights() {
        assert_eq!(token_weights(&[2], &[true], &cfg_all(3.0)).unwrap().w, vec![1.0]);
        let w = token_weights(&[2, 8, 9, 10], &[true, false, true, false], &cfg_all(0.0)).unwrap();
        assert!(w.w.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert!(matches!(token_weights(&[], &[], &cfg_all(1.0)), Err(Error::Input(_))));
    }

    #[test]
    fn pooling_by_hand() {
        let c = IndicatorConfig::default();
        let v = vec![
            (Granularity::Token, vec![2.0, 2.0]),
            (Granularity::Token, vec![0.0, 4.0]),
        ];
        let p = pool_scores(&v, AttributionMode::Token, &c).unwrap();
        assert_eq!(p.scores, vec![0.25, 0.75]);
        let one = pool_scores(&v[..1], AttributionMode::Token, &c).unwrap();
        assert_eq!(one.scores, vec![0.5, 0.5]);
        let twice = pool_scores(&[v[0].clone(), v[0].clone()], AttributionMode::Token, &c).unwrap();
        assert_eq!(twice.scores, one.scores);
    }

    #[test]
    fn pooling_errors_and_drops() {
        let c = IndicatorConfig::default();
        let zero = vec![(Granularity::Token, vec![0.0, 0.0])];
        assert!(matches!(
            pool_scores(&zero, AttributionMode::Token, &c),
            Err(Error::Pooling(_))
        ));
        let only_tok = vec![
            (Granularity::Token, vec![1.0, 0.0]),
            (Granularity::Token, vec![0.0, 0.0]),
        ];
        assert!(matches!(
            pool_scores(&only_tok, AttributionMode::Both, &c),
            Err(Error::Pooling(_))
        ));
        let p = pool_scores(&only_tok, AttributionMode::Token, &c).unwrap();
        assert_eq!((p.n_samples, p.dropped_zero_vectors), (1, 1));
        let both = vec![
            (Granularity::Token, vec![1.0, 0.0]),
            (Granularity::Sentence, vec![0.0, 3.0]),
        ];
        assert_eq!(
            pool_scores(&both, AttributionMode::Both, &c).unwrap().scores,
            vec![0.5, 0.5]
        );
    }

    #[test]
    fn zero_attention_layer_scores_zero() {
        let m = random_model(&small(), 3).unwrap().map_layer_weights(|l, w| {
            if l == 1 {
                w.wo.iter_mut().for_each(|x| *x = 0.0);
            }
        });
        let t = forward_full(&m, &[1, 4, 7, 2]).unwrap();
        let s = token_score(&m, &t, 3, 5).unwrap();
        assert_eq!(s[1], 0.0);
        assert!(s[0] != 0.0 && s[2] != 0.0);
    }

    #[test]
    fn single_head_without_effect_scores_exactly_zero() {
        let cfg = ModelConfig { n_heads: 1, ..small() };
        let m = random_model(&cfg, 5).unwrap().with_attention_zeroed();
        let t = forward_full(&m, &[1, 4, 7]).unwrap();
        assert!(token_score(&m, &t, 2, 9).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn position_out_of_range() {
        let m = random_model(&small(), 3).unwrap();
        let t = forward_full(&m, &[1, 4]).unwrap();
        assert!(matches!(token_score(&m, &t, 2, 0), Err(Error::Input(_))));
    }

    #[test]
    fn one_token_span_equals_token_score() {
        let m = random_model(&small(), 8).unwrap();
        let s = Sample {
            id: 0,
            granularity: Granularity::Sentence,
            scene: crate::dataset::Scene::new(0, vec![8]),
            prompt: vec![0, 8, 1],
            response: vec![9, 2, 3],
            token_labels: vec![true, false, false],
            spans: vec![
                Span {
                    start: 0,
                    end: 1,
                    hallucinated: true,
                },
                Span {
                    start: 1,
                    end: 3,
                    hallucinated: false,
                },
            ],
            split: crate::dataset::Split::Calib,
        };
        let toks = s.full_tokens();
        let t = forward_full(&m, &toks[..toks.len() - 1]).unwrap();
        let a = sentence_score(&m, &t, &s, &s.spans[0], &cfg_all(1.0)).unwrap();
        let b = token_score(&m, &t, 2, 9).unwrap();
        assert_eq!(a, b);
        let uniform = sentence_score(&m, &t, &s, &s.spans[1], &cfg_all(0.0)).unwrap();
        let t1 = token_score(&m, &t, 3, 2).unwrap();
        let t2 = token_score(&m, &t, 4, 3).unwrap();
        for l in 0..3 {
            assert!((uniform[l] - 0.5 * (t1[l] + t2[l])).abs() < 1e-12);
        }
    }
}
