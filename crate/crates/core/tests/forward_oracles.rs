mod common;

use common::{max_rel_err, probs_of, reference_logits, Pin};
use ltsfs::attribution::token_score;
use ltsfs::model::{
    apply_head_mask, build_planted, forward_full, logits_from, random_model, HeadMask, Model, ModelConfig, PlantedSpec,
    TokenId,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(n_layers: usize, n_heads: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        n_heads,
        d_model: 16,
        d_mlp: 32,
        vocab_size: 32,
        max_seq_len: 24,
    }
}

#[test]
fn engine_matches_straight_line_reference() {
    let model = random_model(&tiny(2, 2), 0).unwrap();
    let tokens: Vec<TokenId> = vec![0, 5, 17, 3, 31, 8, 8, 2, 20, 11];
    let trace = forward_full(&model, &tokens).unwrap();
    let reference = reference_logits(&|_| &model, &tokens, None);
    for (t, r) in reference.iter().enumerate() {
        assert!(max_rel_err(trace.logits(t), r) < 1e-6, "logits at {t}");
        assert!(max_rel_err(trace.probs(t), &probs_of(r)) < 1e-6, "probs at {t}");
        assert!((trace.probs(t).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn masked_head_equals_surgery_at_that_position() {
    let model = random_model(&tiny(3, 4), 11).unwrap();
    let tokens: Vec<TokenId> = vec![0, 9, 14, 1, 9, 2, 30];
    let trace = forward_full(&model, &tokens).unwrap();
    for layer in 0..3 {
        for head in 0..4 {
            let pos = 4;
            let a = apply_head_mask(&trace, HeadMask::new(layer, head), pos).unwrap();
            let got = logits_from(&model, &trace, layer, &a, pos).unwrap();
            let cut = model.with_head_zeroed(layer, head);
            let want = &reference_logits(&|t| if t == pos { &cut } else { &model }, &tokens[..=pos], None)[pos];
            assert!(max_rel_err(&got, &probs_of(want)) < 1e-6, "layer {layer} head {head}");
        }
    }
}

/// Brute-force token score: every masked probability comes from a full
/// re-forward with the head's output projection zeroed at the prediction position.
fn brute_token_score(model: &Model, tokens: &[TokenId], pos: usize, y: TokenId) -> Vec<f64> {
    let cfg = model.config();
    let base = probs_of(&reference_logits(&|_| model, &tokens[..=pos], None)[pos])[y as usize].max(1e-12);
    (0..cfg.n_layers)
        .map(|l| {
            (0..cfg.n_heads)
                .map(|h| {
                    let cut = model.with_head_zeroed(l, h);
                    let lg = &reference_logits(&|t| if t == pos { &cut } else { model }, &tokens[..=pos], None)[pos];
                    (base / probs_of(lg)[y as usize].max(1e-12)).ln()
                })
                .sum()
        })
        .collect()
}

#[test]
fn planted_head_carries_the_token_score() {
    let spec = PlantedSpec {
        hallucination_layers: vec![3],
        trigger_token: 10,
        spurious_token: 13,
        strength: 4.0,
        task_layers: vec![1, 6],
    };
    let model = build_planted(&ModelConfig::default(), &spec, 0).unwrap();
    let tokens: Vec<TokenId> = vec![0, 10, 8, 1];
    let pos = 3;
    let trace = forward_full(&model, &tokens).unwrap();
    let got = token_score(&model, &trace, pos, 13).unwrap();
    let want = brute_token_score(&model, &tokens, pos, 13);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-5, "{got:?} vs {want:?}");
    }
    let top = got.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(got[3] > 0.0 && got[3] == top);
    assert_eq!(got.iter().filter(|&&s| s == top).count(), 1);
}

#[test]
fn random_overrides_match_pinned_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..10 {
        let model = random_model(&tiny(3, 2), seed).unwrap();
        let n = rng.random_range(1..10);
        let tokens: Vec<TokenId> = (0..n).map(|_| rng.random_range(0..32)).collect();
        let trace = forward_full(&model, &tokens).unwrap();
        let layer = rng.random_range(0..3);
        let pos = rng.random_range(0..n);
        let value: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
        let got = logits_from(&model, &trace, layer, &value, pos).unwrap();
        let pin = Pin { layer, pos, value };
        let want = &reference_logits(&|_| &model, &tokens[..=pos], Some(&pin))[pos];
        assert!(max_rel_err(&got, &probs_of(want)) < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn perturbing_a_token_never_changes_earlier_logits(
        seed in 0u64..1000,
        tokens in prop::collection::vec(0u32..32, 2..12),
        at in 0usize..12,
        replacement in 0u32..32,
    ) {
        let model = random_model(&tiny(2, 2), seed).unwrap();
        let at = at % tokens.len();
        let mut other = tokens.clone();
        other[at] = replacement;
        let a = forward_full(&model, &tokens).unwrap();
        let b = forward_full(&model, &other).unwrap();
        for t in 0..at {
            prop_assert_eq!(a.logits(t), b.logits(t));
        }
    }

    #[test]
    fn head_contributions_sum_to_attention_output(seed in 0u64..1000, tokens in prop::collection::vec(0u32..32, 1..10)) {
        let model = random_model(&tiny(2, 4), seed).unwrap();
        let trace = forward_full(&model, &tokens).unwrap();
        for pos in 0..tokens.len() {
            for l in 0..2 {
                let sum: Vec<f64> = (0..16).map(|i| (0..4).map(|h| trace.head_contrib(pos, l, h)[i]).sum()).collect();
                for (s, a) in sum.iter().zip(trace.attn_out(pos, l)) {
                    prop_assert!((s - a).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn stored_override_reproduces_trace(seed in 0u64..1000, tokens in prop::collection::vec(0u32..32, 1..10), layer in 0usize..2) {
        let model = random_model(&tiny(2, 2), seed).unwrap();
        let trace = forward_full(&model, &tokens).unwrap();
        let pos = tokens.len() - 1;
        let p = logits_from(&model, &trace, layer, trace.attn_out(pos, layer), pos).unwrap();
        prop_assert!(max_rel_err(&p, trace.probs(pos)) < 1e-6);
    }
}
