use crate::error::{Error, Result};
use crate::linalg::argmax;

use super::forward::{DecodeState, ForwardHook};
use super::{Model, TokenId};

/// Greedy decoding. `hook` sees every block output of every position, prompt
/// included, so a steering plan acts on the whole context. Generation stops
/// after `max_new` tokens or right after emitting `stop`.
///
/// Returns only the generated tokens.
pub fn generate(
    model: &Model,
    prompt: &[TokenId],
    max_new: usize,
    hook: &dyn ForwardHook,
    stop: Option<TokenId>,
) -> Result<Vec<TokenId>> {
    let max = model.config().max_seq_len;
    if prompt.is_empty() {
        return Err(Error::Input("empty prompt".into()));
    }
    if prompt.len() + max_new > max {
        return Err(Error::Capacity {
            len: prompt.len() + max_new,
            max,
        });
    }
    let mut st = DecodeState::new(model);
    let mut logits = Vec::new();
    for &t in prompt {
        logits = st.step(t, hook)?;
    }
    continue_greedy(&mut st, logits, max_new, hook, stop)
}

/// Greedy continuation from a primed decoder whose last step returned `logits`.
pub fn continue_greedy(
    st: &mut DecodeState<'_>,
    mut logits: Vec<f64>,
    max_new: usize,
    hook: &dyn ForwardHook,
    stop: Option<TokenId>,
) -> Result<Vec<TokenId>> {
    let mut out = Vec::with_capacity(max_new);
    for i in 0..max_new {
        let next = argmax(&logits) as TokenId;
        out.push(next);
        if Some(next) == stop || i + 1 == max_new {
            break;
        }
        logits = st.step(next, hook)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_full, random_model, ModelConfig, NoHook};

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_mlp: 8,
            vocab_size: 10,
            max_seq_len: 8,
        }
    }

    #[test]
    fn greedy_matches_teacher_forced_argmax() {
        let m = random_model(&cfg(), 4).unwrap();
        let prompt = [1, 2, 3];
        let out = generate(&m, &prompt, 5, &NoHook, None).unwrap();
        assert_eq!(out.len(), 5);
        let mut all = prompt.to_vec();
        all.extend(&out);
        let t = forward_full(&m, &all[..all.len() - 1]).unwrap();
        for (i, &y) in out.iter().enumerate() {
            assert_eq!(argmax(t.logits(prompt.len() - 1 + i)) as TokenId, y);
        }
    }

    #[test]
    fn capacity_checked() {
        let m = random_model(&cfg(), 4).unwrap();
        assert!(matches!(
            generate(&m, &[1, 2, 3], 6, &NoHook, None),
            Err(Error::Capacity { len: 9, max: 8 })
        ));
        assert!(generate(&m, &[1, 2, 3], 5, &NoHook, None).is_ok());
    }

    #[test]
    fn stops_at_stop_token() {
        let m = random_model(&cfg(), 4).unwrap();
        let free = generate(&m, &[1], 7, &NoHook, None).unwrap();
        let stop = free[2];
        let cut = generate(&m, &[1], 7, &NoHook, Some(stop)).unwrap();
        let first = free.iter().position(|&t| t == stop).unwrap();
        assert_eq!(cut, free[..=first].to_vec());
    }
}
