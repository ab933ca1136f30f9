use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::argmax;
use crate::model::vocab;
use crate::model::{DecodeState, ForwardHook, Model, NoHook, TokenId};
use crate::steering::SteeringPlan;

pub const BENCH_RUNS: usize = 5;
pub const MIN_BENCH_TOKENS: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n_tokens: usize,
    pub runs: usize,
    pub unsteered_ns_per_token: f64,
    pub steered_ns_per_token: f64,
    /// Steered over unsteered median per-token time.
    pub ratio: f64,
}

/// Greedy decoding of `n_tokens` positions, restarting from `<bos>` whenever
/// the context is full. Returns elapsed nanoseconds.
fn decode_run(model: &Model, hook: &dyn ForwardHook, n_tokens: usize) -> Result<f64> {
    let max = model.config().max_seq_len;
    let t0 = Instant::now();
    let mut done = 0;
    while done < n_tokens {
        let mut st = DecodeState::new(model);
        let mut next: TokenId = vocab::BOS;
        while st.len() < max && done < n_tokens {
            let logits = st.step(next, hook)?;
            next = argmax(&logits) as TokenId;
            done += 1;
        }
    }
    Ok(t0.elapsed().as_nanos() as f64)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Per-token latency of steered over unsteered decoding on the calling
/// thread. One warmup pass of each, then runs alternate between the two.
pub fn bench_overhead(model: &Model, plan: &SteeringPlan, n_tokens: usize) -> Result<BenchReport> {
    if n_tokens < MIN_BENCH_TOKENS {
        return Err(Error::Input(format!(
            "benchmark needs at least {MIN_BENCH_TOKENS} tokens"
        )));
    }
    plan.check_layers(model.config().n_layers)?;
    decode_run(model, &NoHook, n_tokens)?;
    decode_run(model, plan, n_tokens)?;
    let mut base = Vec::with_capacity(BENCH_RUNS);
    let mut steered = Vec::with_capacity(BENCH_RUNS);
    for i in 0..BENCH_RUNS {
        if i % 2 == 0 {
            base.push(decode_run(model, &NoHook, n_tokens)?);
            steered.push(decode_run(model, plan, n_tokens)?);
        } else {
            steered.push(decode_run(model, plan, n_tokens)?);
            base.push(decode_run(model, &NoHook, n_tokens)?);
        }
    }
    let b = median(base) / n_tokens as f64;
    let s = median(steered) / n_tokens as f64;
    Ok(BenchReport {
        n_tokens,
        runs: BENCH_RUNS,
        unsteered_ns_per_token: b,
        steered_ns_per_token: s,
        ratio: s / b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
