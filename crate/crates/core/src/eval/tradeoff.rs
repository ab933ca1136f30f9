use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Granularity, Sample, Scene, Split};
use crate::error::{Error, Result};
use crate::linalg::argmax;
use crate::model::vocab::{self, WorldLayout};
use crate::model::{generate, DecodeState, ForwardHook, Model, NoHook, TokenId};
use crate::steering::SteeringPlan;

use super::metrics::{chair_metrics, pope_metrics, ChairReport, PopeReport};

/// Evaluation prompts: captions and probes over evaluation scenes.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub captions: Vec<Sample>,
    pub probes: Vec<Sample>,
    /// Scenes containing this token are excluded from task accuracy.
    pub trigger: Option<TokenId>,
    pub max_caption_len: usize,
}

impl EvalSet {
    /// Evaluation-split samples of `samples`.
    pub fn from_samples(samples: &[Sample], trigger: Option<TokenId>, max_caption_len: usize) -> Result<Self> {
        let eval = samples.iter().filter(|s| s.split == Split::Eval);
        let (captions, probes): (Vec<Sample>, Vec<Sample>) =
            eval.cloned().partition(|s| s.granularity == Granularity::Sentence);
        if captions.is_empty() || probes.is_empty() {
            return Err(Error::Input(format!(
                "evaluation set needs captions and probes, got {} and {}",
                captions.len(),
                probes.len()
            )));
        }
        Ok(EvalSet {
            captions,
            probes,
            trigger,
            max_caption_len,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionMetrics {
    /// Mean of the caption-level `C_S` and the absent-object probe error.
    pub hallucination_rate: f64,
    pub chair: ChairReport,
    /// `1 −` accuracy on probes about absent objects.
    pub probe_error: f64,
    pub pope: PopeReport,
    /// Caption recall over scenes without the trigger object.
    pub task_accuracy: f64,
    pub tokens: usize,
    pub latency_us_per_token: f64,
}

struct ProbeOutcome {
    said_yes: bool,
    present: bool,
}

fn run_probes(
    model: &Model,
    layout: &WorldLayout,
    probes: &[Sample],
    hook: &dyn ForwardHook,
) -> Result<(Vec<ProbeOutcome>, usize)> {
    let mut by_prompt: BTreeMap<&[TokenId], Vec<&Sample>> = BTreeMap::new();
    for s in probes {
        let (prefix, _) = s.prompt.split_at(s.prompt.len() - 1);
        by_prompt.entry(prefix).or_default().push(s);
    }
    let groups: Vec<(&[TokenId], Vec<&Sample>)> = by_prompt.into_iter().collect();
    let per: Vec<(Vec<ProbeOutcome>, usize)> = groups
        .par_iter()
        .map(|(prefix, group)| {
            let mut st = DecodeState::new(model);
            for &t in prefix.iter() {
                st.step(t, hook)?;
            }
            let mut steps = prefix.len();
            let mut out = Vec::with_capacity(group.len());
            for s in group {
                let probe = *s.prompt.last().expect("nonempty prompt");
                let object = layout
                    .probe_index(probe)
                    .map(|k| layout.object(k))
                    .ok_or_else(|| Error::Input(format!("sample {} does not end in a probe", s.id)))?;
                let answer = argmax(&st.clone().step(probe, hook)?) as TokenId;
                steps += 1;
                out.push(ProbeOutcome {
                    said_yes: answer == vocab::YES,
                    present: s.scene.contains(object),
                });
            }
            Ok((out, steps))
        })
        .collect::<Result<_>>()?;
    let steps = per.iter().map(|(_, n)| n).sum();
    Ok((per.into_iter().flat_map(|(o, _)| o).collect(), steps))
}

fn run_captions(
    model: &Model,
    captions: &[Sample],
    hook: &dyn ForwardHook,
    max_len: usize,
) -> Result<Vec<Vec<TokenId>>> {
    captions
        .par_iter()
        .map(|s| {
            let room = model.config().max_seq_len.saturating_sub(s.prompt.len());
            generate(model, &s.prompt, max_len.min(room), hook, Some(vocab::EOS))
        })
        .collect()
}

/// Regenerates every caption and probe answer under `hook` and scores them.
pub fn evaluate(model: &Model, eval: &EvalSet, hook: &dyn ForwardHook) -> Result<ConditionMetrics> {
    let layout = WorldLayout::for_vocab(model.config().vocab_size)?;
    let t0 = Instant::now();
    let responses = run_captions(model, &eval.captions, hook, eval.max_caption_len)?;
    let (probes, probe_steps) = run_probes(model, &layout, &eval.probes, hook)?;
    let elapsed = t0.elapsed().as_secs_f64();
    let tokens = probe_steps
        + eval
            .captions
            .iter()
            .zip(&responses)
            .map(|(s, r)| s.prompt.len() + r.len())
            .sum::<usize>();

    let scenes: Vec<Scene> = eval.captions.iter().map(|s| s.scene.clone()).collect();
    let chair = chair_metrics(&layout, &responses, &scenes)?;
    let pred: Vec<bool> = probes.iter().map(|p| p.said_yes).collect();
    let truth: Vec<bool> = probes.iter().map(|p| p.present).collect();
    let pope = pope_metrics(&pred, &truth)?;
    let absent: Vec<&ProbeOutcome> = probes.iter().filter(|p| !p.present).collect();
    let probe_error = if absent.is_empty() {
        0.0
    } else {
        absent.iter().filter(|p| p.said_yes).count() as f64 / absent.len() as f64
    };

    let (clean_r, clean_s): (Vec<Vec<TokenId>>, Vec<Scene>) = responses
        .iter()
        .zip(&scenes)
        .filter(|(_, s)| eval.trigger.is_none_or(|t| !s.contains(t)))
        .map(|(r, s)| (r.clone(), s.clone()))
        .unzip();
    let task_accuracy = if clean_r.is_empty() {
        0.0
    } else {
        chair_metrics(&layout, &clean_r, &clean_s)?.recall
    };
    Ok(ConditionMetrics {
        hallucination_rate: 0.5 * (chair.c_s + probe_error),
        chair,
        probe_error,
        pope,
        task_accuracy,
        tokens,
        latency_us_per_token: 1e6 * elapsed / tokens.max(1) as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub seed: u64,
    pub unsteered: ConditionMetrics,
    pub uniform: ConditionMetrics,
    pub layerwise: ConditionMetrics,
    /// `Σ λ_l`, shared by both steered conditions.
    pub total_intensity: f64,
    pub layerwise_mask: Vec<u8>,
}

/// Evaluates the unsteered model and both plans on the same evaluation set.
pub fn run_tradeoff(
    model: &Model,
    eval: &EvalSet,
    uniform: &SteeringPlan,
    layerwise: &SteeringPlan,
    seed: u64,
) -> Result<TradeoffRow> {
    let l = model.config().n_layers;
    uniform.check_layers(l)?;
    layerwise.check_layers(l)?;
    if uniform.backend.kind() != layerwise.backend.kind() {
        return Err(Error::Input("uniform and layerwise plans must share a backend".into()));
    }
    Ok(TradeoffRow {
        seed,
        unsteered: evaluate(model, eval, &NoHook)?,
        uniform: evaluate(model, eval, uniform)?,
        layerwise: evaluate(model, eval, layerwise)?,
        total_intensity: layerwise.total_intensity(),
        layerwise_mask: layerwise.mask.iter().map(|&m| m as u8).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanErr {
    pub mean: f64,
    pub stderr: f64,
}

impl MeanErr {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return MeanErr { mean: 0.0, stderr: 0.0 };
        }
        let mean = xs.iter().sum::<f64>() / n;
        let stderr = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
        } else {
            0.0
        };
        MeanErr { mean, stderr }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub hallucination_rate: MeanErr,
    pub task_accuracy: MeanErr,
    pub latency_us_per_token: MeanErr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<TradeoffRow>,
    pub unsteered: ConditionSummary,
    pub uniform: ConditionSummary,
    pub layerwise: ConditionSummary,
    /// Per-seed hallucination-rate reduction relative to unsteered.
    pub uniform_reduction: MeanErr,
    pub layerwise_reduction: MeanErr,
    /// Per-seed task-accuracy drop relative to unsteered.
    pub uniform_drop: MeanErr,
    pub layerwise_drop: MeanErr,
    /// Per-seed `layerwise − uniform` reduction and drop differences.
    pub reduction_gap: MeanErr,
    pub drop_gap: MeanErr,
    pub note: String,
}

fn summary(rows: &[TradeoffRow], pick: impl Fn(&TradeoffRow) -> &ConditionMetrics) -> ConditionSummary {
    let col = |f: &dyn Fn(&ConditionMetrics) -> f64| MeanErr::of(&rows.iter().map(|r| f(pick(r))).collect::<Vec<_>>());
    ConditionSummary {
        hallucination_rate: col(&|m| m.hallucination_rate),
        task_accuracy: col(&|m| m.task_accuracy),
        latency_us_per_token: col(&|m| m.latency_us_per_token),
    }
}

impl TradeoffReport {
    pub fn from_rows(mut rows: Vec<TradeoffRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Input("no trade-off rows".into()));
        }
        rows.sort_by_key(|r| r.seed);
        let per = |f: &dyn Fn(&TradeoffRow) -> f64| MeanErr::of(&rows.iter().map(f).collect::<Vec<_>>());
        let red_u = |r: &TradeoffRow| r.unsteered.hallucination_rate - r.uniform.hallucination_rate;
        let red_l = |r: &TradeoffRow| r.unsteered.hallucination_rate - r.layerwise.hallucination_rate;
        let drop_u = |r: &TradeoffRow| r.unsteered.task_accuracy - r.uniform.task_accuracy;
        let drop_l = |r: &TradeoffRow| r.unsteered.task_accuracy - r.layerwise.task_accuracy;
        Ok(TradeoffReport {
            seeds: rows.iter().map(|r| r.seed).collect(),
            unsteered: summary(&rows, |r| &r.unsteered),
            uniform: summary(&rows, |r| &r.uniform),
            layerwise: summary(&rows, |r| &r.layerwise),
            uniform_reduction: per(&red_u),
            layerwise_reduction: per(&red_l),
            uniform_drop: per(&drop_u),
            layerwise_drop: per(&drop_l),
            reduction_gap: per(&|r| red_l(r) - red_u(r)),
            drop_gap: per(&|r| drop_l(r) - drop_u(r)),
            note: "uniform plan spreads the layerwise plan's total intensity evenly over all layers".into(),
            rows,
        })
    }

    /// Layerwise reduces hallucination at least as much as uniform and costs
    /// no more task accuracy, with one of the two strictly better by more
    /// than one standard error of the paired difference.
    pub fn layerwise_dominates(&self) -> bool {
        let red = self.reduction_gap;
        let drop = self.drop_gap;
        red.mean >= 0.0 && drop.mean <= 0.0 && (red.mean > red.stderr || -drop.mean > drop.stderr)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "seed,condition,hallucination_rate,chair_s,chair_i,probe_error,task_accuracy,latency_us_per_token\n",
        );
        for r in &self.rows {
            for (name, m) in [
                ("unsteered", &r.unsteered),
                ("uniform", &r.uniform),
                ("layerwise", &r.layerwise),
            ] {
                out.push_str(&format!(
                    "{},{name},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}\n",
                    r.seed,
                    m.hallucination_rate,
                    m.chair.c_s,
                    m.chair.c_i,
                    m.probe_error,
                    m.task_accuracy,
                    m.latency_us_per_token
                ));
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("trade-off over {} seed(s)\n", self.seeds.len());
        out.push_str(&format!(
            "{:<10} {:>22} {:>22} {:>16}\n",
            "condition", "hallucination rate", "task accuracy", "us/token"
        ));
        for (name, c) in [
            ("unsteered", &self.unsteered),
            ("uniform", &self.uniform),
            ("layerwise", &self.layerwise),
        ] {
            out.push_str(&format!(
                "{:<10} {:>13.4} ± {:<6.4} {:>13.4} ± {:<6.4} {:>16.2}\n",
                name,
                c.hallucination_rate.mean,
                c.hallucination_rate.stderr,
                c.task_accuracy.mean,
                c.task_accuracy.stderr,
                c.latency_us_per_token.mean
            ));
        }
        out.push_str(&format!(
            "reduction: uniform {:.4} layerwise {:.4} (gap {:.4} ± {:.4})\n",
            self.uniform_reduction.mean,
            self.layerwise_reduction.mean,
            self.reduction_gap.mean,
            self.reduction_gap.stderr
        ));
        out.push_str(&format!(
            "accuracy drop: uniform {:.4} layerwise {:.4} (gap {:.4} ± {:.4})\n",
            self.uniform_drop.mean, self.layerwise_drop.mean, self.drop_gap.mean, self.drop_gap.stderr
        ));
        out.push_str(&format!("{}\n", self.note));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_stderr() {
        let m = MeanErr::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.stderr - (5.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-15);
        assert_eq!(MeanErr::of(&[7.0]).stderr, 0.0);
    }
}
