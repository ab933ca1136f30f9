//! Toy-scale hallucination metrics, the uniform-versus-layerwise comparison,
//! ablation sweeps, the overhead benchmark, and seeded planted-benchmark runs.

mod bench;
mod experiment;
mod metrics;
mod tradeoff;

use serde::{Deserialize, Serialize};

use crate::attribution::{attribute_pool, AttributionMode, IndicatorConfig, LayerScores};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::steering::{make_plan, Gating, SteeringBackend, SteeringPolicyConfig};

pub use bench::{bench_overhead, BenchReport, BENCH_RUNS, MIN_BENCH_TOKENS};
pub use experiment::{planted_instance, BenchmarkConfig, SeedRun};
pub use metrics::{chair_metrics, pope_metrics, ChairReport, PopeReport};
pub use tradeoff::{
    evaluate, run_tradeoff, ConditionMetrics, ConditionSummary, EvalSet, MeanErr, TradeoffReport, TradeoffRow,
};

pub const DEFAULT_RS_GRID: [f64; 5] = [0.0, 0.3, 0.5, 0.7, 0.9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// What varied: an `r_s` value, a granularity mode, or a gating rule.
    pub setting: String,
    pub r_s_effective: f64,
    pub mask: Vec<u8>,
    pub intensities: Vec<f64>,
    pub degenerate: bool,
    pub metrics: ConditionMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub name: String,
    pub unsteered: ConditionMetrics,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.name);
        out.push_str(&format!(
            "{:<14} {:>6} {:<10} {:>8} {:>12} {:>10}\n",
            "setting", "r_s", "mask", "sum λ", "halluc rate", "task acc"
        ));
        out.push_str(&format!(
            "{:<14} {:>6} {:<10} {:>8} {:>12.4} {:>10.4}\n",
            "unsteered", "-", "-", "0", self.unsteered.hallucination_rate, self.unsteered.task_accuracy
        ));
        for r in &self.rows {
            let mask: String = r.mask.iter().map(|m| if *m == 1 { '1' } else { '0' }).collect();
            out.push_str(&format!(
                "{:<14} {:>6.3} {:<10} {:>8.4} {:>12.4} {:>10.4}\n",
                r.setting,
                r.r_s_effective,
                mask,
                r.intensities.iter().sum::<f64>(),
                r.metrics.hallucination_rate,
                r.metrics.task_accuracy
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("setting,r_s_effective,mask,total_intensity,degenerate,hallucination_rate,task_accuracy\n");
        for r in &self.rows {
            let mask: String = r.mask.iter().map(|m| char::from(b'0' + m)).collect();
            out.push_str(&format!(
                "{},{},{mask},{},{},{},{}\n",
                r.setting,
                r.r_s_effective,
                r.intensities.iter().sum::<f64>(),
                r.degenerate,
                r.metrics.hallucination_rate,
                r.metrics.task_accuracy
            ));
        }
        out
    }
}

fn row(model: &Model, eval: &EvalSet, setting: String, plan: &crate::steering::SteeringPlan) -> Result<AblationRow> {
    Ok(AblationRow {
        setting,
        r_s_effective: plan.r_s_effective,
        mask: plan.mask.iter().map(|&m| m as u8).collect(),
        intensities: plan.intensities.clone(),
        degenerate: plan.degenerate,
        metrics: evaluate(model, eval, plan)?,
    })
}

/// The layerwise condition at each `r_s` of the grid.
pub fn sweep_rs(
    model: &Model,
    eval: &EvalSet,
    scores: &LayerScores,
    rs_values: &[f64],
    backend: &SteeringBackend,
    policy: &SteeringPolicyConfig,
) -> Result<AblationTable> {
    if rs_values.is_empty() {
        return Err(Error::Input("empty r_s grid".into()));
    }
    let mut rows = Vec::with_capacity(rs_values.len());
    for &r_s in rs_values {
        let cfg = SteeringPolicyConfig {
            r_s,
            gating: Gating::Hard,
            ..policy.clone()
        };
        let plan = make_plan(scores, &cfg, backend.clone())?;
        rows.push(row(model, eval, format!("r_s={r_s}"), &plan)?);
    }
    Ok(AblationTable {
        name: "r_s sweep".into(),
        unsteered: evaluate(model, eval, &crate::model::NoHook)?,
        rows,
    })
}

/// Layerwise plans from token, sentence and both-level attribution.
pub fn sweep_modes(
    model: &Model,
    calibration: &[Sample],
    eval: &EvalSet,
    indicator: &IndicatorConfig,
    backend: &SteeringBackend,
    policy: &SteeringPolicyConfig,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(3);
    for mode in [AttributionMode::Token, AttributionMode::Sentence, AttributionMode::Both] {
        let scores = attribute_pool(model, calibration, mode, indicator)?;
        let plan = make_plan(&scores, policy, backend.clone())?;
        rows.push(row(model, eval, mode.as_str().to_string(), &plan)?);
    }
    Ok(AblationTable {
        name: "granularity modes".into(),
        unsteered: evaluate(model, eval, &crate::model::NoHook)?,
        rows,
    })
}

/// Hard gating at the configured `r_s` against soft gating.
pub fn sweep_gating(
    model: &Model,
    eval: &EvalSet,
    scores: &LayerScores,
    backend: &SteeringBackend,
    policy: &SteeringPolicyConfig,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(2);
    for gating in [Gating::Hard, Gating::Soft] {
        let cfg = SteeringPolicyConfig {
            gating,
            ..policy.clone()
        };
        let plan = make_plan(scores, &cfg, backend.clone())?;
        rows.push(row(model, eval, format!("{gating:?}").to_lowercase(), &plan)?);
    }
    Ok(AblationTable {
        name: "gating".into(),
        unsteered: evaluate(model, eval, &crate::model::NoHook)?,
        rows,
    })
}
