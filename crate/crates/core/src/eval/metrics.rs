use serde::{Deserialize, Serialize};

use crate::dataset::Scene;
use crate::error::{Error, Result};
use crate::model::vocab::WorldLayout;
use crate::model::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChairReport {
    /// Fraction of responses mentioning at least one absent object.
    pub c_s: f64,
    /// Absent-object mentions over all object mentions, counted per mention.
    pub c_i: f64,
    /// Mean over responses of the fraction of scene objects mentioned.
    pub recall: f64,
    pub mean_length: f64,
    pub n_responses: usize,
}

pub fn chair_metrics(layout: &WorldLayout, responses: &[Vec<TokenId>], scenes: &[Scene]) -> Result<ChairReport> {
    if responses.is_empty() {
        return Err(Error::Input("no responses to score".into()));
    }
    if responses.len() != scenes.len() {
        return Err(Error::Input(format!(
            "{} responses for {} scenes",
            responses.len(),
            scenes.len()
        )));
    }
    let (mut with_hall, mut absent, mut mentions, mut recall, mut len) = (0usize, 0usize, 0usize, 0.0, 0usize);
    for (r, s) in responses.iter().zip(scenes) {
        let objs: Vec<TokenId> = r.iter().copied().filter(|&t| layout.is_object(t)).collect();
        let bad = objs.iter().filter(|&&t| !s.contains(t)).count();
        with_hall += usize::from(bad > 0);
        absent += bad;
        mentions += objs.len();
        if !s.objects.is_empty() {
            let hit = s.objects.iter().filter(|o| objs.contains(o)).count();
            recall += hit as f64 / s.objects.len() as f64;
        }
        len += r.len();
    }
    let n = responses.len() as f64;
    Ok(ChairReport {
        c_s: with_hall as f64 / n,
        c_i: if mentions == 0 {
            0.0
        } else {
            absent as f64 / mentions as f64
        },
        recall: recall / n,
        mean_length: len as f64 / n,
        n_responses: responses.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Confusion-matrix metrics with "yes" as the positive class.
pub fn pope_metrics(predictions: &[bool], truths: &[bool]) -> Result<PopeReport> {
    if predictions.len() != truths.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &t) in predictions.iter().zip(truths) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(PopeReport {
        accuracy: ratio(tp + tn, predictions.len()),
        precision,
        recall,
        f1,
        tp,
        fp,
        tn,
        fn_,
    })
}
