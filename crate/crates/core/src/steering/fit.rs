use rayon::prelude::*;

use crate::dataset::{Granularity, Sample};
use crate::error::{Error, Result};
use crate::linalg::{norm, thin_svd_left};
use crate::model::vocab::{self, WorldLayout};
use crate::model::{forward_full, Model};

use super::SteeringBackend;

/// Minimum positions per class and layer for a mean-shift fit.
pub const MIN_CLASS_POSITIONS: usize = 5;

/// Block outputs `h_l` at labeled prediction positions. `hallucinated[i][l]`
/// is the activation of layer `l` at the i-th hallucinated position.
#[derive(Debug, Clone, Default)]
pub struct Activations {
    pub hallucinated: Vec<(Granularity, Vec<Vec<f64>>)>,
    pub faithful: Vec<(Granularity, Vec<Vec<f64>>)>,
}

/// Per-layer activations of one position.
type LayerActs = Vec<Vec<f64>>;

/// Response tokens that can carry a hallucination label: objects and answers.
fn is_content(layout: &WorldLayout, t: u32) -> bool {
    layout.is_object(t) || t == vocab::YES || t == vocab::NO
}

/// Hallucinated positions come from every sample; faithful positions only
/// from samples without any hallucinated token, so that context shared with
/// a hallucination does not leak into the faithful class.
pub fn collect_activations(model: &Model, samples: &[Sample]) -> Result<Activations> {
    let layout = WorldLayout::for_vocab(model.config().vocab_size)?;
    let n_layers = model.config().n_layers;
    let per: Vec<Activations> = samples
        .par_iter()
        .map(|s| {
            let toks = s.full_tokens();
            let trace = forward_full(model, &toks[..toks.len() - 1])?;
            let clean = !s.has_hallucination();
            let mut a = Activations::default();
            for (i, (&t, &hall)) in s.response.iter().zip(&s.token_labels).enumerate() {
                if !(hall || (clean && is_content(&layout, t))) {
                    continue;
                }
                let p = s.prediction_position(i);
                let hs: Vec<Vec<f64>> = (0..n_layers).map(|l| trace.block_out(p, l).to_vec()).collect();
                if hall {
                    a.hallucinated.push((s.granularity, hs));
                } else {
                    a.faithful.push((s.granularity, hs));
                }
            }
            Ok(a)
        })
        .collect::<Result<_>>()?;
    let mut out = Activations::default();
    for a in per {
        out.hallucinated.extend(a.hallucinated);
        out.faithful.extend(a.faithful);
    }
    Ok(out)
}

fn class_mean(xs: &[&Vec<f64>]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mut m = vec![0.0; xs[0].len()];
    for x in xs {
        for (a, b) in m.iter_mut().zip(x.iter()) {
            *a += b / n;
        }
    }
    m
}

/// Per layer, the unit difference between the hallucinated and faithful
/// class means, scaled by the mean activation norm over both classes.
pub fn fit_mean_shift(model: &Model, samples: &[Sample]) -> Result<SteeringBackend> {
    let acts = collect_activations(model, samples)?;
    mean_shift_from(&acts, model.config().n_layers)
}

pub(crate) fn mean_shift_from(acts: &Activations, n_layers: usize) -> Result<SteeringBackend> {
    let (nh, nf) = (acts.hallucinated.len(), acts.faithful.len());
    if nh < MIN_CLASS_POSITIONS || nf < MIN_CLASS_POSITIONS {
        return Err(Error::InsufficientCalibration(format!(
            "{nh} hallucinated and {nf} faithful positions, need {MIN_CLASS_POSITIONS} of each"
        )));
    }
    let mut directions = Vec::with_capacity(n_layers);
    let mut scales = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let h: Vec<&Vec<f64>> = acts.hallucinated.iter().map(|(_, v)| &v[l]).collect();
        let f: Vec<&Vec<f64>> = acts.faithful.iter().map(|(_, v)| &v[l]).collect();
        let sigma = h.iter().chain(&f).map(|x| norm(x)).sum::<f64>() / (nh + nf) as f64;
        let diff: Vec<f64> = class_mean(&h).iter().zip(class_mean(&f)).map(|(a, b)| a - b).collect();
        let n = norm(&diff);
        if n <= 1e-12 * sigma.max(f64::MIN_POSITIVE) {
            log::warn!("layer {l}: class means coincide, layer is inert");
            directions.push(vec![0.0; diff.len()]);
        } else {
            directions.push(diff.iter().map(|x| x / n).collect());
        }
        scales.push(sigma);
    }
    Ok(SteeringBackend::MeanShift { directions, scales })
}

/// Per layer, the top-`k` left singular vectors of the matrix whose columns
/// are paired differences `h_hallucinated − h_faithful`. Pairs are formed
/// within a granularity, cycling through the faithful positions.
pub fn fit_null_space(model: &Model, samples: &[Sample], k: usize) -> Result<SteeringBackend> {
    let acts = collect_activations(model, samples)?;
    null_space_from(&acts, model.config().n_layers, model.config().d_model, k)
}

pub(crate) fn null_space_from(
    acts: &Activations,
    n_layers: usize,
    d_model: usize,
    k: usize,
) -> Result<SteeringBackend> {
    if k == 0 {
        return Err(Error::Config("null-space rank k must be >= 1".into()));
    }
    let mut pairs: Vec<(&LayerActs, &LayerActs)> = Vec::new();
    for g in [Granularity::Token, Granularity::Sentence] {
        let h: Vec<_> = acts
            .hallucinated
            .iter()
            .filter(|(x, _)| *x == g)
            .map(|(_, v)| v)
            .collect();
        let f: Vec<_> = acts.faithful.iter().filter(|(x, _)| *x == g).map(|(_, v)| v).collect();
        if f.is_empty() {
            continue;
        }
        pairs.extend(h.iter().enumerate().map(|(i, hv)| (*hv, f[i % f.len()])));
    }
    if pairs.len() < k {
        return Err(Error::InsufficientCalibration(format!(
            "{} hallucinated/faithful pairs, need at least k = {k}",
            pairs.len()
        )));
    }
    let bases = (0..n_layers)
        .map(|l| {
            let cols: Vec<Vec<f64>> = pairs
                .iter()
                .map(|(h, f)| h[l].iter().zip(&f[l]).map(|(a, b)| a - b).collect())
                .collect();
            let svd = thin_svd_left(&cols, k, 1e-8, 10 * d_model);
            if svd.u.len() < k {
                log::warn!("layer {l}: difference rank {} < k = {k}, reducing k", svd.u.len());
            }
            svd.u
        })
        .collect();
    Ok(SteeringBackend::NullSpace { bases })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot;

    fn acts(h: Vec<Vec<f64>>, f: Vec<Vec<f64>>) -> Activations {
        Activations {
            hallucinated: h.into_iter().map(|v| (Granularity::Token, vec![v])).collect(),
            faithful: f.into_iter().map(|v| (Granularity::Token, vec![v])).collect(),
        }
    }

    #[test]
    fn too_few_positions() {
        let a = acts(vec![vec![1.0, 0.0]; 4], vec![vec![0.0, 1.0]; 9]);
        assert!(matches!(mean_shift_from(&a, 1), Err(Error::InsufficientCalibration(_))));
    }

    #[test]
    fn identical_means_are_inert() {
        let a = acts(vec![vec![1.0, 2.0]; 5], vec![vec![1.0, 2.0]; 5]);
        match mean_shift_from(&a, 1).unwrap() {
            SteeringBackend::MeanShift { directions, scales } => {
                assert_eq!(directions[0], vec![0.0, 0.0]);
                assert!((scales[0] - 5f64.sqrt()).abs() < 1e-12);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn doubled_activations_keep_relative_displacement() {
        let h: Vec<Vec<f64>> = (0..6).map(|i| vec![1.0 + i as f64, 0.5, -0.2 * i as f64]).collect();
        let f: Vec<Vec<f64>> = (0..7).map(|i| vec![0.3, 1.0 - 0.1 * i as f64, 0.4]).collect();
        let double = |v: &Vec<Vec<f64>>| v.iter().map(|x| x.iter().map(|y| 2.0 * y).collect()).collect();
        let b1 = mean_shift_from(&acts(h.clone(), f.clone()), 1).unwrap();
        let b2 = mean_shift_from(&acts(double(&h), double(&f)), 1).unwrap();
        let x = vec![0.7, -1.1, 2.0];
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let (mut y1, mut y2) = (x.clone(), x2.clone());
        b1.steer(0, 1.3, &mut y1);
        b2.steer(0, 1.3, &mut y2);
        for i in 0..3 {
            assert!((y1[i] / norm(&x) - y2[i] / norm(&x2)).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_one_differences_span_one_direction() {
        let dir = vec![0.6, 0.0, 0.8, 0.0];
        let f: Vec<Vec<f64>> = (0..3).map(|i| vec![i as f64, 1.0, 0.0, -1.0]).collect();
        let h: Vec<Vec<f64>> = (0..6)
            .map(|i| f[i % 3].iter().zip(&dir).map(|(a, d)| a + 2.0 * d).collect())
            .collect();
        let b = null_space_from(&acts(h, f), 1, 4, 1).unwrap();
        let SteeringBackend::NullSpace { bases } = &b else {
            unreachable!()
        };
        assert_eq!(bases[0].len(), 1);
        assert!((dot(&bases[0][0], &dir).abs() - 1.0).abs() < 1e-9);
        let x = vec![1.0, -2.0, 0.5, 3.0];
        let mut once = x.clone();
        b.steer(0, 1.0, &mut once);
        let mut twice = once.clone();
        b.steer(0, 1.0, &mut twice);
        assert!(once.iter().zip(&twice).all(|(a, c)| (a - c).abs() <= 1e-6));
        // k above the rank is reduced rather than padded
        let b3 = null_space_from(&acts(vec![vec![1.0, 0.0, 0.0, 0.0]; 5], vec![vec![0.0; 4]; 5]), 1, 4, 3).unwrap();
        assert_eq!(b3.rank(), 1);
    }

    #[test]
    fn vector_inside_subspace_is_removed() {
        let b = SteeringBackend::NullSpace {
            bases: vec![vec![vec![0.6, 0.8, 0.0]]],
        };
        let mut h = vec![1.2, 1.6, 0.0];
        b.steer(0, 1.0, &mut h);
        assert!(h.iter().all(|x| x.abs() < 1e-15));
    }
}
