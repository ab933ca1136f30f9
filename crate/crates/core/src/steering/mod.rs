//! Layerwise steering plans: hard sparsification of layer scores against
//! `τ = r_s · mean(s)`, soft weighting by normalized surviving scores, and
//! two backends that edit the block output `h_l`.

mod fit;
mod plan_io;

use serde::{Deserialize, Serialize};

use crate::attribution::LayerScores;
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::model::ForwardHook;

pub use fit::{collect_activations, fit_mean_shift, fit_null_space, Activations, MIN_CLASS_POSITIONS};
pub use plan_io::{load_plan, save_plan, PlanFile, PLAN_MAGIC_PREFIX};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gating {
    Hard,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    MeanShift,
    NullSpace,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::MeanShift => "mean_shift",
            BackendKind::NullSpace => "null_space",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteeringPolicyConfig {
    pub r_s: f64,
    pub lambda: f64,
    pub gating: Gating,
    pub soft_quantile: f64,
    pub backend: BackendKind,
    pub k: usize,
}

/// With the mean-shift scale equal to the mean activation norm, the top
/// masked layer is displaced by roughly `2λ` activation norms.
pub const DEFAULT_LAMBDA: f64 = 0.2;

impl Default for SteeringPolicyConfig {
    fn default() -> Self {
        SteeringPolicyConfig {
            r_s: 0.5,
            lambda: DEFAULT_LAMBDA,
            gating: Gating::Hard,
            soft_quantile: 0.5,
            backend: BackendKind::MeanShift,
            k: 4,
        }
    }
}

impl SteeringPolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_s.is_finite() && self.r_s >= 0.0) {
            return Err(Error::Config(format!("r_s must be finite and >= 0, got {}", self.r_s)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.soft_quantile > 0.0 && self.soft_quantile < 1.0) {
            return Err(Error::Config(format!(
                "soft_quantile must lie in (0, 1), got {}",
                self.soft_quantile
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("null-space rank k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Fitted per-layer edit rule.
#[derive(Debug, Clone, PartialEq)]
pub enum SteeringBackend {
    /// `f(h, λ) = h − λ σ_l v_l`; a zero `v_l` marks an inert layer.
    MeanShift {
        directions: Vec<Vec<f64>>,
        scales: Vec<f64>,
    },
    /// `f(h, λ) = h − min(λ, 1) U_l U_lᵀ h` with orthonormal columns `U_l`.
    NullSpace { bases: Vec<Vec<Vec<f64>>> },
}

impl SteeringBackend {
    pub fn kind(&self) -> BackendKind {
        match self {
            SteeringBackend::MeanShift { .. } => BackendKind::MeanShift,
            SteeringBackend::NullSpace { .. } => BackendKind::NullSpace,
        }
    }

    pub fn n_layers(&self) -> usize {
        match self {
            SteeringBackend::MeanShift { directions, .. } => directions.len(),
            SteeringBackend::NullSpace { bases } => bases.len(),
        }
    }

    /// Largest per-layer rank (1 for mean-shift).
    pub fn rank(&self) -> usize {
        match self {
            SteeringBackend::MeanShift { .. } => 1,
            SteeringBackend::NullSpace { bases } => bases.iter().map(Vec::len).max().unwrap_or(0),
        }
    }

    /// A backend that never changes anything, for `L` layers of width `d`.
    pub fn inert(n_layers: usize, d_model: usize) -> Self {
        SteeringBackend::MeanShift {
            directions: vec![vec![0.0; d_model]; n_layers],
            scales: vec![0.0; n_layers],
        }
    }

    /// Checks unit directions and orthonormal bases.
    pub fn validate(&self) -> Result<()> {
        match self {
            SteeringBackend::MeanShift { directions, scales } => {
                if directions.len() != scales.len() {
                    return Err(Error::Validation("direction and scale counts differ".into()));
                }
                for (l, (v, s)) in directions.iter().zip(scales).enumerate() {
                    let n = dot(v, v).sqrt();
                    if !(n == 0.0 || (n - 1.0).abs() <= 1e-9) || !s.is_finite() || *s < 0.0 {
                        return Err(Error::Validation(format!("layer {l}: direction norm {n}, scale {s}")));
                    }
                }
            }
            SteeringBackend::NullSpace { bases } => {
                for (l, u) in bases.iter().enumerate() {
                    for i in 0..u.len() {
                        for j in 0..=i {
                            let want = if i == j { 1.0 } else { 0.0 };
                            if (dot(&u[i], &u[j]) - want).abs() > 1e-6 {
                                return Err(Error::Validation(format!("layer {l}: basis not orthonormal")));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// `f(h, λ)` at `layer`, in place. Identity when `λ = 0`.
    pub fn steer(&self, layer: usize, lambda: f64, h: &mut [f64]) {
        if lambda == 0.0 {
            return;
        }
        match self {
            SteeringBackend::MeanShift { directions, scales } => {
                let c = lambda * scales[layer];
                for (x, v) in h.iter_mut().zip(&directions[layer]) {
                    *x -= c * v;
                }
            }
            SteeringBackend::NullSpace { bases } => {
                let c = lambda.min(1.0);
                let u = &bases[layer];
                let coef: Vec<f64> = u.iter().map(|col| c * dot(col, h)).collect();
                for (col, a) in u.iter().zip(coef) {
                    for (x, v) in h.iter_mut().zip(col) {
                        *x -= a * v;
                    }
                }
            }
        }
    }
}

/// Layer mask and per-layer intensities for one score vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub mask: Vec<bool>,
    pub intensities: Vec<f64>,
    pub degenerate: bool,
    /// Negative scores clamped to zero before thresholding.
    pub clamped_negative: usize,
}

/// Hard sparsification plus soft weighting of a score vector.
pub fn allocate(scores: &[f64], r_s: f64, lambda: f64) -> Result<Allocation> {
    if scores.is_empty() {
        return Err(Error::Input("empty score vector".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Input("non-finite layer score".into()));
    }
    let clamped_negative = scores.iter().filter(|&&s| s < 0.0).count();
    let s: Vec<f64> = scores.iter().map(|&x| x.max(0.0)).collect();
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    let tau = r_s * mean;
    let mask: Vec<bool> = s.iter().map(|&x| x >= tau).collect();
    let masked: Vec<f64> = s.iter().zip(&mask).map(|(&x, &m)| if m { x } else { 0.0 }).collect();
    let total: f64 = masked.iter().sum();
    if total == 0.0 {
        return Ok(Allocation {
            mask,
            intensities: vec![0.0; s.len()],
            degenerate: true,
            clamped_negative,
        });
    }
    let intensities = masked
        .iter()
        .zip(&mask)
        .map(|(&x, &m)| lambda * f64::from(u8::from(m)) + lambda * (x / total))
        .collect();
    Ok(Allocation {
        mask,
        intensities,
        degenerate: false,
        clamped_negative,
    })
}

/// Effective `r_s` under soft gating: the `q`-quantile (linear interpolation
/// between order statistics) of `s_l / mean(s)`, clamped to `[0, 2]`.
pub fn soft_gate_rs(scores: &[f64], q: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Input("empty score vector".into()));
    }
    let s: Vec<f64> = scores.iter().map(|&x| x.max(0.0)).collect();
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    if mean == 0.0 || s.iter().all(|&x| x == s[0]) {
        return Ok(1.0);
    }
    let mut ratios: Vec<f64> = s.iter().map(|x| x / mean).collect();
    ratios.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (ratios.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let v = ratios[lo] + (pos - lo as f64) * (ratios[hi] - ratios[lo]);
    Ok(v.clamp(0.0, 2.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringPlan {
    pub mask: Vec<bool>,
    pub intensities: Vec<f64>,
    pub backend: SteeringBackend,
    pub policy: SteeringPolicyConfig,
    /// `r_s` actually used (differs from `policy.r_s` under soft gating).
    pub r_s_effective: f64,
    pub degenerate: bool,
    pub clamped_negative: usize,
    pub scores_hash: String,
}

/// Hex SHA-256 of the canonical JSON of a score file.
pub fn scores_hash(scores: &LayerScores) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_vec(scores).expect("scores serialize");
    hex::encode(Sha256::digest(json))
}

pub fn make_plan(scores: &LayerScores, cfg: &SteeringPolicyConfig, backend: SteeringBackend) -> Result<SteeringPlan> {
    cfg.validate()?;
    if scores.scores.len() != backend.n_layers() {
        return Err(Error::Input(format!(
            "{} layer scores for a backend of {} layers",
            scores.scores.len(),
            backend.n_layers()
        )));
    }
    if backend.kind() != cfg.backend {
        return Err(Error::Input(format!(
            "policy asks for {} but the backend is {}",
            cfg.backend.as_str(),
            backend.kind().as_str()
        )));
    }
    let r_s = match cfg.gating {
        Gating::Hard => cfg.r_s,
        Gating::Soft => soft_gate_rs(&scores.scores, cfg.soft_quantile)?,
    };
    let a = allocate(&scores.scores, r_s, cfg.lambda)?;
    if a.degenerate {
        log::warn!("degenerate steering plan: no surviving layer has a positive score");
    }
    if a.clamped_negative > 0 {
        log::info!("clamped {} negative layer scores to zero", a.clamped_negative);
    }
    Ok(SteeringPlan {
        mask: a.mask,
        intensities: a.intensities,
        backend,
        policy: cfg.clone(),
        r_s_effective: r_s,
        degenerate: a.degenerate,
        clamped_negative: a.clamped_negative,
        scores_hash: scores_hash(scores),
    })
}

impl SteeringPlan {
    pub fn n_layers(&self) -> usize {
        self.intensities.len()
    }

    pub fn total_intensity(&self) -> f64 {
        self.intensities.iter().sum()
    }

    /// Every layer at `total / L`: the same total dose spread evenly.
    pub fn uniform(total: f64, backend: SteeringBackend, policy: SteeringPolicyConfig) -> Self {
        let l = backend.n_layers();
        SteeringPlan {
            mask: vec![true; l],
            intensities: vec![total / l as f64; l],
            backend,
            r_s_effective: 0.0,
            degenerate: false,
            clamped_negative: 0,
            scores_hash: String::new(),
            policy,
        }
    }

    /// Same allocation, every intensity set to zero.
    pub fn zeroed(&self) -> Self {
        SteeringPlan {
            intensities: vec![0.0; self.n_layers()],
            ..self.clone()
        }
    }

    /// Applies the plan's edit at `layer` and returns the steered vector.
    pub fn apply(&self, h: &[f64], layer: usize) -> Vec<f64> {
        let mut out = h.to_vec();
        self.backend.steer(layer, self.intensities[layer], &mut out);
        out
    }

    pub fn check_layers(&self, n_layers: usize) -> Result<()> {
        if self.n_layers() != n_layers || self.backend.n_layers() != n_layers {
            return Err(Error::Input(format!(
                "plan covers {} layers, model has {n_layers}",
                self.n_layers()
            )));
        }
        Ok(())
    }
}

impl ForwardHook for SteeringPlan {
    fn block_output(&self, layer: usize, _pos: usize, h: &mut [f64]) {
        self.backend.steer(layer, self.intensities[layer], h);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn hand_executed_allocations() {
        let a = allocate(&[4.0, 2.0, 1.0, 1.0], 0.5, 1.0).unwrap();
        assert_eq!(a.mask, vec![true; 4]);
        assert!(close(&a.intensities, &[1.5, 1.25, 1.125, 1.125], 1e-15));
        let b = allocate(&[4.0, 2.0, 1.0, 1.0], 1.0, 1.0).unwrap();
        assert_eq!(b.mask, vec![true, true, false, false]);
        assert!(close(&b.intensities, &[5.0 / 3.0, 4.0 / 3.0, 0.0, 0.0], 1e-15));
        let c = allocate(&[0.7; 4], 1.0, 1.0).unwrap();
        assert!(close(&c.intensities, &[1.25; 4], 1e-15));
    }

    #[test]
    fn zero_scores_are_degenerate() {
        let a = allocate(&[0.0, 0.0, 0.0], 0.5, 1.0).unwrap();
        assert!(a.degenerate);
        assert_eq!(a.intensities, vec![0.0; 3]);
        let b = allocate(&[-1.0, 2.0], 0.5, 1.0).unwrap();
        assert_eq!(b.clamped_negative, 1);
        assert_eq!(b.mask, vec![false, true]);
        assert!(close(&b.intensities, &[0.0, 2.0], 0.0));
    }

    #[test]
    fn soft_gate_quantiles() {
        assert_eq!(soft_gate_rs(&[3.0; 5], 0.5).unwrap(), 1.0);
        assert!((soft_gate_rs(&[4.0, 2.0, 1.0, 1.0], 0.5).unwrap() - 0.75).abs() < 1e-15);
        let top = soft_gate_rs(&[4.0, 2.0, 1.0, 1.0], 1.0 - 1e-9).unwrap();
        assert!((top - 2.0).abs() < 1e-8);
        assert_eq!(soft_gate_rs(&[9.0, 0.0, 0.0, 0.0], 0.9).unwrap(), 2.0);
        let a = allocate(&[4.0, 2.0, 1.0, 1.0], top, 1.0).unwrap();
        assert_eq!(a.mask, vec![true, false, false, false]);
    }

    #[test]
    fn mean_shift_and_projection_by_hand() {
        let mut e1 = vec![0.0; 4];
        e1[0] = 1.0;
        let ms = SteeringBackend::MeanShift {
            directions: vec![e1.clone()],
            scales: vec![1.0],
        };
        let mut h = vec![2.0, 0.0, 0.0, 0.0];
        ms.steer(0, 1.5, &mut h);
        assert_eq!(h, vec![0.5, 0.0, 0.0, 0.0]);
        let ns = SteeringBackend::NullSpace { bases: vec![vec![e1]] };
        let mut h = vec![3.0, 4.0, 0.0, 0.0];
        ns.steer(0, 2.0, &mut h);
        assert_eq!(h, vec![0.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_intensity_is_bitwise_identity() {
        let ms = SteeringBackend::MeanShift {
            directions: vec![vec![0.6, 0.8]],
            scales: vec![3.0],
        };
        let plan = SteeringPlan::uniform(0.0, ms, SteeringPolicyConfig::default());
        let h = vec![0.1 + 0.2, -7.3e-9];
        assert_eq!(plan.apply(&h, 0), h);
    }

    #[test]
    fn plan_checks_backend() {
        let scores = LayerScores {
            mode: crate::attribution::AttributionMode::Both,
            scores: vec![1.0, 2.0],
            n_samples: 1,
            dropped_zero_vectors: 0,
            indicator_config: Default::default(),
            model_hash: String::new(),
        };
        let cfg = SteeringPolicyConfig {
            lambda: 1.0,
            ..Default::default()
        };
        assert!(make_plan(&scores, &cfg, SteeringBackend::inert(3, 4)).is_err());
        let ns = SteeringBackend::NullSpace { bases: vec![vec![]; 2] };
        assert!(make_plan(&scores, &cfg, ns).is_err());
        let p = make_plan(&scores, &cfg, SteeringBackend::inert(2, 4)).unwrap();
        assert_eq!(p.mask, vec![true, true]);
        assert!((p.total_intensity() - 3.0).abs() < 1e-15);
        assert_eq!(p.scores_hash.len(), 64);
    }
}
