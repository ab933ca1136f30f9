use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{attribute_pool, AttributionMode, IndicatorConfig, LayerScores};
use crate::dataset::{build_dataset, Dataset, DatasetParams, Sample};
use crate::error::{Error, Result};
use crate::model::vocab::WorldLayout;
use crate::model::{build_planted_with_retry, Model, ModelConfig, PlantedSpec};
use crate::steering::{
    fit_mean_shift, fit_null_space, make_plan, BackendKind, SteeringBackend, SteeringPlan, SteeringPolicyConfig,
};

use super::tradeoff::{run_tradeoff, EvalSet, TradeoffRow};

/// One planted benchmark instance per seed: a single hallucination layer
/// drawn from `candidate_layers`, random trigger and spurious objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub model: ModelConfig,
    pub strength: f64,
    pub task_layers: Vec<usize>,
    /// Empty means every layer outside `task_layers`.
    pub candidate_layers: Vec<usize>,
    pub dataset: DatasetParams,
    pub indicator: IndicatorConfig,
    pub policy: SteeringPolicyConfig,
    pub mode: AttributionMode,
    pub max_tries: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            model: ModelConfig::default(),
            strength: 4.0,
            task_layers: vec![1, 6],
            candidate_layers: Vec::new(),
            dataset: DatasetParams::default(),
            indicator: IndicatorConfig::default(),
            policy: SteeringPolicyConfig::default(),
            mode: AttributionMode::Both,
            max_tries: 5,
        }
    }
}

impl BenchmarkConfig {
    pub fn candidates(&self) -> Vec<usize> {
        if self.candidate_layers.is_empty() {
            (0..self.model.n_layers)
                .filter(|l| !self.task_layers.contains(l))
                .collect()
        } else {
            self.candidate_layers.clone()
        }
    }
}

/// Planted spec for `seed`, drawn independently of the weight seed.
pub fn planted_instance(cfg: &BenchmarkConfig, seed: u64) -> Result<PlantedSpec> {
    let layout = WorldLayout::for_vocab(cfg.model.vocab_size)?;
    let objects: Vec<_> = layout.objects().collect();
    if objects.len() < 2 {
        return Err(Error::Config("planted benchmark needs at least two objects".into()));
    }
    let cands = cfg.candidates();
    if cands.is_empty() {
        return Err(Error::Config("no candidate hallucination layers".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = cands[rng.random_range(0..cands.len())];
    let trigger = objects[rng.random_range(0..objects.len())];
    let mut spurious = trigger;
    while spurious == trigger {
        spurious = objects[rng.random_range(0..objects.len())];
    }
    let spec = PlantedSpec {
        hallucination_layers: vec![layer],
        trigger_token: trigger,
        spurious_token: spurious,
        strength: cfg.strength,
        task_layers: cfg.task_layers.clone(),
    };
    spec.validate(&cfg.model)?;
    Ok(spec)
}

/// A built planted model with its dataset.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub planted_layer: usize,
    pub model: Model,
    pub dataset: Dataset,
}

impl SeedRun {
    pub fn prepare(cfg: &BenchmarkConfig, seed: u64) -> Result<Self> {
        let spec = planted_instance(cfg, seed)?;
        let (model, _) = build_planted_with_retry(&cfg.model, &spec, seed, cfg.max_tries)?;
        let dataset = build_dataset(&model, &cfg.dataset, seed)?;
        Ok(SeedRun {
            seed,
            planted_layer: spec.hallucination_layers[0],
            model,
            dataset,
        })
    }

    pub fn calibration(&self) -> Vec<Sample> {
        self.dataset.calibration().cloned().collect()
    }

    /// Calibration pool plus the faithful reference pool.
    pub fn fit_samples(&self) -> Vec<Sample> {
        self.dataset
            .calibration()
            .chain(&self.dataset.reference)
            .cloned()
            .collect()
    }

    pub fn scores(&self, mode: AttributionMode, indicator: &IndicatorConfig) -> Result<LayerScores> {
        attribute_pool(&self.model, &self.calibration(), mode, indicator)
    }

    pub fn backend(&self, policy: &SteeringPolicyConfig) -> Result<SteeringBackend> {
        match policy.backend {
            BackendKind::MeanShift => fit_mean_shift(&self.model, &self.fit_samples()),
            BackendKind::NullSpace => fit_null_space(&self.model, &self.fit_samples(), policy.k),
        }
    }

    pub fn eval_set(&self) -> Result<EvalSet> {
        let trigger = self.model.planted().map(|p| p.trigger_token);
        EvalSet::from_samples(&self.dataset.samples, trigger, self.dataset.manifest_max_len())
    }

    /// Layerwise plan from `scores` and the uniform plan at the same total.
    pub fn plans(&self, scores: &LayerScores, policy: &SteeringPolicyConfig) -> Result<(SteeringPlan, SteeringPlan)> {
        let backend = self.backend(policy)?;
        let layerwise = make_plan(scores, policy, backend.clone())?;
        let uniform = SteeringPlan::uniform(layerwise.total_intensity(), backend, policy.clone());
        Ok((uniform, layerwise))
    }

    pub fn tradeoff(&self, cfg: &BenchmarkConfig) -> Result<TradeoffRow> {
        let scores = self.scores(cfg.mode, &cfg.indicator)?;
        let (uniform, layerwise) = self.plans(&scores, &cfg.policy)?;
        run_tradeoff(&self.model, &self.eval_set()?, &uniform, &layerwise, self.seed)
    }
}

impl Dataset {
    fn manifest_max_len(&self) -> usize {
        self.manifest
            .params
            .as_ref()
            .map(|p| p.max_caption_len)
            .unwrap_or_else(|| DatasetParams::default().max_caption_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instance_is_seeded_and_valid() {
        let cfg = BenchmarkConfig::default();
        assert_eq!(cfg.candidates(), vec![0, 2, 3, 4, 5, 7]);
        for seed in 0..50 {
            let a = planted_instance(&cfg, seed).unwrap();
            assert_eq!(a, planted_instance(&cfg, seed).unwrap());
            assert!(cfg.candidates().contains(&a.hallucination_layers[0]));
            assert_ne!(a.trigger_token, a.spurious_token);
            assert!((8..20).contains(&a.trigger_token) && (8..20).contains(&a.spurious_token));
        }
    }
}
