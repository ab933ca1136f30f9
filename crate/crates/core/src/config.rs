//! Run configuration: one TOML file whose sections mirror the pipeline stages.
//! Every field is optional and falls back to its default.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribution::{AttributionMode, IndicatorConfig};
use crate::dataset::DatasetParams;
use crate::error::{Error, Result};
use crate::eval::{BenchmarkConfig, DEFAULT_RS_GRID, MIN_BENCH_TOKENS};
use crate::model::{ModelConfig, PlantedSpec, TokenId};
use crate::steering::SteeringPolicyConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedSection {
    /// Build a random model without a circuit when false.
    pub enabled: bool,
    pub seed: u64,
    pub hallucination_layers: Vec<usize>,
    pub trigger_token: TokenId,
    pub spurious_token: TokenId,
    pub strength: f64,
    pub task_layers: Vec<usize>,
    pub max_tries: usize,
}

impl Default for PlantedSection {
    fn default() -> Self {
        PlantedSection {
            enabled: true,
            seed: 0,
            hallucination_layers: vec![3],
            trigger_token: 10,
            spurious_token: 13,
            strength: 4.0,
            task_layers: vec![1, 6],
            max_tries: 5,
        }
    }
}

impl PlantedSection {
    pub fn spec(&self) -> PlantedSpec {
        PlantedSpec {
            hallucination_layers: self.hallucination_layers.clone(),
            trigger_token: self.trigger_token,
            spurious_token: self.spurious_token,
            strength: self.strength,
            task_layers: self.task_layers.clone(),
        }
    }
}

/// Dataset seed plus the generation parameters, flat in one TOML table.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DatasetSection {
    pub seed: u64,
    #[serde(flatten)]
    pub params: DatasetParams,
}

impl<'de> Deserialize<'de> for DatasetSection {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let mut table = toml::Table::deserialize(d)?;
        let seed = match table.remove("seed") {
            None => 0,
            Some(v) => v
                .as_integer()
                .and_then(|i| u64::try_from(i).ok())
                .ok_or_else(|| D::Error::custom("dataset.seed must be a nonnegative integer"))?,
        };
        let params = DatasetParams::deserialize(toml::Value::Table(table)).map_err(D::Error::custom)?;
        Ok(DatasetSection { seed, params })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub mode: AttributionMode,
    /// Seeds of the multi-seed planted benchmark, `0..seeds`.
    pub seeds: u64,
    pub rs_grid: Vec<f64>,
    pub bench_tokens: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            mode: AttributionMode::Both,
            seeds: 20,
            rs_grid: DEFAULT_RS_GRID.to_vec(),
            bench_tokens: 512,
        }
    }
}

/// Artifact locations, relative to `out_dir` unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub out_dir: PathBuf,
    pub model: PathBuf,
    pub samples: PathBuf,
    pub reference: PathBuf,
    pub manifest: PathBuf,
    pub scores: PathBuf,
    pub plan: PathBuf,
    /// Stem of the trade-off report (`.json`, `.txt`, `.csv`).
    pub tradeoff: PathBuf,
    /// Stem of the ablation tables (`.json`, `.txt`, `.csv`).
    pub sweep: PathBuf,
    pub bench: PathBuf,
    pub report: PathBuf,
    pub ledger: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            out_dir: "runs/default".into(),
            model: "model.ltsw".into(),
            samples: "samples.jsonl".into(),
            reference: "reference.jsonl".into(),
            manifest: "manifest.json".into(),
            scores: "scores.json".into(),
            plan: "plan.json".into(),
            tradeoff: "tradeoff".into(),
            sweep: "sweep".into(),
            bench: "bench.json".into(),
            report: "report.txt".into(),
            ledger: "ledger.json".into(),
        }
    }
}

impl PathsSection {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub planted: PlantedSection,
    pub dataset: DatasetSection,
    pub indicator: IndicatorConfig,
    pub policy: SteeringPolicyConfig,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.planted.enabled {
            self.planted.spec().validate(&self.model)?;
        }
        self.dataset.params.validate()?;
        self.indicator.validate()?;
        self.policy.validate()?;
        if self.eval.rs_grid.is_empty() {
            return Err(Error::Config("eval.rs_grid must not be empty".into()));
        }
        if self.eval.rs_grid.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Config("eval.rs_grid values must be finite and >= 0".into()));
        }
        if self.eval.bench_tokens < MIN_BENCH_TOKENS {
            return Err(Error::Config(format!(
                "eval.bench_tokens must be >= {MIN_BENCH_TOKENS}"
            )));
        }
        Ok(())
    }

    /// Multi-seed planted benchmark derived from this configuration.
    pub fn benchmark(&self) -> BenchmarkConfig {
        BenchmarkConfig {
            model: self.model,
            strength: self.planted.strength,
            task_layers: self.planted.task_layers.clone(),
            candidate_layers: Vec::new(),
            dataset: self.dataset.params.clone(),
            indicator: self.indicator.clone(),
            policy: self.policy.clone(),
            mode: self.eval.mode,
            max_tries: self.planted.max_tries,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::steering::DEFAULT_LAMBDA;

    #[test]
    fn golden_defaults() {
        let cfg = RunConfig::default();
        let v: toml::Value = toml::from_str(&cfg.to_toml()).unwrap();
        let f = |sec: &str, key: &str| v[sec][key].clone();
        assert_eq!(f("indicator", "lambda_cue").as_float(), Some(1.0));
        assert_eq!(f("indicator", "lambda_pos").as_float(), Some(1.0));
        assert_eq!(f("indicator", "lambda_hall").as_float(), Some(1.0));
        assert_eq!(f("policy", "r_s").as_float(), Some(0.5));
        assert_eq!(f("dataset", "n_token").as_integer(), Some(100));
        assert_eq!(f("dataset", "n_sentence").as_integer(), Some(100));
        let rs: Vec<f64> = v["eval"]["rs_grid"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_float().unwrap())
            .collect();
        assert_eq!(rs, vec![0.0, 0.3, 0.5, 0.7, 0.9]);
        cfg.validate().unwrap();
    }

    #[test]
    fn empty_file_is_default_and_roundtrips() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = RunConfig::from_toml("[dataset]\nseed = 9\nn_token = 40\n[policy]\nr_s = 0.7\n").unwrap();
        assert_eq!(cfg.dataset.seed, 9);
        assert_eq!(cfg.dataset.params.n_token, 40);
        assert_eq!(cfg.dataset.params.n_sentence, 100);
        assert_eq!(cfg.policy.r_s, 0.7);
        assert_eq!(cfg.policy.lambda, DEFAULT_LAMBDA);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(
            RunConfig::from_toml("[policy]\nrs = 1.0\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("[dataset]\nbogus = 1\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("[policy]\nk = 0\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("[eval]\nrs_grid = []\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("[planted]\nhallucination_layers = [1]\n"),
            Err(Error::Config(_))
        ));
    }
}
