//! TOML experiment configuration.
//!
//! ```toml
//! data = "tasks/manifest.toml"
//! out = "runs/er-seed0"
//! seed = 0
//! order = [2, 0, 1]
//!
//! [strategy]
//! name = "er"
//!
//! [memory]
//! capacity = 500
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::SKEW_ALPHA;
use crate::error::{Error, Result};
use crate::model::Activation;
use crate::optim::OptimizerKind;
use crate::runner::{ModelConfig, PairwiseConfig, RunConfig, TrainConfig};
use crate::strategies::StrategyConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub head_init_std: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            hidden: m.hidden,
            activation: m.activation,
            head_init_std: m.head_init_std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub steps_per_task: usize,
    pub trunk_lr_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        OptimSection {
            optimizer: t.optimizer,
            lr: t.lr,
            batch_size: t.batch_size,
            steps_per_task: t.steps_per_task,
            trunk_lr_scale: t.trunk_lr_scale,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySection {
    pub name: String,
}

impl Default for StrategySection {
    fn default() -> Self {
        StrategySection {
            name: "finetune".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EwcSection {
    pub lambda: f64,
    pub fisher_samples: Option<usize>,
}

impl Default for EwcSection {
    fn default() -> Self {
        EwcSection {
            lambda: 400.0,
            fisher_samples: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LwfSection {
    pub lambda: f64,
    pub temperature: f64,
}

impl Default for LwfSection {
    fn default() -> Self {
        LwfSection {
            lambda: 1.0,
            temperature: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemorySection {
    /// Samples kept per finished task.
    pub capacity: usize,
}

impl Default for MemorySection {
    fn default() -> Self {
        MemorySection { capacity: 500 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErSection {
    /// Current-task samples per replayed sample.
    pub ratio: usize,
}

impl Default for ErSection {
    fn default() -> Self {
        ErSection { ratio: 3 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgemSection {
    /// Memory samples behind each reference gradient; defaults to the batch size.
    pub reference_batch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub orders: Vec<Vec<usize>>,
    pub seeds: Vec<u64>,
    /// Strategy names to sweep; empty means `strategy.name` only.
    pub strategies: Vec<String>,
    /// Also sweep the Fixed and Joint baselines.
    pub baselines: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            orders: Vec::new(),
            seeds: vec![0],
            strategies: Vec::new(),
            baselines: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingsSection {
    /// Word-vector text file used for semantic backward transfer.
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub alpha: f64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection { alpha: SKEW_ALPHA }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Task manifest.
    pub data: PathBuf,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub order: Option<Vec<usize>>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub optim: OptimSection,
    #[serde(default)]
    pub strategy: StrategySection,
    #[serde(default)]
    pub ewc: EwcSection,
    #[serde(default)]
    pub lwf: LwfSection,
    #[serde(default)]
    pub memory: MemorySection,
    #[serde(default)]
    pub er: ErSection,
    #[serde(default)]
    pub agem: AgemSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub pairwise: PairwiseConfig,
    #[serde(default)]
    pub embeddings: EmbeddingsSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

pub const STRATEGY_NAMES: [&str; 6] = ["finetune", "ewc", "lwf", "er", "agem", "pseudo"];

impl ExperimentConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", base.display())))?;
        let dir = base.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        resolve(&mut cfg.data);
        resolve(&mut cfg.out);
        if let Some(p) = cfg.embeddings.path.as_mut() {
            resolve(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    fn validate(&self) -> Result<()> {
        if !self.data.exists() {
            return Err(Error::Config(format!("data manifest {} does not exist", self.data.display())));
        }
        if let Some(p) = &self.embeddings.path {
            if !p.exists() {
                return Err(Error::Config(format!("embeddings file {} does not exist", p.display())));
            }
        }
        self.strategy_config(&self.strategy.name)?;
        for name in &self.sweep.strategies {
            self.strategy_config(name)?;
        }
        self.run_config()?.strategy.build(0)?;
        Ok(())
    }

    /// Hyperparameters of the named strategy, drawn from its sections.
    pub fn strategy_config(&self, name: &str) -> Result<StrategyConfig> {
        Ok(match name {
            "finetune" => StrategyConfig::Finetune,
            "ewc" => StrategyConfig::Ewc {
                lambda: self.ewc.lambda,
                fisher_samples: self.ewc.fisher_samples,
            },
            "lwf" => StrategyConfig::Lwf {
                lambda: self.lwf.lambda,
                temperature: self.lwf.temperature,
            },
            "er" => StrategyConfig::Er {
                capacity: self.memory.capacity,
                ratio: self.er.ratio,
            },
            "agem" => StrategyConfig::Agem {
                capacity: self.memory.capacity,
                reference_batch: self.agem.reference_batch.unwrap_or(self.optim.batch_size),
            },
            "pseudo" => StrategyConfig::Pseudo {
                capacity: self.memory.capacity,
                ratio: self.er.ratio,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown strategy `{other}`; expected one of {}",
                    STRATEGY_NAMES.join(", ")
                )))
            }
        })
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        self.run_config_for(&self.strategy.name)
    }

    pub fn run_config_for(&self, strategy: &str) -> Result<RunConfig> {
        Ok(RunConfig {
            model: ModelConfig {
                hidden: self.model.hidden.clone(),
                activation: self.model.activation,
                head_init_std: self.model.head_init_std,
            },
            train: TrainConfig {
                optimizer: self.optim.optimizer,
                lr: self.optim.lr,
                batch_size: self.optim.batch_size,
                steps_per_task: self.optim.steps_per_task,
                trunk_lr_scale: self.optim.trunk_lr_scale,
                beta1: self.optim.beta1,
                beta2: self.optim.beta2,
                eps: self.optim.eps,
            },
            strategy: self.strategy_config(strategy)?,
            seed: self.seed,
            order: self.order.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_manifest(body: &str) -> (tempfile::TempDir, Result<ExperimentConfig>) {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("manifest.toml"), "").unwrap();
        let path = dir.path().join("exp.toml");
        fs::write(&path, body).unwrap();
        let cfg = ExperimentConfig::load(&path);
        (dir, cfg)
    }

    #[test]
    fn defaults_follow_documented_values() {
        let (dir, cfg) = with_manifest("data = \"manifest.toml\"\n");
        let cfg = cfg.unwrap();
        assert_eq!(cfg.data, dir.path().join("manifest.toml"));
        assert_eq!(cfg.optim.batch_size, 512);
        assert_eq!(cfg.optim.lr, 8e-5);
        assert_eq!(cfg.optim.trunk_lr_scale, 0.1);
        assert_eq!(cfg.ewc.lambda, 400.0);
        assert_eq!(cfg.lwf.lambda, 1.0);
        assert_eq!(cfg.memory.capacity, 500);
        assert_eq!(cfg.er.ratio, 3);
        assert_eq!(cfg.pairwise, PairwiseConfig { steps: 400, batch_size: 512, lr: 5e-5 });
        assert_eq!(cfg.analysis.alpha, 0.99);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let (_d, cfg) = with_manifest("data = \"manifest.toml\"\n[ewc]\nlamda = 3\n");
        assert!(matches!(cfg, Err(Error::Config(m)) if m.contains("lamda")));
    }

    #[test]
    fn missing_manifest_names_the_path() {
        let (_d, cfg) = with_manifest("data = \"nope.toml\"\n");
        assert!(matches!(cfg, Err(Error::Config(m)) if m.contains("nope.toml")));
    }

    #[test]
    fn strategy_sections_feed_the_run() {
        let (_d, cfg) = with_manifest(
            "data = \"manifest.toml\"\nseed = 7\n[strategy]\nname = \"agem\"\n[optim]\nbatch_size = 64\n[memory]\ncapacity = 50\n",
        );
        let run = cfg.unwrap().run_config().unwrap();
        assert_eq!(run.seed, 7);
        assert_eq!(
            run.strategy,
            StrategyConfig::Agem {
                capacity: 50,
                reference_batch: 64
            }
        );
        let (_d, bad) = with_manifest("data = \"manifest.toml\"\n[strategy]\nname = \"gem\"\n");
        assert!(matches!(bad, Err(Error::Config(_))));
    }
}
