//! JSON run configuration. Every section and field is optional; missing
//! values fall back to the published recipe and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use uniinit::experiments::{DiagnosticConfig, FinetuneConfig, InitScheme, PretrainConfig};
use uniinit::losses::LossConfig;
use uniinit::mlp::Architecture;

use crate::CliError;

pub const MNIST_DIR_ENV: &str = "UNIINIT_MNIST_DIR";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub arch: ArchSection,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub diagnose: DiagnoseSection,
    pub data: DataSection,
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSection {
    pub dims: Vec<usize>,
}

impl Default for ArchSection {
    fn default() -> Self {
        ArchSection {
            dims: vec![784, 392, 392, 392, 2],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PretrainMode {
    Ours,
    RandomLabel,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum InitName {
    Xavier,
    He,
}

impl From<InitName> for InitScheme {
    fn from(n: InitName) -> Self {
        match n {
            InitName::Xavier => InitScheme::Xavier,
            InitName::He => InitScheme::He,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub mode: PretrainMode,
    pub init: InitName,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub n_perturb: usize,
    pub n_uniform: usize,
    pub s: f64,
    pub lambda: f64,
    pub xi: f64,
    pub window: usize,
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        PretrainSection {
            mode: PretrainMode::Ours,
            init: InitName::Xavier,
            lr: p.lr,
            epochs: p.epochs,
            batch: p.batch_size,
            n_perturb: p.loss.n_perturb,
            n_uniform: p.loss.n_uniform,
            s: p.loss.scale,
            lambda: p.loss.lambda,
            xi: p.loss.xi,
            window: p.window,
            max_steps: p.max_steps,
            seed: p.seed,
        }
    }
}

impl PretrainSection {
    pub fn to_config(&self) -> PretrainConfig {
        PretrainConfig {
            lr: self.lr,
            batch_size: self.batch,
            epochs: self.epochs,
            window: self.window,
            loss: LossConfig {
                lambda: self.lambda,
                xi: self.xi,
                n_perturb: self.n_perturb,
                n_uniform: self.n_uniform,
                scale: self.s,
            },
            seed: self.seed,
            max_steps: self.max_steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    #[serde(rename = "N")]
    pub n: Vec<usize>,
    /// Tasks per seed.
    pub tasks: usize,
    /// Number of seeds, counted up from `seed`.
    pub seeds: usize,
    pub seed: u64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let f = FinetuneConfig::default();
        FinetuneSection {
            lr: f.lr,
            epochs: f.epochs,
            batch: f.batch_size,
            n: vec![5],
            tasks: 20,
            seeds: 4,
            seed: f.seed,
        }
    }
}

impl FinetuneSection {
    pub fn to_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            lr: self.lr,
            batch_size: self.batch,
            epochs: self.epochs,
            seed: self.seed,
        }
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed + i).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseSection {
    pub batches: usize,
    pub batch_size: usize,
    pub n_perturb: usize,
    pub seed: u64,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        let d = DiagnosticConfig::default();
        DiagnoseSection {
            batches: d.batches,
            batch_size: d.batch_size,
            n_perturb: d.n_perturb,
            seed: d.seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Directory holding the four MNIST IDX files (optionally gzipped).
    pub dir: Option<PathBuf>,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Pre-train and diagnose on the first `train_limit` training examples.
    pub train_limit: Option<usize>,
}

impl DataSection {
    pub fn resolved_dir(&self) -> PathBuf {
        self.dir
            .clone()
            .or_else(|| std::env::var_os(MNIST_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data/mnist"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn architecture(&self) -> Result<Architecture, CliError> {
        Architecture::classifier(&self.arch.dims).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.architecture()?;
        let lib = |r: uniinit::Result<()>| r.map_err(|e| CliError::Config(e.to_string()));
        lib(self.pretrain.to_config().validate())?;
        lib(self.finetune.to_config().validate())?;
        let f = &self.finetune;
        if f.n.is_empty() || f.n.iter().any(|&n| n == 0 || n % 5 != 0) {
            return Err(CliError::Config(format!(
                "finetune.N must list positive multiples of 5, got {:?}",
                f.n
            )));
        }
        if f.tasks == 0 || f.seeds == 0 {
            return Err(CliError::Config(
                "finetune.tasks and finetune.seeds must be positive".into(),
            ));
        }
        let d = &self.diagnose;
        if d.batches == 0 || d.batch_size == 0 || d.n_perturb == 0 {
            return Err(CliError::Config("diagnose settings must be positive".into()));
        }
        if self.data.train_limit == Some(0) {
            return Err(CliError::Config("data.train_limit must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_recipe_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.arch.dims, vec![784, 392, 392, 392, 2]);
        assert_eq!((c.pretrain.lr, c.pretrain.batch, c.pretrain.epochs), (2e-4, 32, 5));
        assert_eq!(
            (c.pretrain.n_perturb, c.pretrain.n_uniform, c.pretrain.window),
            (256, 256, 100)
        );
        assert_eq!((c.pretrain.lambda, c.pretrain.xi), (0.4, 1.0));
        assert_eq!(c.pretrain.s, 0.5f64.sqrt());
        assert_eq!((c.finetune.lr, c.finetune.batch, c.finetune.epochs), (1e-3, 50, 10));
        assert_eq!(
            (c.diagnose.batches, c.diagnose.batch_size, c.diagnose.n_perturb),
            (128, 32, 256)
        );
        c.validate().unwrap();
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c =
            RunConfig::from_json(r#"{"pretrain": {"mode": "random-label", "lambda": 0}, "finetune": {"N": [5, 10]}}"#)
                .unwrap();
        assert_eq!(c.pretrain.mode, PretrainMode::RandomLabel);
        assert_eq!(c.pretrain.lambda, 0.0);
        assert_eq!(c.pretrain.xi, 1.0);
        assert_eq!(c.finetune.n, vec![5, 10]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"pretrain": {"learning_rate": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"extra": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"pretrain": {"mode": "magic"}}"#).is_err());
    }

    #[test]
    fn validation() {
        let mut c = RunConfig::default();
        c.finetune.n = vec![7];
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.arch.dims = vec![784, 1];
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.pretrain.n_perturb = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let mut c = RunConfig::default();
        c.pretrain.max_steps = Some(7);
        c.data.dir = Some("x".into());
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }
}
