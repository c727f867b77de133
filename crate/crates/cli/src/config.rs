//! Experiment configuration: a single TOML file describing the data source,
//! the strategy grid, training hyperparameters, the leave-one-domain-out
//! plan, and seeds. CLI flags override file values.

use anyhow::{bail, Context, Result};
use debias_core::datagen::{ConfoundSpec, DomainDataset, RotatedSource, RotatedSpec};
use debias_core::losses::{DomainWeighting, LossWeights, TaskMode};
use debias_core::metrics::{C2stConfig, ProbeKind};
use debias_core::trainer::{Strategy, TapSelector, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub const OUT_ENV_VAR: &str = "DEBIAS_DG_OUT";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataConfig {
    Confounded {
        seed: u64,
        #[serde(flatten)]
        spec: ConfoundSpec,
    },
    Rotated {
        seed: u64,
        #[serde(flatten)]
        spec: RotatedSpec,
        /// Optional IDX files; procedural glyphs when absent.
        idx_images: Option<PathBuf>,
        idx_labels: Option<PathBuf>,
    },
    /// Pre-generated dataset directories (one per domain).
    Paths { dirs: Vec<PathBuf> },
}

impl DataConfig {
    pub fn load(&self) -> Result<Vec<DomainDataset>> {
        Ok(match self {
            DataConfig::Confounded { seed, spec } => {
                debias_core::datagen::gen_biased_domains(spec, *seed)?
            }
            DataConfig::Rotated { seed, spec, idx_images, idx_labels } => {
                let source = match (idx_images, idx_labels) {
                    (Some(i), Some(l)) => RotatedSource::IdxFiles { images: i.clone(), labels: l.clone() },
                    (None, None) => RotatedSource::Procedural,
                    _ => bail!("idx_images and idx_labels must be given together"),
                };
                debias_core::datagen::gen_rotated(spec, *seed, &source)?
            }
            DataConfig::Paths { dirs } => {
                let mut out = Vec::with_capacity(dirs.len());
                for d in dirs {
                    out.push(
                        debias_core::datagen::read_dataset(d)
                            .with_context(|| format!("reading dataset {}", d.display()))?,
                    );
                }
                out
            }
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum LodoPlan {
    /// `"all"`: every domain takes one turn as the held-out external set.
    Keyword(String),
    /// Explicit list of held-out domain names.
    Holdouts(Vec<String>),
}

impl Default for LodoPlan {
    fn default() -> Self {
        LodoPlan::Keyword("all".to_string())
    }
}

impl LodoPlan {
    pub fn resolve(&self, datasets: &[DomainDataset]) -> Result<Vec<String>> {
        match self {
            LodoPlan::Keyword(k) if k == "all" => {
                Ok(datasets.iter().map(|d| d.name.clone()).collect())
            }
            LodoPlan::Keyword(k) => bail!("unknown lodo keyword {k:?} (expected \"all\" or a list)"),
            LodoPlan::Holdouts(names) => {
                for n in names {
                    if !datasets.iter().any(|d| &d.name == n) {
                        bail!("lodo holdout {n:?} is not a generated domain");
                    }
                }
                Ok(names.clone())
            }
        }
    }
}

fn default_eta() -> f64 {
    0.05
}
fn default_epsilon() -> f64 {
    1.0
}
fn default_steps() -> usize {
    5000
}
fn default_batch() -> usize {
    64
}
fn default_one() -> f64 {
    1.0
}
fn default_tenth() -> f64 {
    0.1
}
fn default_mixup_alpha() -> f64 {
    0.2
}
fn default_delta_scale() -> f64 {
    1e-2
}
fn default_hidden() -> Vec<usize> {
    vec![64, 64, 32]
}
fn default_task_mode() -> TaskMode {
    TaskMode::SoftmaxCe
}
fn default_true() -> bool {
    true
}

/// Training hyperparameters shared by every cell of the grid.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_one")]
    pub c1: f64,
    #[serde(default = "default_one")]
    pub c2: f64,
    #[serde(default = "default_one")]
    pub c3: f64,
    #[serde(default = "default_tenth")]
    pub lambda: f64,
    #[serde(default = "default_tenth")]
    pub gamma: f64,
    #[serde(default)]
    pub tap_set: TapSelector,
    #[serde(default = "default_mixup_alpha")]
    pub mixup_alpha: f64,
    #[serde(default = "default_tenth")]
    pub dann_weight: f64,
    #[serde(default = "default_task_mode")]
    pub task_mode: TaskMode,
    #[serde(default)]
    pub domain_weighting: DomainWeighting,
    #[serde(default = "default_true")]
    pub alpha_scales_intercept: bool,
    #[serde(default = "default_delta_scale")]
    pub delta_init_scale: f64,
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub per_tap_eps_scale: bool,
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
}

impl Default for TrainParams {
    fn default() -> Self {
        toml::from_str("").expect("defaults are total")
    }
}

impl TrainParams {
    pub fn to_train_config(&self, strategy: Strategy, seed: u64) -> TrainConfig {
        TrainConfig {
            strategy,
            epsilon: self.epsilon,
            eta: self.eta,
            steps: self.steps,
            batch_size: self.batch_size,
            weights: LossWeights {
                c1: self.c1,
                c2: self.c2,
                c3: self.c3,
                lambda: self.lambda,
                gamma: self.gamma,
            },
            tap_set: self.tap_set.clone(),
            seed,
            mixup_alpha: self.mixup_alpha,
            dann_weight: self.dann_weight,
            task_mode: self.task_mode,
            domain_weighting: self.domain_weighting,
            alpha_scales_intercept: self.alpha_scales_intercept,
            delta_init_scale: self.delta_init_scale,
            eval_every: self.eval_every,
            per_tap_eps_scale: self.per_tap_eps_scale,
            hidden_dims: self.hidden_dims.clone(),
        }
    }
}

fn default_probe() -> ProbeKind {
    ProbeKind::Linear
}
fn default_split_ratio() -> f64 {
    0.7
}
fn default_probe_seeds() -> usize {
    5
}
fn default_probe_steps() -> usize {
    400
}
fn default_probe_lr() -> f64 {
    0.5
}
fn default_margin() -> f64 {
    0.05
}

/// Classifier-test settings for the embedding bias measurement.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct C2stParams {
    #[serde(default = "default_probe")]
    pub probe: ProbeKind,
    #[serde(default = "default_split_ratio")]
    pub split_ratio: f64,
    /// Number of probe seeds; the reported accuracy is their mean.
    #[serde(default = "default_probe_seeds")]
    pub probe_seeds: usize,
    #[serde(default = "default_probe_steps")]
    pub steps: usize,
    #[serde(default = "default_probe_lr")]
    pub lr: f64,
    #[serde(default = "default_margin")]
    pub chance_margin: f64,
}

impl Default for C2stParams {
    fn default() -> Self {
        toml::from_str("").expect("defaults are total")
    }
}

impl C2stParams {
    pub fn to_config(&self, seed: u64) -> C2stConfig {
        C2stConfig {
            probe: self.probe,
            split_ratio: self.split_ratio,
            seed,
            steps: self.steps,
            lr: self.lr,
            chance_margin: self.chance_margin,
        }
    }
}

/// The whole experiment: data source, strategy grid, LODO plan, seeds.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub strategies: Vec<Strategy>,
    pub data: DataConfig,
    #[serde(default)]
    pub lodo: LodoPlan,
    #[serde(default)]
    pub train: TrainParams,
    #[serde(default)]
    pub c2st: C2stParams,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).context("parsing experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml_str(&s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("seeds must be nonempty");
        }
        if self.strategies.is_empty() {
            bail!("strategies must be nonempty");
        }
        // every referenced strategy must produce a valid train config
        for &s in &self.strategies {
            self.train.to_train_config(s, 0).validate()?;
        }
        Ok(())
    }

    /// Stable hash of the resolved config: serialization goes through the
    /// struct, so the hash does not depend on the TOML field order.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(canon.as_bytes());
        hex_prefix(&h.finalize(), 12)
    }

    /// Hash of the data section only; runs sharing it are comparable.
    pub fn data_hash(&self) -> String {
        let canon = serde_json::to_string(&self.data).expect("data config serializes");
        let mut h = Sha256::new();
        h.update(canon.as_bytes());
        hex_prefix(&h.finalize(), 12)
    }

    /// Output root: explicit config value, else `DEBIAS_DG_OUT`, else `out`.
    pub fn out_root(&self) -> PathBuf {
        if let Some(d) = &self.out_dir {
            return d.clone();
        }
        if let Ok(d) = std::env::var(OUT_ENV_VAR) {
            if !d.is_empty() {
                return PathBuf::from(d);
            }
        }
        PathBuf::from("out")
    }
}

fn hex_prefix(bytes: &[u8], n: usize) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect::<String>()[..n].to_string()
}
