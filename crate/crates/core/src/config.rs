//! Experiment configuration.
//!
//! Configs are TOML. Every table is optional; missing keys take the
//! defaults below, which follow the reference recipe (batch 96, rate 0.05
//! decayed ×0.1 at epochs 21/28/32, seed 5, KD temperature 4, α = 0.5,
//! β = 2, τ = 0.1, 512 negatives, 128-d relations).
//!
//! ```toml
//! seed = 5
//! epochs = 35
//! batch_size = 96
//!
//! [teacher]
//! arch = "mlp:256-128"
//! epochs = 20
//!
//! [student]
//! arch = "mlp:128-64"
//! input = "native"            # or "bilinear_upsample"
//!
//! [loss]
//! alpha = 0.5
//! beta = 2.0
//! rho = 4.0
//! cls = "cross_entropy"       # or "arcface"
//! negative_weighting = "printed"  # or "mean"
//!
//! [critic]
//! tau = 0.1
//! n_negatives = 512
//! # dataset_cardinality defaults to the training split size
//! relation_dim = 128
//!
//! [bank]
//! capacity = 4096
//! policy = "supervised"       # or "unsupervised"
//!
//! [optimizer]
//! lr = 0.05
//! momentum = 0.9
//! weight_decay = 5e-4
//! milestones = [21, 28, 32]
//! gamma = 0.1
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::StudentInput;
use crate::error::{Error, Result};
use crate::losses::{ClsMode, LossWeights, NegativeWeighting};
use crate::negatives::SamplingMode;
use crate::nn::ArchSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSpec {
    pub arch: String,
    /// Epochs of high-resolution supervised pretraining.
    pub epochs: usize,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        Self { arch: "mlp:256-128".into(), epochs: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentSpec {
    pub arch: String,
    pub input: StudentInput,
}

impl Default for StudentSpec {
    fn default() -> Self {
        Self { arch: "mlp:128-64".into(), input: StudentInput::Native }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsKind {
    CrossEntropy,
    Arcface,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    pub cls: ClsKind,
    pub arcface_scale: f64,
    pub arcface_margin: f64,
    pub negative_weighting: NegativeWeighting,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            alpha: w.alpha,
            beta: w.beta,
            rho: w.rho,
            cls: ClsKind::CrossEntropy,
            arcface_scale: 64.0,
            arcface_margin: 0.5,
            negative_weighting: NegativeWeighting::Printed,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights { alpha: self.alpha, beta: self.beta, rho: self.rho }
    }

    pub fn cls_mode(&self) -> ClsMode {
        match self.cls {
            ClsKind::CrossEntropy => ClsMode::CrossEntropy,
            ClsKind::Arcface => ClsMode::ArcFace { scale: self.arcface_scale, margin: self.arcface_margin },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticConfig {
    pub tau: f64,
    pub n_negatives: usize,
    /// `m` in the critic; `None` means the training split size.
    pub dataset_cardinality: Option<usize>,
    pub relation_dim: usize,
    /// Hidden width of the relation heads; `None` means `relation_dim`.
    pub hidden_dim: Option<usize>,
    /// Critic projection width; `None` means `relation_dim`.
    pub proj_dim: Option<usize>,
    /// Learning-rate multiplier for the relation heads and the critic.
    pub lr_scale: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            n_negatives: 512,
            dataset_cardinality: None,
            relation_dim: 128,
            hidden_dim: None,
            proj_dim: None,
            lr_scale: 1.0,
        }
    }
}

impl CriticConfig {
    pub fn hidden(&self) -> usize {
        self.hidden_dim.unwrap_or(self.relation_dim)
    }

    pub fn proj(&self) -> usize {
        self.proj_dim.unwrap_or(self.relation_dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    pub capacity: usize,
    pub policy: SamplingMode,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self { capacity: 4096, policy: SamplingMode::Supervised }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// 1-based epochs at which the rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: 0.05, momentum: 0.9, weight_decay: 5e-4, milestones: vec![21, 28, 32], gamma: 0.1 }
    }
}

impl OptimizerConfig {
    /// Learning rate for a 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.gamma.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub hires: usize,
    pub factor: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { hires: 32, factor: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub histogram_bins: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub ranks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { histogram_bins: 100, probe_epochs: 10, probe_lr: 0.01, ranks: vec![1, 10, 20] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub teacher: TeacherSpec,
    pub student: StudentSpec,
    pub loss: LossConfig,
    pub critic: CriticConfig,
    pub bank: BankConfig,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 5,
            epochs: 35,
            batch_size: 96,
            teacher: TeacherSpec::default(),
            student: StudentSpec::default(),
            loss: LossConfig::default(),
            critic: CriticConfig::default(),
            bank: BankConfig::default(),
            optimizer: OptimizerConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Short names accepted by [`ExperimentConfig::apply_override`].
const ALIASES: &[(&str, &str)] = &[
    ("alpha", "loss.alpha"),
    ("beta", "loss.beta"),
    ("rho", "loss.rho"),
    ("tau", "critic.tau"),
    ("n", "critic.n_negatives"),
    ("m", "critic.dataset_cardinality"),
    ("d_r", "critic.relation_dim"),
    ("lr", "optimizer.lr"),
    ("capacity", "bank.capacity"),
    ("policy", "bank.policy"),
];

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Validation(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Validation(vec![format!("{}: {e}", path.display())]))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Applies `key=value`, where `key` is a dotted path or an alias
    /// (`alpha`, `beta`, `tau`, `n`, ...). Values are TOML literals; bare
    /// words are taken as strings.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Validation(vec![format!("override `{assignment}` is not key=value")]))?;
        let key = key.trim();
        let path = ALIASES.iter().find(|(a, _)| *a == key).map(|(_, p)| *p).unwrap_or(key);
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));

        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Serde(e.to_string()))?;
        let mut cursor = &mut root;
        let parts: Vec<&str> = path.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = cursor
                .as_table_mut()
                .ok_or_else(|| Error::Validation(vec![format!("override path `{path}` is not a table")]))?;
            if i + 1 == parts.len() {
                table.insert((*part).to_string(), value.clone());
                break;
            }
            cursor = table
                .get_mut(*part)
                .ok_or_else(|| Error::Validation(vec![format!("unknown config section `{part}` in `{path}`")]))?;
        }
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Validation(vec![format!("override `{assignment}`: {e}")]))?;
        Ok(())
    }

    /// Every violated constraint, one message per field.
    pub fn problems(&self) -> Vec<String> {
        let mut bad = Vec::new();
        for (field, arch) in [("teacher.arch", &self.teacher.arch), ("student.arch", &self.student.arch)] {
            if let Err(e) = ArchSpec::parse(arch) {
                bad.push(format!("{field}: {e}"));
            }
        }
        if self.epochs == 0 {
            bad.push("epochs must be ≥ 1".into());
        }
        if self.batch_size < 2 {
            bad.push("batch_size must be ≥ 2 (each anchor needs a distinct partner)".into());
        }
        bad.extend(self.loss.weights().validate());
        if self.loss.cls == ClsKind::Arcface && !(self.loss.arcface_scale > 0.0) {
            bad.push("loss.arcface_scale must be > 0".into());
        }
        if !(self.critic.lr_scale > 0.0 && self.critic.lr_scale.is_finite()) {
            bad.push(format!("critic.lr_scale must be > 0, got {}", self.critic.lr_scale));
        }
        if !(self.critic.tau > 0.0 && self.critic.tau.is_finite()) {
            bad.push(format!("critic.tau must be > 0, got {}", self.critic.tau));
        }
        if self.critic.n_negatives == 0 {
            bad.push("critic.n_negatives must be ≥ 1".into());
        }
        if self.critic.dataset_cardinality == Some(0) {
            bad.push("critic.dataset_cardinality must be ≥ 1".into());
        }
        if self.critic.relation_dim == 0 || self.critic.hidden() == 0 || self.critic.proj() == 0 {
            bad.push("critic dims must be ≥ 1".into());
        }
        if self.critic.n_negatives > self.bank.capacity {
            bad.push(format!(
                "critic.n_negatives ({}) exceeds bank.capacity ({})",
                self.critic.n_negatives, self.bank.capacity
            ));
        }
        if !(self.optimizer.lr > 0.0) {
            bad.push("optimizer.lr must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.optimizer.momentum) {
            bad.push("optimizer.momentum must be in [0, 1)".into());
        }
        if self.optimizer.weight_decay < 0.0 {
            bad.push("optimizer.weight_decay must be ≥ 0".into());
        }
        if self.optimizer.milestones.windows(2).any(|w| w[0] > w[1]) {
            bad.push("optimizer.milestones must be sorted".into());
        }
        if self.data.factor == 0 || self.data.hires % self.data.factor.max(1) != 0 {
            bad.push("data.hires must be divisible by data.factor".into());
        }
        if self.eval.histogram_bins == 0 {
            bad.push("eval.histogram_bins must be ≥ 1".into());
        }
        bad
    }

    pub fn validate(&self) -> Result<()> {
        let bad = self.problems();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }
}
