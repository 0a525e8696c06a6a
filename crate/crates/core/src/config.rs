//! Experiment configuration, read from and written to TOML.
//!
//! Unknown keys are rejected. When serialised, knobs that exist only for this
//! implementation (rather than as reference hyperparameters) carry a
//! trailing `# provenance: artifact` comment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cam::{InferenceParams, Thresholds};
use crate::error::{Error, Result};
use crate::fickle::SelectionMode;
use crate::model::BackboneConfig;
use crate::optim::AdamConfig;
use crate::synthetic::GeneratorConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FickleConfig {
    pub kernel_size: usize,
    pub dropout_rate: f64,
    pub dropout_rescale: bool,
    pub train_mode: SelectionMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub n_passes: usize,
    pub theta: f64,
    pub theta_bg: f64,
    pub mode: SelectionMode,
    /// Dropout rate at inference; defaults to the training rate when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub halve_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_size: usize,
    pub eval_size: usize,
    pub generator: GeneratorConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedsConfig {
    /// Root of every derived seed (data, shuffling, init, masks, inference).
    pub experiment: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub fickle: FickleConfig,
    pub inference: InferenceConfig,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub backbone: BackboneConfig,
    pub dataset: DatasetConfig,
    pub seeds: SeedsConfig,
}

impl Default for FickleConfig {
    fn default() -> Self {
        Self {
            kernel_size: 9,
            dropout_rate: 0.9,
            dropout_rescale: false,
            train_mode: SelectionMode::Stochastic,
        }
    }
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            n_passes: 200,
            theta: 0.35,
            theta_bg: 0.05,
            mode: SelectionMode::Stochastic,
            dropout_rate: None,
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            halve_every: 10,
            batch_size: 10,
            epochs: 10,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 2.0 }
    }
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_size: 500,
            eval_size: 50,
            generator: GeneratorConfig::default(),
        }
    }
}

/// `(table, key)` pairs with no reference counterpart.
const ARTIFACT_KEYS: &[(&str, &str)] = &[
    ("fickle", "dropout_rescale"),
    ("fickle", "train_mode"),
    ("inference", "theta_bg"),
    ("inference", "mode"),
    ("inference", "dropout_rate"),
    ("optimizer", "epochs"),
    ("backbone", "channels"),
    ("backbone", "kernel_sizes"),
    ("backbone", "strides"),
    ("backbone", "activation"),
    ("dataset", "*"),
    ("dataset.generator", "*"),
    ("seeds", "*"),
];

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let key = e
                .message()
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "<config>".into());
            Error::Config {
                key,
                message: e.to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        let raw = toml::to_string(self).expect("config is always serialisable");
        let mut table = String::new();
        let mut out = String::new();
        for line in raw.lines() {
            let trimmed = line.trim();
            if let Some(name) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                table = name.to_string();
                out.push_str(line);
            } else if let Some((key, _)) = trimmed.split_once(" = ") {
                out.push_str(line);
                let flagged = ARTIFACT_KEYS
                    .iter()
                    .any(|&(t, k)| t == table && (k == "*" || k == key));
                if flagged {
                    out.push_str("  # provenance: artifact");
                }
            } else {
                out.push_str(line);
            }
            out.push('\n');
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::Config {
                key: key.into(),
                message: message.into(),
            })
        };
        let f = &self.fickle;
        if f.kernel_size == 0 || f.kernel_size % 2 == 0 {
            return bad("fickle.kernel_size", "must be odd so the kernel has a centre");
        }
        if !(0.0..1.0).contains(&f.dropout_rate) {
            return bad("fickle.dropout_rate", "must be in [0, 1)");
        }
        let i = &self.inference;
        if i.n_passes == 0 {
            return bad("inference.n_passes", "must be at least 1");
        }
        if !(0.0..1.0).contains(&i.theta) {
            return bad("inference.theta", "must be in [0, 1) on max-normalised maps");
        }
        if !(0.0..=1.0).contains(&i.theta_bg) {
            return bad("inference.theta_bg", "must be in [0, 1]");
        }
        if i.dropout_rate.is_some_and(|p| !(0.0..1.0).contains(&p)) {
            return bad("inference.dropout_rate", "must be in [0, 1)");
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return bad("optimizer.lr", "must be positive");
        }
        if o.halve_every == 0 {
            return bad("optimizer.halve_every", "must be positive");
        }
        if o.batch_size == 0 {
            return bad("optimizer.batch_size", "must be positive");
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 {
            return bad("optimizer.beta1", "need 0 <= beta < 1 and eps > 0");
        }
        if !(self.loss.alpha >= 0.0) {
            return bad("loss.alpha", "must be nonnegative");
        }
        if self.dataset.train_size == 0 {
            return bad("dataset.train_size", "must be positive");
        }
        self.dataset.generator.validate()?;
        let size = self.backbone.feature_size(self.dataset.generator.image_size)?;
        if size < f.kernel_size {
            return bad("backbone.strides", "feature map is smaller than the head kernel");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.optimizer.beta1,
            beta2: self.optimizer.beta2,
            eps: self.optimizer.eps,
        }
    }

    /// Learning rate during `epoch` (zero-based): halved every
    /// `halve_every` epochs.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.optimizer.lr * 0.5f64.powi((epoch / self.optimizer.halve_every) as i32)
    }

    pub fn inference_params(&self) -> InferenceParams {
        InferenceParams {
            mode: self.inference.mode,
            rate: self.inference.dropout_rate.unwrap_or(self.fickle.dropout_rate),
            rescale: self.fickle.dropout_rescale,
            n_passes: self.inference.n_passes,
            thresholds: Thresholds {
                theta: self.inference.theta,
                background: Some(self.inference.theta_bg),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        assert!(text.contains("theta_bg = 0.05  # provenance: artifact"));
        assert!(text.contains("kernel_size = 9\n"));
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_named() {
        let text = ExperimentConfig::default().to_toml().replace("theta = 0.35", "thetta = 0.35");
        match ExperimentConfig::from_toml(&text) {
            Err(Error::Config { key, .. }) => assert!(key.contains("thetta"), "{key}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn missing_keys_take_defaults() {
        let cfg = ExperimentConfig::from_toml("[optimizer]\nepochs = 3\n\n[dataset.generator]\nimage_size = 96\n").unwrap();
        assert_eq!(cfg.optimizer.epochs, 3);
        assert_eq!(cfg.optimizer.lr, 0.001);
        assert_eq!(cfg.dataset.generator.image_size, 96);
        assert_eq!(cfg.dataset.generator.num_classes, 4);
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn invalid_values_are_named() {
        let text = ExperimentConfig::default()
            .to_toml()
            .replace("kernel_size = 9", "kernel_size = 8");
        match ExperimentConfig::from_toml(&text) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "fickle.kernel_size"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = ExperimentConfig::default();
        for e in 0..45 {
            assert_eq!(cfg.learning_rate(e), 0.001 * 0.5f64.powi((e / 10) as i32));
        }
        assert_eq!(cfg.learning_rate(9), 0.001);
        assert_eq!(cfg.learning_rate(10), 0.0005);
        assert_eq!(cfg.learning_rate(20), 0.00025);
    }
}
