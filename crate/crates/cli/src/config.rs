//! Run configuration: a JSON document with `model`, `regularization`,
//! `optimizer`, and `task` sections. Unknown keys are rejected so typos
//! fail loudly. Defaults follow the word-level language-modeling recipe
//! (SGD at lr 20, depth 55, variational dropout 0.28, DropConnect 0.5,
//! auxiliary loss 0.05 every 16 layers, gradient clip 0.225, weight decay
//! 1e-6).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use trellisnet::rnn::Nonlinearity;
use trellisnet::training::{OptimizerKind, Regularization};
use trellisnet::trellis::{Activation, TrellisConfig};

use crate::CmdError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub regularization: RegConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub task: TaskConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input channels (embedding size for token tasks).
    pub p: usize,
    /// Hidden channels per layer.
    pub q: usize,
    pub depth: usize,
    /// Per-layer dilations; empty means all ones.
    pub dilations: Vec<usize>,
    /// "lstm", "tanh", or "sigmoid".
    pub activation: String,
    /// Auxiliary-loss tap spacing; 0 disables taps.
    pub aux_every: usize,
    /// Inject the transformed input at every k-th layer (1 = every layer).
    pub inject_every: usize,
    pub weight_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            p: 400,
            q: 1000,
            depth: 55,
            dilations: Vec::new(),
            activation: "lstm".into(),
            aux_every: 16,
            inject_every: 1,
            weight_norm: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegConfig {
    /// Variational (channel) dropout rate.
    pub vd_p: f64,
    /// DropConnect rate on the hidden-to-hidden kernel.
    pub dropconnect_p: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Auxiliary-loss weight λ.
    pub aux_lambda: f64,
    /// Targets masked at the start of continued subsequences.
    pub loss_chop: usize,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            vd_p: 0.28,
            dropconnect_p: 0.5,
            weight_decay: 1e-6,
            clip_norm: 0.225,
            aux_lambda: 0.05,
            loss_chop: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// "sgd" or "adam".
    pub kind: String,
    pub lr: f64,
    /// Learning-rate decay factor applied when validation plateaus.
    pub plateau_factor: f64,
    /// Plateau length (in evaluations) before a decay.
    pub patience: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { kind: "sgd".into(), lr: 20.0, plateau_factor: 0.25, patience: 3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    /// "copy", "char_lm", or "mnist".
    pub kind: String,
    /// Input files/directories; meaning depends on the task.
    pub paths: Vec<PathBuf>,
    /// Backpropagation-through-time subsequence length (language modeling).
    pub bptt_len: usize,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    // Copy-memory settings.
    pub delay: usize,
    pub payload: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub eval_sequences: usize,
    /// Optional early-stop accuracy for the copy task.
    pub target_accuracy: Option<f64>,
    // Character-corpus split fractions (single-file corpora).
    pub frac_train: f64,
    pub frac_valid: f64,
    // Pixel-sequence settings.
    pub permute: bool,
    pub permute_seed: u64,
    pub downsample: bool,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: String::new(),
            paths: Vec::new(),
            bptt_len: 70,
            batch: 16,
            epochs: 10,
            seed: 1111,
            delay: 50,
            payload: 10,
            max_steps: 20_000,
            eval_every: 100,
            eval_sequences: 32,
            target_accuracy: None,
            frac_train: 0.9,
            frac_valid: 0.05,
            permute: false,
            permute_seed: 0,
            downsample: true,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig, CmdError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CmdError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CmdError::usage(format!("invalid config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CmdError> {
        self.trellis_config()?.validate().map_err(|e| CmdError::usage(e.to_string()))?;
        self.optimizer_kind()?;
        match self.task.kind.as_str() {
            "copy" | "char_lm" | "mnist" => {}
            other => {
                return Err(CmdError::usage(format!(
                    "unknown task kind {other:?} (expected \"copy\", \"char_lm\", or \"mnist\")"
                )))
            }
        }
        let r = &self.regularization;
        for (name, v) in [("vd_p", r.vd_p), ("dropconnect_p", r.dropconnect_p)] {
            if !(0.0..1.0).contains(&v) {
                return Err(CmdError::usage(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        Ok(())
    }

    pub fn activation(&self) -> Result<Activation, CmdError> {
        match self.model.activation.as_str() {
            "lstm" => Ok(Activation::LstmGate),
            "tanh" => Ok(Activation::Elementwise(Nonlinearity::Tanh)),
            "sigmoid" => Ok(Activation::Elementwise(Nonlinearity::Sigmoid)),
            other => Err(CmdError::usage(format!(
                "unknown activation {other:?} (expected \"lstm\", \"tanh\", or \"sigmoid\")"
            ))),
        }
    }

    pub fn trellis_config(&self) -> Result<TrellisConfig, CmdError> {
        let m = &self.model;
        let dilations = if m.dilations.is_empty() { vec![1; m.depth] } else { m.dilations.clone() };
        Ok(TrellisConfig {
            p: m.p,
            q: m.q,
            depth: m.depth,
            dilations,
            activation: self.activation()?,
            aux_every: m.aux_every,
            inject_every: m.inject_every,
        })
    }

    pub fn regularization(&self) -> Regularization {
        let r = &self.regularization;
        Regularization {
            variational_dropout: r.vd_p,
            dropconnect: r.dropconnect_p,
            clip_norm: r.clip_norm,
            aux_lambda: r.aux_lambda,
            loss_chop: r.loss_chop,
        }
    }

    pub fn optimizer_kind(&self) -> Result<OptimizerKind, CmdError> {
        match self.optimizer.kind.as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => {
                Err(CmdError::usage(format!("unknown optimizer {other:?} (expected \"sgd\" or \"adam\")")))
            }
        }
    }

    /// Effective seed: the `TRELLIS_SEED` environment variable wins over the
    /// config value.
    pub fn effective_seed(&self) -> Result<u64, CmdError> {
        match std::env::var("TRELLIS_SEED") {
            Ok(v) => v
                .trim()
                .parse::<u64>()
                .map_err(|_| CmdError::usage(format!("TRELLIS_SEED must be an unsigned integer, got {v:?}"))),
            Err(_) => Ok(self.task.seed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_defaults_match_word_lm_recipe() {
        let config: RunConfig = serde_json::from_str(r#"{"task": {"kind": "char_lm"}}"#).unwrap();
        assert_eq!(config.model.p, 400);
        assert_eq!(config.model.q, 1000);
        assert_eq!(config.model.depth, 55);
        assert_eq!(config.model.aux_every, 16);
        assert_eq!(config.model.activation, "lstm");
        assert_eq!(config.regularization.vd_p, 0.28);
        assert_eq!(config.regularization.dropconnect_p, 0.5);
        assert_eq!(config.regularization.clip_norm, 0.225);
        assert_eq!(config.regularization.aux_lambda, 0.05);
        assert_eq!(config.regularization.weight_decay, 1e-6);
        assert_eq!(config.optimizer.kind, "sgd");
        assert_eq!(config.optimizer.lr, 20.0);
    }

    #[test]
    fn test_unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(
            r#"{"task": {"kind": "copy"}, "model": {"hidden_size": 10}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("hidden_size"));
        assert!(serde_json::from_str::<RunConfig>(r#"{"task": {"kind": "copy"}, "extra": 1}"#).is_err());
    }

    #[test]
    fn test_empty_dilations_mean_all_ones() {
        let config: RunConfig =
            serde_json::from_str(r#"{"task": {"kind": "copy"}, "model": {"depth": 4, "p": 3, "q": 5}}"#)
                .unwrap();
        assert_eq!(config.trellis_config().unwrap().dilations, vec![1, 1, 1, 1]);
    }

    #[test]
    fn test_bad_task_kind_and_activation_are_usage_errors() {
        let config: RunConfig = serde_json::from_str(r#"{"task": {"kind": "foo"}}"#).unwrap();
        assert!(config.validate().is_err());
        let config: RunConfig =
            serde_json::from_str(r#"{"task": {"kind": "copy"}, "model": {"activation": "relu"}}"#).unwrap();
        assert!(config.validate().is_err());
    }
}
