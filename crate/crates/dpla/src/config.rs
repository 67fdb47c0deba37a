//! Experiment configuration: named presets, TOML parsing with strict
//! key checking, and partial overrides layered on top of a preset.
//!
//! Every field in a config file is optional; resolution starts from the
//! chosen preset (default `synthetic-small`) and applies whatever the
//! file specifies. Unknown keys are rejected rather than ignored.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{DatasetSpec, Regime};
use crate::error::{Error, Result};
use crate::model::{LayerDims, OptimizerKind};

/// Hyperparameters of the two-stage adjustment and the loss mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjustConfig {
    /// Stage-one temperature on the log prior.
    pub tau1: f64,
    /// Refinement temperature used when assigning pseudo-labels.
    pub tau2: f64,
    /// Upper end of the stage-two weight band.
    pub alpha: f64,
    /// Lower end of the stage-two weight band.
    pub beta: f64,
    /// Confidence threshold gating the pseudo-label loss.
    pub rho: f64,
    /// Weight on the plain cross-entropy term.
    pub lambda1: f64,
    /// Weight on the balanced cross-entropy term.
    pub lambda2: f64,
}

impl AdjustConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau1 > 0.0) {
            return Err(Error::invalid(format!(
                "adjust.tau1 must be > 0, got {}",
                self.tau1
            )));
        }
        if !(self.tau2 > 0.0) {
            return Err(Error::invalid(format!(
                "adjust.tau2 must be > 0, got {}",
                self.tau2
            )));
        }
        if !(self.alpha >= self.beta) {
            return Err(Error::invalid(format!(
                "adjust.alpha ({}) must be >= adjust.beta ({})",
                self.alpha, self.beta
            )));
        }
        if !(self.beta > 0.0) {
            return Err(Error::invalid(format!(
                "adjust.beta must be > 0, got {}",
                self.beta
            )));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::invalid(format!(
                "adjust.rho must be in [0, 1], got {}",
                self.rho
            )));
        }
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return Err(Error::invalid("adjust.lambda1/lambda2 must be >= 0"));
        }
        Ok(())
    }
}

/// Hidden and embedding widths of the MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub embed: usize,
}

/// Fully resolved experiment description. Everything a run needs,
/// everything the manifest records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub preset: String,
    pub seed: u64,
    /// Disable both adjustment stages and pseudo-label refinement.
    pub baseline_mode: bool,
    pub epochs: usize,
    pub batch_size: usize,
    /// Center separation of the synthetic Gaussian source.
    pub separation: f64,
    /// Held-out test samples per class.
    pub test_per_class: usize,
    pub dataset: DatasetSpec,
    pub adjust: AdjustConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerKind,
}

impl ExperimentConfig {
    /// Resolve a named preset to its full configuration.
    pub fn preset(name: &str) -> Result<ExperimentConfig> {
        let mut cfg = match name {
            "synthetic-small" => ExperimentConfig {
                preset: name.into(),
                seed: 1,
                baseline_mode: false,
                epochs: 30,
                batch_size: 64,
                separation: 6.0,
                test_per_class: 50,
                dataset: DatasetSpec {
                    known_classes: 3,
                    novel_classes: 3,
                    labeled_head: 75,
                    unlabeled_head: 300,
                    novel_head: 300,
                    gamma_labeled: 10.0,
                    gamma_unlabeled: 10.0,
                    gamma_novel: 10.0,
                    regime: Regime::Consistent,
                    input_dim: 2,
                    seed: 1,
                },
                adjust: AdjustConfig {
                    tau1: 0.2,
                    tau2: 0.2,
                    alpha: 1.2,
                    beta: 0.8,
                    rho: 0.5,
                    lambda1: 0.5,
                    lambda2: 0.5,
                },
                model: ModelConfig {
                    hidden: 64,
                    embed: 32,
                },
                optimizer: OptimizerKind::adam(1e-3),
            },
            "cifar10-like" => ExperimentConfig {
                preset: name.into(),
                seed: 1,
                baseline_mode: false,
                epochs: 50,
                batch_size: 200,
                separation: 8.0,
                test_per_class: 100,
                dataset: DatasetSpec {
                    known_classes: 5,
                    novel_classes: 5,
                    labeled_head: 500,
                    unlabeled_head: 4000,
                    novel_head: 4500,
                    gamma_labeled: 100.0,
                    gamma_unlabeled: 100.0,
                    gamma_novel: 100.0,
                    regime: Regime::Consistent,
                    input_dim: 1024,
                    seed: 1,
                },
                adjust: AdjustConfig {
                    tau1: 2.0,
                    tau2: 2.0,
                    alpha: 1.2,
                    beta: 0.8,
                    rho: 0.5,
                    lambda1: 0.5,
                    lambda2: 0.5,
                },
                model: ModelConfig {
                    hidden: 128,
                    embed: 64,
                },
                optimizer: OptimizerKind::sgd(0.01, 0.9),
            },
            "cifar100-like" => ExperimentConfig {
                preset: name.into(),
                seed: 1,
                baseline_mode: false,
                epochs: 50,
                batch_size: 200,
                separation: 8.0,
                test_per_class: 20,
                dataset: DatasetSpec {
                    known_classes: 50,
                    novel_classes: 50,
                    labeled_head: 50,
                    unlabeled_head: 400,
                    novel_head: 450,
                    gamma_labeled: 100.0,
                    gamma_unlabeled: 100.0,
                    gamma_novel: 100.0,
                    regime: Regime::Consistent,
                    input_dim: 1024,
                    seed: 1,
                },
                adjust: AdjustConfig {
                    tau1: 1.0,
                    tau2: 1.0,
                    alpha: 1.05,
                    beta: 0.95,
                    rho: 0.5,
                    lambda1: 0.5,
                    lambda2: 0.5,
                },
                model: ModelConfig {
                    hidden: 128,
                    embed: 64,
                },
                optimizer: OptimizerKind::adam(5e-4),
            },
            "svhn-like" => {
                let mut cfg = ExperimentConfig::preset("cifar10-like")?;
                cfg.preset = name.into();
                cfg.optimizer = OptimizerKind::adam(5e-4);
                cfg
            }
            other => {
                return Err(Error::invalid(format!(
                    "unknown preset {other:?}; expected one of synthetic-small, \
                     cifar10-like, cifar100-like, svhn-like"
                )))
            }
        };
        cfg.dataset.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.dataset.seed = seed;
    }

    pub fn layer_dims(&self) -> LayerDims {
        LayerDims {
            input: self.dataset.input_dim,
            hidden: self.model.hidden,
            embed: self.model.embed,
            out: self.dataset.total_classes(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if self.test_per_class == 0 {
            return Err(Error::invalid("test_per_class must be >= 1"));
        }
        if !(self.separation >= 0.0) {
            return Err(Error::invalid("separation must be >= 0"));
        }
        if self.model.hidden == 0 || self.model.embed == 0 {
            return Err(Error::invalid("model.hidden and model.embed must be >= 1"));
        }
        self.dataset.validate()?;
        self.adjust.validate()?;
        self.optimizer.validate()?;
        Ok(())
    }

    /// Serialize the resolved config as TOML (manifest embedding).
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::invalid(format!("config serialize: {e}")))
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    known_classes: Option<usize>,
    novel_classes: Option<usize>,
    labeled_head: Option<usize>,
    unlabeled_head: Option<usize>,
    novel_head: Option<usize>,
    gamma_labeled: Option<f64>,
    gamma_unlabeled: Option<f64>,
    gamma_novel: Option<f64>,
    regime: Option<Regime>,
    input_dim: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAdjust {
    tau1: Option<f64>,
    tau2: Option<f64>,
    alpha: Option<f64>,
    beta: Option<f64>,
    rho: Option<f64>,
    lambda1: Option<f64>,
    lambda2: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    hidden: Option<usize>,
    embed: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptimizer {
    kind: Option<String>,
    lr: Option<f64>,
    momentum: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    eps: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    preset: Option<String>,
    seed: Option<u64>,
    baseline: Option<bool>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    separation: Option<f64>,
    test_per_class: Option<usize>,
    dataset: Option<RawDataset>,
    adjust: Option<RawAdjust>,
    model: Option<RawModel>,
    optimizer: Option<RawOptimizer>,
}

fn apply<T: Copy>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn resolve_optimizer(base: OptimizerKind, raw: &RawOptimizer) -> Result<OptimizerKind> {
    let mut kind = match raw.kind.as_deref() {
        None => base,
        Some("sgd") => match base {
            OptimizerKind::Sgd { .. } => base,
            OptimizerKind::Adam { .. } => OptimizerKind::sgd(0.1, 0.9),
        },
        Some("adam") => match base {
            OptimizerKind::Adam { .. } => base,
            OptimizerKind::Sgd { .. } => OptimizerKind::adam(5e-4),
        },
        Some(other) => {
            return Err(Error::invalid(format!(
                "optimizer.kind must be \"sgd\" or \"adam\", got {other:?}"
            )))
        }
    };
    match &mut kind {
        OptimizerKind::Sgd { lr, momentum } => {
            apply(lr, raw.lr);
            apply(momentum, raw.momentum);
            if raw.beta1.is_some() || raw.beta2.is_some() || raw.eps.is_some() {
                return Err(Error::invalid(
                    "optimizer.beta1/beta2/eps only apply to adam",
                ));
            }
        }
        OptimizerKind::Adam {
            lr,
            beta1,
            beta2,
            eps,
        } => {
            apply(lr, raw.lr);
            apply(beta1, raw.beta1);
            apply(beta2, raw.beta2);
            apply(eps, raw.eps);
            if raw.momentum.is_some() {
                return Err(Error::invalid("optimizer.momentum only applies to sgd"));
            }
        }
    }
    Ok(kind)
}

/// Parse a TOML config document into a fully resolved configuration.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let raw: RawConfig =
        toml::from_str(text).map_err(|e| Error::invalid(format!("config parse: {e}")))?;
    let mut cfg = ExperimentConfig::preset(raw.preset.as_deref().unwrap_or("synthetic-small"))?;

    apply(&mut cfg.seed, raw.seed);
    apply(&mut cfg.baseline_mode, raw.baseline);
    apply(&mut cfg.epochs, raw.epochs);
    apply(&mut cfg.batch_size, raw.batch_size);
    apply(&mut cfg.separation, raw.separation);
    apply(&mut cfg.test_per_class, raw.test_per_class);

    if let Some(d) = raw.dataset {
        apply(&mut cfg.dataset.known_classes, d.known_classes);
        apply(&mut cfg.dataset.novel_classes, d.novel_classes);
        apply(&mut cfg.dataset.labeled_head, d.labeled_head);
        apply(&mut cfg.dataset.unlabeled_head, d.unlabeled_head);
        apply(&mut cfg.dataset.novel_head, d.novel_head);
        apply(&mut cfg.dataset.gamma_labeled, d.gamma_labeled);
        apply(&mut cfg.dataset.gamma_unlabeled, d.gamma_unlabeled);
        apply(&mut cfg.dataset.gamma_novel, d.gamma_novel);
        apply(&mut cfg.dataset.regime, d.regime);
        apply(&mut cfg.dataset.input_dim, d.input_dim);
    }
    if let Some(a) = raw.adjust {
        apply(&mut cfg.adjust.tau1, a.tau1);
        apply(&mut cfg.adjust.tau2, a.tau2);
        apply(&mut cfg.adjust.alpha, a.alpha);
        apply(&mut cfg.adjust.beta, a.beta);
        apply(&mut cfg.adjust.rho, a.rho);
        apply(&mut cfg.adjust.lambda1, a.lambda1);
        apply(&mut cfg.adjust.lambda2, a.lambda2);
    }
    if let Some(m) = raw.model {
        apply(&mut cfg.model.hidden, m.hidden);
        apply(&mut cfg.model.embed, m.embed);
    }
    if let Some(o) = raw.optimizer {
        cfg.optimizer = resolve_optimizer(cfg.optimizer, &o)?;
    }

    cfg.dataset.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

/// [`parse_config_str`] over a file path.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar10_preset_reference_values() {
        let cfg = ExperimentConfig::preset("cifar10-like").unwrap();
        assert_eq!(cfg.adjust.tau1, 2.0);
        assert_eq!(cfg.adjust.tau2, 2.0);
        assert_eq!(cfg.adjust.alpha, 1.2);
        assert_eq!(cfg.adjust.beta, 0.8);
        assert_eq!(cfg.adjust.rho, 0.5);
        assert_eq!(cfg.adjust.lambda1, 0.5);
        assert_eq!(cfg.adjust.lambda2, 0.5);
        assert_eq!(cfg.dataset.labeled_head, 500);
        assert_eq!(cfg.dataset.unlabeled_head, 4000);
        assert_eq!(cfg.dataset.novel_head, 4500);
        assert_eq!(cfg.dataset.gamma_labeled, 100.0);
        assert_eq!(cfg.batch_size, 200);
        assert!(matches!(cfg.optimizer, OptimizerKind::Sgd { .. }));
        cfg.validate().unwrap();
    }

    #[test]
    fn cifar100_preset_reference_values() {
        let cfg = ExperimentConfig::preset("cifar100-like").unwrap();
        assert_eq!(cfg.adjust.tau1, 1.0);
        assert_eq!(cfg.adjust.tau2, 1.0);
        assert_eq!(cfg.adjust.alpha, 1.05);
        assert_eq!(cfg.adjust.beta, 0.95);
        assert_eq!(cfg.dataset.labeled_head, 50);
        assert!(matches!(cfg.optimizer, OptimizerKind::Adam { .. }));
        cfg.validate().unwrap();
    }

    #[test]
    fn svhn_preset_is_cifar10_numbers_on_adam() {
        let cfg = ExperimentConfig::preset("svhn-like").unwrap();
        assert_eq!(cfg.dataset.labeled_head, 500);
        assert_eq!(cfg.adjust.tau1, 2.0);
        assert!(matches!(cfg.optimizer, OptimizerKind::Adam { .. }));
        cfg.validate().unwrap();
    }

    #[test]
    fn all_presets_validate() {
        for name in ["synthetic-small", "cifar10-like", "cifar100-like", "svhn-like"] {
            ExperimentConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(ExperimentConfig::preset("cifar10").is_err());
    }

    #[test]
    fn empty_config_is_the_default_preset() {
        let cfg = parse_config_str("").unwrap();
        assert_eq!(cfg.preset, "synthetic-small");
        assert_eq!(cfg.dataset.known_classes, 3);
        assert_eq!(cfg.dataset.input_dim, 2);
    }

    #[test]
    fn overrides_layer_over_preset() {
        let cfg = parse_config_str(
            r#"
            preset = "cifar10-like"
            seed = 77
            epochs = 3
            baseline = true

            [adjust]
            tau1 = 1.5

            [dataset]
            regime = "uniform"
            novel_head = 1500

            [optimizer]
            lr = 0.01
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 77);
        assert_eq!(cfg.dataset.seed, 77);
        assert_eq!(cfg.epochs, 3);
        assert!(cfg.baseline_mode);
        assert_eq!(cfg.adjust.tau1, 1.5);
        assert_eq!(cfg.adjust.tau2, 2.0);
        assert_eq!(cfg.dataset.regime, Regime::Uniform);
        assert_eq!(cfg.dataset.novel_head, 1500);
        match cfg.optimizer {
            OptimizerKind::Sgd { lr, momentum } => {
                assert_eq!(lr, 0.01);
                assert_eq!(momentum, 0.9);
            }
            _ => panic!("expected sgd"),
        }
    }

    #[test]
    fn optimizer_kind_switch_applies_overrides() {
        let cfg = parse_config_str(
            r#"
            [optimizer]
            kind = "adam"
            lr = 0.002
            "#,
        )
        .unwrap();
        match cfg.optimizer {
            OptimizerKind::Adam { lr, beta1, .. } => {
                assert_eq!(lr, 0.002);
                assert_eq!(beta1, 0.9);
            }
            _ => panic!("expected adam"),
        }

        assert!(parse_config_str("[optimizer]\nkind = \"adagrad\"").is_err());
        assert!(parse_config_str("[optimizer]\nkind = \"adam\"\nmomentum = 0.9").is_err());
        assert!(parse_config_str("[optimizer]\nkind = \"sgd\"\nbeta1 = 0.5").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = parse_config_str("epochz = 5").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("epochz"), "message was: {msg}");

        let err = parse_config_str("[dataset]\ncolor_space = \"rgb\"").unwrap_err();
        assert!(err.to_string().contains("color_space"));
    }

    #[test]
    fn constraint_violations_name_the_key() {
        let err = parse_config_str("[adjust]\ntau1 = -1.0").unwrap_err();
        assert!(err.to_string().contains("tau1"));
        let err = parse_config_str("[adjust]\ntau1 = 0.0").unwrap_err();
        assert!(err.to_string().contains("tau1"));
        let err = parse_config_str("[adjust]\nrho = 1.5").unwrap_err();
        assert!(err.to_string().contains("rho"));
        assert!(parse_config_str("epochs = 0").is_err());
    }

    #[test]
    fn resolved_config_serializes_to_toml() {
        let cfg = ExperimentConfig::preset("synthetic-small").unwrap();
        let text = cfg.to_toml().unwrap();
        assert!(text.contains("preset = \"synthetic-small\""));
        assert!(text.contains("tau1"));
        assert!(text.contains("[optimizer]"));
    }

    #[test]
    fn config_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "preset = \"cifar100-like\"\nseed = 9").unwrap();
        let cfg = parse_config(&path).unwrap();
        assert_eq!(cfg.preset, "cifar100-like");
        assert_eq!(cfg.seed, 9);
        assert!(parse_config(Path::new("/nonexistent/run.toml")).is_err());
    }
}
