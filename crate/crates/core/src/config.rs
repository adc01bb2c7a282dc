//! Typed run configuration: TOML sections mirroring the module configs,
//! hard errors on unknown keys, and the two built-in hyperparameter
//! profiles.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{BatchSpec, SynthSpec};
use crate::encoder::{EncoderShape, LrSchedule};
use crate::error::{Error, Result};
use crate::losses::{CmEmdOptions, WeightMode};
use crate::mgs::{AlignmentKind, DiscriminationKind, MgsConfig, MgsLossOptions};
use crate::ot::SinkhornConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synth,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub synth: SynthSpec,
    /// Feature CSV paths used when `source = "file"`.
    pub train_file: String,
    pub test_file: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synth,
            synth: SynthSpec::default(),
            train_file: String::new(),
            test_file: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MgsSection {
    pub parts: usize,
    pub alpha: f64,
    pub gamma: [f64; 5],
    pub beta: f64,
    pub gem_p: f64,
}

impl Default for MgsSection {
    fn default() -> Self {
        let c = MgsConfig::<f64>::default();
        MgsSection { parts: c.parts, alpha: c.alpha, gamma: c.gamma, beta: c.beta, gem_p: c.gem_p }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornSection {
    pub epsilon: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub normalize_cost: bool,
    pub epsilon_scaling: bool,
}

impl Default for SinkhornSection {
    fn default() -> Self {
        let c = SinkhornConfig::<f64>::default();
        SinkhornSection {
            epsilon: c.epsilon,
            max_iterations: c.max_iterations,
            tolerance: c.tolerance,
            normalize_cost: c.normalize_cost,
            epsilon_scaling: c.epsilon_scaling,
        }
    }
}

impl SinkhornSection {
    pub fn to_config(&self) -> SinkhornConfig<f64> {
        SinkhornConfig {
            epsilon: self.epsilon,
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
            normalize_cost: self.normalize_cost,
            epsilon_scaling: self.epsilon_scaling,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    /// Global gradient-norm clip; 0 disables. Keeps brittle baseline losses
    /// (moment-matching KL near degenerate variances) from blowing up a run.
    pub clip_grad_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 0.01,
            epochs: 80,
            iters_per_epoch: 4,
            lr_decay_factor: 0.1,
            lr_decay_every: 30,
            clip_grad_norm: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            initial: self.learning_rate,
            factor: self.lr_decay_factor,
            every: self.lr_decay_every.max(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightModeConfig {
    OptimalTransport,
    CosineSimilarity,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineLoss {
    None,
    Kl,
    Center,
    Triplet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub enable_cm_emd: bool,
    pub enable_cm_dl: bool,
    pub weight_mode: WeightModeConfig,
    pub baseline_loss: BaselineLoss,
    pub trainable_part_weights: bool,
    pub triplet_margin: f64,
    pub center_update_rate: f64,
    pub l2_normalize_features: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            enable_cm_emd: true,
            enable_cm_dl: true,
            weight_mode: WeightModeConfig::OptimalTransport,
            baseline_loss: BaselineLoss::None,
            trainable_part_weights: true,
            triplet_margin: 0.3,
            center_update_rate: 0.5,
            l2_normalize_features: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: String,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: 7, out_dir: "runs/out".into() }
    }
}

/// Full run configuration; every field has a default and unknown keys are
/// rejected at parse time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub batch: BatchSpec,
    pub encoder: EncoderShape,
    pub mgs: MgsSection,
    pub sinkhorn: SinkhornSection,
    pub optim: OptimConfig,
    pub ablation: AblationConfig,
    pub run: RunSection,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.batch.validate()?;
        self.mgs_config().validate()?;
        self.sinkhorn.to_config().validate()?;
        if let DataSource::Synth = self.data.source {
            self.data.synth.validate()?;
            if self.data.synth.dim != self.encoder.input_dim {
                return Err(Error::Config(format!(
                    "synth dim {} does not match encoder input_dim {}",
                    self.data.synth.dim, self.encoder.input_dim
                )));
            }
        } else if self.data.train_file.is_empty() || self.data.test_file.is_empty() {
            return Err(Error::Config(
                "file data source needs train_file and test_file".into(),
            ));
        }
        if !self.encoder.map_h.is_multiple_of(self.mgs.parts) {
            return Err(Error::Config(format!(
                "map height {} not divisible by {} parts",
                self.encoder.map_h, self.mgs.parts
            )));
        }
        if self.optim.epochs > 0 && self.optim.iters_per_epoch == 0 {
            return Err(Error::Config("iters_per_epoch must be >= 1".into()));
        }
        let lr_ok = self.optim.learning_rate.is_finite() && self.optim.learning_rate > 0.0;
        let decay_ok = self.optim.lr_decay_factor.is_finite() && self.optim.lr_decay_factor > 0.0;
        if !lr_ok || !decay_ok {
            return Err(Error::Config("learning rate settings must be positive".into()));
        }
        Ok(())
    }

    pub fn mgs_config(&self) -> MgsConfig<f64> {
        MgsConfig {
            parts: self.mgs.parts,
            alpha: self.mgs.alpha,
            gamma: self.mgs.gamma,
            beta: self.mgs.beta,
            gem_p: self.mgs.gem_p,
        }
    }

    fn weight_mode(&self) -> WeightMode {
        match self.ablation.weight_mode {
            WeightModeConfig::OptimalTransport => WeightMode::OptimalTransport,
            WeightModeConfig::CosineSimilarity => WeightMode::CosineSimilarity,
            WeightModeConfig::Uniform => WeightMode::Uniform,
        }
    }

    /// Resolve the ablation switches into concrete loss options. An explicit
    /// KL baseline replaces the alignment slots; center/triplet baselines
    /// replace the discrimination slot.
    pub fn loss_options(&self) -> MgsLossOptions<f64> {
        let alignment = match self.ablation.baseline_loss {
            BaselineLoss::Kl => AlignmentKind::Kl,
            _ if self.ablation.enable_cm_emd => AlignmentKind::CmEmd,
            _ => AlignmentKind::None,
        };
        let discrimination = match self.ablation.baseline_loss {
            BaselineLoss::Center => DiscriminationKind::Center,
            BaselineLoss::Triplet => DiscriminationKind::Triplet,
            _ if self.ablation.enable_cm_dl => DiscriminationKind::CmDl,
            _ => DiscriminationKind::None,
        };
        MgsLossOptions {
            gamma: self.mgs.gamma,
            alpha: self.mgs.alpha,
            alignment,
            discrimination,
            emd: CmEmdOptions {
                weight_mode: self.weight_mode(),
                sinkhorn: self.sinkhorn.to_config(),
                l2_normalize: self.ablation.l2_normalize_features,
            },
            triplet_margin: self.ablation.triplet_margin,
            trainable_part_weights: self.ablation.trainable_part_weights,
        }
    }

    /// Canonical TOML serialization of the resolved config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical serialization; embedded in every output
    /// file so artifacts can be traced to their exact configuration.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_toml().as_bytes());
        let digest = h.finalize();
        digest.iter().map(|b| format!("{:02x}", b)).collect()
    }
}

/// Parse a config file, rejecting unknown keys with the offending name.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_run_config(&text)
}

pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Built-in hyperparameter profiles on the synthetic data.
pub fn preset(name: &str) -> Option<RunConfig> {
    let mut cfg = RunConfig::default();
    match name {
        "sysu-profile" => {
            cfg.batch =
                BatchSpec { identities: 6, visible_per_identity: 8, thermal_per_identity: 8 };
            cfg.mgs.alpha = 0.2;
            cfg.mgs.gamma = [1.0, 1.0, 0.1, 2.0, 0.1];
            cfg.mgs.beta = 0.7;
            Some(cfg)
        }
        "regdb-profile" => {
            cfg.batch =
                BatchSpec { identities: 6, visible_per_identity: 4, thermal_per_identity: 4 };
            cfg.mgs.alpha = 1.0;
            cfg.mgs.gamma = [3.0, 2.0, 0.4, 1.0, 0.6];
            cfg.mgs.beta = 0.5;
            Some(cfg)
        }
        _ => None,
    }
}

pub fn preset_names() -> &'static [&'static str] {
    &["sysu-profile", "regdb-profile"]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let back = parse_run_config(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        let r = parse_run_config("[optim]\nlearning_rate = 0.1\nlerning_rate = 0.2\n");
        match r {
            Err(Error::Config(msg)) => assert!(msg.contains("lerning_rate"), "{}", msg),
            other => panic!("expected config error, got {:?}", other),
        }
    }

    #[test]
    fn presets_differ_and_validate() {
        let sysu = preset("sysu-profile").unwrap();
        let regdb = preset("regdb-profile").unwrap();
        sysu.validate().unwrap();
        regdb.validate().unwrap();
        assert_eq!(sysu.mgs.gamma, [1.0, 1.0, 0.1, 2.0, 0.1]);
        assert_eq!(regdb.mgs.gamma, [3.0, 2.0, 0.4, 1.0, 0.6]);
        assert_eq!(sysu.mgs.beta, 0.7);
        assert_eq!(regdb.mgs.beta, 0.5);
        assert_eq!(regdb.batch.batch_size(), 48);
        assert!(preset("nope").is_none());
        assert_ne!(sysu.hash(), regdb.hash());
    }

    #[test]
    fn ablation_switches_resolve() {
        let mut cfg = RunConfig::default();
        cfg.ablation.enable_cm_emd = false;
        cfg.ablation.enable_cm_dl = false;
        let o = cfg.loss_options();
        assert_eq!(o.alignment, AlignmentKind::None);
        assert_eq!(o.discrimination, DiscriminationKind::None);

        cfg.ablation.baseline_loss = BaselineLoss::Kl;
        assert_eq!(cfg.loss_options().alignment, AlignmentKind::Kl);

        cfg.ablation.baseline_loss = BaselineLoss::Triplet;
        assert_eq!(cfg.loss_options().discrimination, DiscriminationKind::Triplet);
    }

    #[test]
    fn mismatched_dims_rejected() {
        let mut cfg = RunConfig::default();
        cfg.data.synth.dim = 12;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.mgs.parts = 5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
