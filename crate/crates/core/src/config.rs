//! TOML run configuration: desk-scale defaults, strict parsing (unknown
//! keys are errors), full validation up front, and a stable hash that ties
//! checkpoints to the configuration that produced them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annealing::AnnealConfig;
use crate::dataset::SyntheticConfig;
use crate::error::{Error, Result};
use crate::loss::{BalanceLossConfig, TripletLossConfig};
use crate::model::LrSchedule;
use crate::supervision::{SupervisorConfig, SupervisorMode};
use crate::train::{LossMode, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub loss: LossSection,
    pub supervision: SupervisionSection,
    pub training: TrainingSection,
    pub annealing: AnnealingSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub num_clusters: usize,
    pub positives_per_cluster: usize,
    pub input_dim: usize,
    pub noise_easy: f64,
    pub noise_hard: f64,
    pub noise_tough: f64,
    pub false_negative_rate: f64,
    pub center_spread: f64,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let d = SyntheticConfig::default();
        DatasetSection {
            num_clusters: d.num_clusters,
            positives_per_cluster: d.positives_per_cluster,
            input_dim: d.input_dim,
            noise_easy: d.noise_easy,
            noise_hard: d.noise_hard,
            noise_tough: d.noise_tough,
            false_negative_rate: d.false_negative_rate,
            center_spread: d.center_spread,
            seed: d.seed,
        }
    }
}

impl DatasetSection {
    pub fn to_synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            num_clusters: self.num_clusters,
            positives_per_cluster: self.positives_per_cluster,
            input_dim: self.input_dim,
            noise_easy: self.noise_easy,
            noise_hard: self.noise_hard,
            noise_tough: self.noise_tough,
            false_negative_rate: self.false_negative_rate,
            center_spread: self.center_spread,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Input dim, hidden widths, embedding dim.
    pub layer_sizes: Vec<usize>,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            layer_sizes: vec![32, 64, 64, 16],
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    /// "balance" or "triplet".
    pub mode: String,
    pub alpha: u32,
    pub gamma: f64,
    pub margin: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            mode: "balance".into(),
            alpha: 2,
            gamma: 1.05,
            margin: 1.0,
        }
    }
}

impl LossSection {
    pub fn mode(&self) -> Result<LossMode> {
        match self.mode.as_str() {
            "balance" => Ok(LossMode::Balance),
            "triplet" => Ok(LossMode::Triplet),
            other => Err(Error::Config(format!(
                "unknown loss mode {other:?}; expected \"balance\" or \"triplet\""
            ))),
        }
    }

    pub fn balance(&self) -> BalanceLossConfig {
        BalanceLossConfig {
            alpha: self.alpha,
            gamma: self.gamma,
        }
    }

    pub fn triplet(&self) -> TripletLossConfig {
        TripletLossConfig {
            margin: self.margin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisionSection {
    /// Apply confidence weighting during training.
    pub enabled: bool,
    /// Path to a frozen supervisor checkpoint; empty means the training
    /// network supervises itself.
    pub checkpoint: String,
    pub upper: f64,
    pub threshold: f64,
    pub curvature: f64,
}

impl Default for SupervisionSection {
    fn default() -> Self {
        let d = SupervisorConfig::default();
        SupervisionSection {
            enabled: true,
            checkpoint: String::new(),
            upper: d.upper,
            threshold: d.threshold,
            curvature: d.curvature,
        }
    }
}

impl SupervisionSection {
    pub fn to_supervisor(&self) -> SupervisorConfig {
        SupervisorConfig {
            mode: if self.checkpoint.is_empty() {
                SupervisorMode::SelfMode
            } else {
                SupervisorMode::Pretrained(self.checkpoint.clone().into())
            },
            upper: self.upper,
            threshold: self.threshold,
            curvature: self.curvature,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub steps: usize,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub max_lr: f64,
    /// Warmup length as a fraction of total steps.
    pub warmup_fraction: f64,
    pub seed: u64,
    pub snapshot_clusters: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            steps: 2000,
            batch_size: 64,
            steps_per_epoch: 100,
            max_lr: 0.033,
            warmup_fraction: 0.05,
            seed: 0,
            snapshot_clusters: 64,
        }
    }
}

impl TrainingSection {
    pub fn to_train(&self, mode: LossMode, unbiased: bool, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            steps_per_epoch: self.steps_per_epoch,
            schedule: LrSchedule::WarmupCosine {
                max_lr: self.max_lr,
                warmup_steps: (self.warmup_fraction * self.steps as f64).floor() as usize,
                total_steps: self.steps,
            },
            seed,
            loss_mode: mode,
            unbiased,
            snapshot_clusters: self.snapshot_clusters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnealingSection {
    pub bs_s: usize,
    pub bs_e: usize,
    pub stepsize_bs: usize,
    pub thr0: f64,
    pub stepsize_thr: f64,
    pub lr0: f64,
    pub epsilon: f64,
    pub batches_per_iteration: usize,
    pub compound_lr_decay: bool,
}

impl Default for AnnealingSection {
    fn default() -> Self {
        // same shape as the full-scale reference schedule, shrunk so the
        // batches fit the default 200-cluster dataset
        AnnealingSection {
            bs_s: 64,
            bs_e: 16,
            stepsize_bs: 16,
            thr0: -0.05,
            stepsize_thr: 0.05,
            lr0: 1.5e-4,
            epsilon: 0.75,
            batches_per_iteration: 20,
            compound_lr_decay: false,
        }
    }
}

impl AnnealingSection {
    pub fn to_anneal(&self) -> AnnealConfig {
        AnnealConfig {
            bs_s: self.bs_s,
            bs_e: self.bs_e,
            stepsize_bs: self.stepsize_bs,
            thr0: self.thr0,
            stepsize_thr: self.stepsize_thr,
            lr0: self.lr0,
            epsilon: self.epsilon,
            batches_per_iteration: self.batches_per_iteration,
            compound_lr_decay: self.compound_lr_decay,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Validate every section before any work happens.
    pub fn validate(&self) -> Result<()> {
        self.dataset.to_synthetic().validate()?;
        if self.model.layer_sizes.len() < 2 {
            return Err(Error::Config(
                "model needs at least an input and an output layer".into(),
            ));
        }
        if self.model.layer_sizes[0] != self.dataset.input_dim {
            return Err(Error::Config(format!(
                "model input dim {} does not match dataset dim {}",
                self.model.layer_sizes[0], self.dataset.input_dim
            )));
        }
        self.loss.mode()?;
        self.loss.balance().validate()?;
        self.loss.triplet().validate()?;
        self.supervision.to_supervisor().validate()?;
        if self.training.steps == 0 || self.training.steps_per_epoch == 0 {
            return Err(Error::Config(
                "training steps and steps_per_epoch must be positive".into(),
            ));
        }
        if self.training.batch_size < 2 {
            return Err(Error::Config("training batch size must be at least 2".into()));
        }
        if self.training.batch_size > self.dataset.num_clusters {
            return Err(Error::Config(format!(
                "training batch size {} exceeds {} clusters",
                self.training.batch_size, self.dataset.num_clusters
            )));
        }
        if !(self.training.max_lr > 0.0) {
            return Err(Error::Config("max_lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.training.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup fraction must lie in [0, 1], got {}",
                self.training.warmup_fraction
            )));
        }
        if self.training.snapshot_clusters == 0 {
            return Err(Error::Config("snapshot_clusters must be positive".into()));
        }
        self.annealing.to_anneal().validate()?;
        if self.annealing.bs_s > self.dataset.num_clusters {
            return Err(Error::Config(format!(
                "annealing batch size {} exceeds {} clusters",
                self.annealing.bs_s, self.dataset.num_clusters
            )));
        }
        Ok(())
    }

    /// FNV-1a hash of the canonical serialized form, hex-encoded. Stable
    /// across runs and platforms, unlike the std hasher.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in canonical.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn empty_toml_gives_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let r: std::result::Result<RunConfig, _> = toml::from_str("[loss]\nalpa = 2\n");
        assert!(r.is_err());
        let r: std::result::Result<RunConfig, _> = toml::from_str("[typo_section]\nx = 1\n");
        assert!(r.is_err());
    }

    #[test]
    fn partial_override_keeps_other_defaults() {
        let cfg: RunConfig = toml::from_str("[loss]\ngamma = 0.5\n").unwrap();
        assert_eq!(cfg.loss.gamma, 0.5);
        assert_eq!(cfg.loss.alpha, 2);
        assert_eq!(cfg.training.batch_size, 64);
    }

    #[test]
    fn cross_field_validation_catches_mismatches() {
        let mut cfg = RunConfig::default();
        cfg.model.layer_sizes = vec![16, 8];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = RunConfig::default();
        cfg.training.batch_size = 10_000;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.loss.mode = "contrastive".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_is_stable_and_content_sensitive() {
        let a = RunConfig::default();
        let b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        let mut c = RunConfig::default();
        c.loss.gamma = 0.9;
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn load_reports_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[training]\nsteps = 0\n").unwrap();
        assert!(matches!(RunConfig::load(&p), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::load(&dir.path().join("missing.toml")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn supervisor_mode_follows_checkpoint_field() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.supervision.to_supervisor().mode, SupervisorMode::SelfMode);
        cfg.supervision.checkpoint = "sup.bdsc".into();
        assert!(matches!(
            cfg.supervision.to_supervisor().mode,
            SupervisorMode::Pretrained(_)
        ));
    }
}
