//! Model, loss and training hyperparameters, presets and the run-config file.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::frequency::MaskVariant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    #[default]
    Fcvsr,
    FcvsrS,
    Custom,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fcvsr" => Ok(Self::Fcvsr),
            "fcvsr-s" | "fcvsr_s" => Ok(Self::FcvsrS),
            "custom" => Ok(Self::Custom),
            other => Err(Error::Config(format!("unknown preset '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Adaptive convolutions per alignment (N).
    pub n_align: usize,
    /// Frequency subbands (Q).
    pub q_bands: usize,
    /// Residual groups in the reconstruction head (R).
    pub r_groups: usize,
    /// Adaptive kernel size (k), odd.
    pub kernel_size: usize,
    /// Feature channels (c).
    pub channels: usize,
    /// Image channels (c_I), 1 or 3.
    pub image_channels: usize,
    pub scale: usize,
    /// Residual scale inside enhancement blocks.
    pub gamma: f64,
    pub mask_variant: MaskVariant,
    pub mean_filter_size: usize,
    /// Reuse one motion estimator / kernel predictor / fusion conv for all three alignments.
    pub share_alignment: bool,
    /// Replace enhancement blocks and channel attention in the refinement stage with identities.
    pub identity_hooks: bool,
    pub use_mgaa: bool,
    pub use_motion: bool,
    pub use_mffr: bool,
    pub use_ffe: bool,
    pub use_fbe: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::fcvsr()
    }
}

impl ModelConfig {
    pub fn fcvsr() -> Self {
        Self {
            n_align: 6,
            q_bands: 8,
            r_groups: 10,
            kernel_size: 5,
            channels: 64,
            image_channels: 3,
            scale: 4,
            gamma: 0.2,
            mask_variant: MaskVariant::ConsecutiveDifference,
            mean_filter_size: 3,
            share_alignment: true,
            identity_hooks: false,
            use_mgaa: true,
            use_motion: true,
            use_mffr: true,
            use_ffe: true,
            use_fbe: true,
        }
    }

    pub fn fcvsr_s() -> Self {
        Self {
            n_align: 4,
            q_bands: 4,
            r_groups: 3,
            ..Self::fcvsr()
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Fcvsr | Preset::Custom => Self::fcvsr(),
            Preset::FcvsrS => Self::fcvsr_s(),
        }
    }

    pub fn with_channels(mut self, c: usize) -> Self {
        self.channels = c;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_align >= 1, Config, "N must be >= 1");
        ensure!(self.q_bands >= 1, Config, "Q must be >= 1");
        ensure!(self.r_groups >= 1, Config, "R must be >= 1");
        ensure!(self.kernel_size % 2 == 1, Config, "adaptive kernel size k must be odd, got {}", self.kernel_size);
        ensure!(self.channels >= 1, Config, "channels must be >= 1");
        ensure!(
            matches!(self.image_channels, 1 | 3),
            Config,
            "image channels must be 1 or 3, got {}",
            self.image_channels
        );
        ensure!(self.scale >= 1, Config, "scale must be >= 1");
        ensure!(self.mean_filter_size % 2 == 1, Config, "mean filter size must be odd");
        ensure!(self.gamma.is_finite(), Config, "gamma must be finite");
        Ok(())
    }
}

/// Normalisation of the per-group InfoNCE sums in the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GroupReduction {
    /// Sum of the InfoNCE terms in each group.
    #[default]
    Sum,
    /// Average over the positives of each group.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub tau: f64,
    pub eps: f64,
    pub group_reduction: GroupReduction,
    pub use_l1_term: bool,
    pub use_l2_term: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            tau: 1.0,
            eps: 1e-4,
            group_reduction: GroupReduction::Sum,
            use_l1_term: true,
            use_l2_term: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.alpha >= 0.0, Config, "alpha must be >= 0");
        ensure!(self.tau > 0.0, Config, "tau must be > 0");
        ensure!(self.eps > 0.0, Config, "eps must be > 0");
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr0: f64,
    /// Epochs at which the learning rate halves.
    pub milestones: Vec<u64>,
    pub total_epochs: u64,
    /// Multiplies milestones and total epochs (desk-scale runs use e.g. 0.01).
    pub schedule_scale: f64,
    /// Optimizer steps per schedule epoch.
    pub steps_per_epoch: u64,
    /// HR patch size; the LR crop is `patch / scale`. 0 trains on whole frames.
    pub patch: usize,
    /// Random dihedral transforms on training samples.
    pub augment: bool,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub checkpoint_every: u64,
    /// Stop early once the training-batch PSNR reaches this value (dB).
    pub target_psnr: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 8,
            lr0: 2e-4,
            milestones: vec![2000, 8000, 12000],
            total_epochs: 30000,
            schedule_scale: 1.0,
            steps_per_epoch: 1,
            patch: 128,
            augment: true,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 1000,
            target_psnr: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch >= 1, Config, "batch must be >= 1");
        ensure!(self.lr0 > 0.0, Config, "lr0 must be > 0");
        ensure!(self.schedule_scale > 0.0, Config, "schedule_scale must be > 0");
        ensure!(self.steps_per_epoch >= 1, Config, "steps_per_epoch must be >= 1");
        ensure!(self.checkpoint_every >= 1, Config, "checkpoint_every must be >= 1");
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        ((self.total_epochs as f64 * self.schedule_scale).round() as u64).max(1) * self.steps_per_epoch
    }

    /// Learning rate for a 0-based optimizer step: `lr0 / 2^(milestones passed)`.
    pub fn lr_at_step(&self, step: u64) -> f64 {
        let epoch = step / self.steps_per_epoch;
        self.lr_at_epoch(epoch)
    }

    pub fn lr_at_epoch(&self, epoch: u64) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| epoch >= (m as f64 * self.schedule_scale).round() as u64)
            .count();
        self.lr0 / f64::powi(2.0, passed as i32)
    }
}

/// Everything a run needs; serialized as the `--config` TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_preset(p: Preset) -> Self {
        Self {
            preset: p,
            model: ModelConfig::preset(p),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let f = ModelConfig::fcvsr();
        assert_eq!((f.n_align, f.q_bands, f.r_groups), (6, 8, 10));
        let s = ModelConfig::fcvsr_s();
        assert_eq!((s.n_align, s.q_bands, s.r_groups), (4, 4, 3));
        assert_eq!(f.scale, 4);
    }

    #[test]
    fn even_kernel_rejected() {
        let mut c = ModelConfig::fcvsr_s();
        c.kernel_size = 4;
        assert!(c.validate().is_err());
        c.kernel_size = 3;
        c.image_channels = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn schedule_halves_at_milestones() {
        let t = TrainConfig::default();
        assert_eq!(t.lr_at_epoch(0), 2e-4);
        assert_eq!(t.lr_at_epoch(1999), 2e-4);
        assert_eq!(t.lr_at_epoch(2000), 1e-4);
        assert_eq!(t.lr_at_epoch(8000), 5e-5);
        assert_eq!(t.lr_at_epoch(12000), 2.5e-5);
        let mut prev = f64::INFINITY;
        for e in (0..30000).step_by(97) {
            let lr = t.lr_at_epoch(e);
            assert!(lr <= prev);
            prev = lr;
        }
        let scaled = TrainConfig {
            schedule_scale: 0.01,
            ..TrainConfig::default()
        };
        assert_eq!(scaled.lr_at_epoch(20), 1e-4);
        assert_eq!(scaled.total_steps(), 300);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::from_preset(Preset::FcvsrS);
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        let partial = RunConfig::from_toml("[model]\nchannels = 16\n").unwrap();
        assert_eq!(partial.model.channels, 16);
        assert!(RunConfig::from_toml("[model]\nbogus = 1\n").is_err());
    }
}
