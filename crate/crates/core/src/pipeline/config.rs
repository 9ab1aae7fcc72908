//! Declarative run configuration with a versioned schema.
//!
//! Configs load from TOML. Structural fields (everything that determines
//! parameter shapes) are folded into a fingerprint that checkpoints carry;
//! resuming or evaluating with a mismatched architecture is a hard error.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cfc::CfcConfig;
use crate::dac::{DacConfig, DacLossWeights};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::videodata::CorruptionKind;

pub const CONFIG_VERSION: u32 = 1;

/// Pipeline stages exposed by the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Simulate,
    TrainDac,
    TrainCfc,
    Recover,
    Evaluate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub input_h: usize,
    pub input_w: usize,
    pub s_levels: usize,
    pub channels: Vec<usize>,
    pub stride0: usize,
    pub patch: usize,
    pub token_dim: usize,
    pub global_dim: usize,
    pub positional: bool,
    pub n_prompts: usize,
    pub decoder_dim: usize,
    pub eta: f64,
    pub v_max: f64,
    pub mask_threshold: f64,
    pub temporal_ema: f64,
    pub use_mv_prompts: bool,
    pub content_channels: Vec<usize>,
    pub cfc_d_model: usize,
    pub n_experts: usize,
    pub cfc_n_prompts: usize,
    pub adapt_dim: usize,
    pub enhance_dim: usize,
    #[serde(default)]
    pub loss: LossSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub focal: f64,
    pub dice: f64,
    pub l1: f64,
    pub ce: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = DacLossWeights::default();
        LossSection {
            focal: w.focal,
            dice: w.dice,
            l1: w.l1,
            ce: w.ce,
            focal_alpha: w.focal_alpha,
            focal_gamma: w.focal_gamma,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            input_h: 64,
            input_w: 64,
            s_levels: 3,
            channels: vec![32, 64, 128],
            stride0: 4,
            patch: 16,
            token_dim: 128,
            global_dim: 64,
            positional: true,
            n_prompts: 8,
            decoder_dim: 64,
            eta: 0.5,
            v_max: 16.0,
            mask_threshold: 0.5,
            temporal_ema: 0.0,
            use_mv_prompts: true,
            content_channels: vec![32, 64, 128],
            cfc_d_model: 64,
            n_experts: 2,
            cfc_n_prompts: 8,
            adapt_dim: 32,
            enhance_dim: 32,
            loss: LossSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub n_local: usize,
    pub n_nonlocal: usize,
    pub clips: usize,
    pub frames_per_clip: usize,
    pub area_fraction: f64,
    pub residual_retention: f64,
    pub kinds: Vec<CorruptionKind>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n_local: 5,
            n_nonlocal: 3,
            clips: 8,
            frames_per_clip: 10,
            area_fraction: 0.25,
            residual_retention: 0.3,
            kinds: vec![
                CorruptionKind::ColorStripe,
                CorruptionKind::BlockShift,
                CorruptionKind::FreezePropagate,
                CorruptionKind::TextureNoise,
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainDacSection {
    pub steps: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: String,
    pub batch_clips: usize,
    pub log_every: u64,
    /// Linear warmup steps followed by cosine decay to 10% of `lr`.
    pub warmup_steps: u64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for TrainDacSection {
    fn default() -> Self {
        // stage-1 defaults: AdamW at 5e-5
        TrainDacSection {
            steps: 200,
            lr: 5e-5,
            weight_decay: 0.0,
            optimizer: "adamw".into(),
            batch_clips: 2,
            log_every: 20,
            warmup_steps: 0,
            grad_clip: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCfcSection {
    pub steps: u64,
    pub lr: f64,
    /// Learning-rate multiplier for the completion stand-in
    /// (content encoder + completion block). The default 0.1 puts its
    /// effective rate at 1e-5 under the 1e-4 base.
    pub completion_lr_scale: f64,
    pub optimizer: String,
    pub freeze_recovery: bool,
    pub batch_clips: usize,
    pub log_every: u64,
    /// Linear warmup steps followed by cosine decay to 10% of `lr`.
    pub warmup_steps: u64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for TrainCfcSection {
    fn default() -> Self {
        // stage-2 defaults: Adam at 1e-4, completion fine-tuned at 1e-5,
        // recovery module frozen (assumes a pretrained head)
        TrainCfcSection {
            steps: 300,
            lr: 1e-4,
            completion_lr_scale: 0.1,
            optimizer: "adam".into(),
            freeze_recovery: true,
            batch_clips: 4,
            log_every: 20,
            warmup_steps: 0,
            grad_clip: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    #[serde(default)]
    pub mode: EvalMode,
    #[serde(default)]
    pub recovery: RecoveryKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    #[default]
    Blind,
    Oracle,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryKind {
    #[default]
    Model,
    /// Pass corrupted input through unchanged; a sanity anchor.
    Identity,
}

/// The full run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train_dac: TrainDacSection,
    #[serde(default)]
    pub train_cfc: TrainCfcSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            model: ModelSection::default(),
            data: DataSection::default(),
            train_dac: TrainDacSection::default(),
            train_cfc: TrainCfcSection::default(),
            evaluate: EvaluateSection::default(),
        }
    }
}

impl RunConfig {
    /// Desk-scale overfit profile: small widths and aggressive rates so the
    /// whole two-stage pipeline trains on CPU in minutes.
    pub fn desk() -> Self {
        let mut c = RunConfig::default();
        c.model.channels = vec![16, 32, 64];
        c.model.token_dim = 64;
        c.model.global_dim = 32;
        c.model.decoder_dim = 32;
        c.model.n_prompts = 8;
        c.model.content_channels = vec![16, 32, 64];
        c.model.cfc_d_model = 32;
        c.model.adapt_dim = 16;
        c.model.enhance_dim = 16;
        c.model.loss.focal_alpha = 0.7;
        c.model.loss.focal_gamma = 1.0;
        // the desk profile trains on the two strongly appearance-coded
        // artifact families; the corruption mix is a free parameter
        c.data.kinds = vec![CorruptionKind::ColorStripe, CorruptionKind::TextureNoise];
        c.train_dac.lr = 2e-3;
        c.train_dac.batch_clips = 2;
        c.train_dac.warmup_steps = 20;
        c.train_dac.grad_clip = 5.0;
        c.train_cfc.lr = 3e-3;
        c.train_cfc.completion_lr_scale = 1.0;
        c.train_cfc.freeze_recovery = false;
        c.train_cfc.batch_clips = 1;
        c.train_cfc.warmup_steps = 20;
        c.train_cfc.grad_clip = 5.0;
        c
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.dac_config().validate()?;
        if self.model.content_channels.len() != self.model.s_levels {
            return Err(Error::Config(
                "content_channels depth must match s_levels".into(),
            ));
        }
        if self.data.n_local < 1 {
            return Err(Error::Config("n_local must be >= 1".into()));
        }
        match self.train_dac.optimizer.as_str() {
            "adam" | "adamw" => {}
            other => return Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
        match self.train_cfc.optimizer.as_str() {
            "adam" | "adamw" => {}
            other => return Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            s_levels: self.model.s_levels,
            channels: self.model.channels.clone(),
            stride0: self.model.stride0,
            patch: self.model.patch,
            token_dim: self.model.token_dim,
            global_dim: self.model.global_dim,
            positional: self.model.positional,
            token_grid: (self.model.input_h / self.model.patch)
                * (self.model.input_w / self.model.patch),
        }
    }

    pub fn dac_config(&self) -> DacConfig {
        DacConfig {
            encoder: self.encoder_config(),
            n_prompts: self.model.n_prompts,
            decoder_dim: self.model.decoder_dim,
            input_h: self.model.input_h,
            input_w: self.model.input_w,
            eta: self.model.eta,
            v_max: self.model.v_max,
            loss: DacLossWeights {
                focal: self.model.loss.focal,
                dice: self.model.loss.dice,
                l1: self.model.loss.l1,
                ce: self.model.loss.ce,
                focal_alpha: self.model.loss.focal_alpha,
                focal_gamma: self.model.loss.focal_gamma,
            },
            mask_threshold: self.model.mask_threshold,
            mask_prior: self.data.area_fraction,
            cell_pool: 16,
            temporal_ema: self.model.temporal_ema,
            use_mv_prompts: self.model.use_mv_prompts,
        }
    }

    pub fn cfc_config(&self) -> CfcConfig {
        CfcConfig {
            content_channels: self.model.content_channels.clone(),
            d_model: self.model.cfc_d_model,
            n_experts: self.model.n_experts,
            n_prompts: self.model.cfc_n_prompts,
            adapt_dim: self.model.adapt_dim,
            enhance_dim: self.model.enhance_dim,
        }
    }

    /// Stable hash of every field that determines parameter shapes.
    pub fn fingerprint(&self) -> u64 {
        let m = &self.model;
        let structural = format!(
            "v{} in{}x{} s{} ch{:?} st{} p{} td{} gd{} pos{} np{} dd{} cc{:?} dm{} ne{} cnp{} ad{} ed{}",
            self.version,
            m.input_h,
            m.input_w,
            m.s_levels,
            m.channels,
            m.stride0,
            m.patch,
            m.token_dim,
            m.global_dim,
            m.positional,
            m.n_prompts,
            m.decoder_dim,
            m.content_channels,
            m.cfc_d_model,
            m.n_experts,
            m.cfc_n_prompts,
            m.adapt_dim,
            m.enhance_dim,
        );
        crate::rng::fnv1a_str(&structural)
    }
}
