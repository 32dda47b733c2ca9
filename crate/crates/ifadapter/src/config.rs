//! The run configuration: a single JSON document that drives every
//! subcommand. Defaults are the pinned desk-scale reference settings; a
//! config file may set any subset of fields and the rest fall back to those
//! defaults, so the snapshot embedded in a run manifest always describes the
//! run completely.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterConfig;
use crate::data::{GenConfig, IMG_SIZE};
use crate::diffusion::{
    DenoiserConfig, LatentCodec, NoiseSchedule, SampleConfig, TrainConfig,
};
use crate::text::{TextEncoder, ENCODER_DEPTHS};
use crate::{Error, Result};

/// Pixel edge of the square patch that maps to one latent cell.
pub const PATCH: usize = 4;

/// Environment variable that, when set, overrides every stage seed.
pub const SEED_ENV: &str = "IFAL_SEED";

/// Model identity: everything needed to re-instantiate the frozen text
/// encoder, the codec, the denoiser, and the adapter, bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub denoiser: DenoiserConfig,
    pub adapter: AdapterConfig,
    /// Master seed for trainable parameter initialization.
    pub init_seed: u64,
    /// Seed of the frozen text encoder.
    pub text_seed: u64,
    /// Seed of the fixed image/latent codec.
    pub codec_seed: u64,
    /// Diffusion chain length `T`.
    pub t_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            denoiser: DenoiserConfig::default(),
            adapter: AdapterConfig::default(),
            init_seed: 42,
            text_seed: 11,
            codec_seed: 1234,
            t_steps: 200,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        if self.adapter.d_model != self.denoiser.channels {
            return Err(Error::Validation(format!(
                "adapter d_model {} must equal denoiser channels {}",
                self.adapter.d_model, self.denoiser.channels
            )));
        }
        if let Some(&s) = self
            .adapter
            .sites
            .iter()
            .find(|&&s| s >= self.denoiser.blocks)
        {
            return Err(Error::Validation(format!(
                "injection site {s} out of range for {} denoiser blocks",
                self.denoiser.blocks
            )));
        }
        if self.adapter.depths != ENCODER_DEPTHS {
            return Err(Error::Validation(format!(
                "adapter taps {} text depths, encoder exposes {ENCODER_DEPTHS}",
                self.adapter.depths
            )));
        }
        if self.t_steps < 2 {
            return Err(Error::Validation(format!(
                "diffusion needs at least 2 timesteps, got {}",
                self.t_steps
            )));
        }
        if self.denoiser.latent_h * PATCH != IMG_SIZE || self.denoiser.latent_w * PATCH != IMG_SIZE
        {
            return Err(Error::Validation(format!(
                "latent grid {}x{} does not tile the {IMG_SIZE}px canvas with {PATCH}px patches",
                self.denoiser.latent_h, self.denoiser.latent_w
            )));
        }
        Ok(())
    }

    /// The codec every command shares, derived from this config alone.
    pub fn codec(&self) -> Result<LatentCodec> {
        LatentCodec::new(
            self.codec_seed,
            IMG_SIZE,
            IMG_SIZE,
            PATCH,
            self.denoiser.latent_channels,
        )
    }

    pub fn encoder(&self) -> TextEncoder {
        TextEncoder::new(self.text_seed)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.t_steps)
    }
}

/// Evaluation knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Corpus layouts rendered and scored per run.
    pub n_eval: usize,
    /// Seed of the fixed feature projection behind the distribution metric.
    pub feature_seed: u64,
    /// Base seed for per-sample generation noise.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> EvalConfig {
        EvalConfig {
            n_eval: 16,
            feature_seed: 5,
            seed: 7,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_eval == 0 {
            return Err(Error::Validation("eval needs at least 1 sample".into()));
        }
        Ok(())
    }
}

/// The complete configuration. One instance is snapshotted into every run
/// manifest; re-running a command from that snapshot (same platform)
/// reproduces its artifacts bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub model: ModelConfig,
    pub gen: GenConfig,
    pub train_base: TrainConfig,
    pub train_adapter: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

impl Default for AppConfig {
    fn default() -> AppConfig {
        AppConfig {
            model: ModelConfig::default(),
            gen: GenConfig::default(),
            train_base: TrainConfig {
                steps: 400,
                batch_size: 8,
                seed: 100,
                ..TrainConfig::default()
            },
            train_adapter: TrainConfig {
                steps: 300,
                batch_size: 8,
                lr: 3e-4,
                seed: 200,
                ..TrainConfig::default()
            },
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl AppConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.gen.validate()?;
        self.train_base.validate()?;
        self.train_adapter.validate()?;
        self.sample.validate()?;
        self.eval.validate()
    }

    /// Resolve the config for a run: an explicit `--config` path wins, else
    /// `workdir/config.json` if present, else built-in defaults. The result
    /// is always validated.
    pub fn load(explicit: Option<&Path>, workdir: &Path) -> Result<AppConfig> {
        let path = match explicit {
            Some(p) => Some(p.to_path_buf()),
            None => {
                let cand = workdir.join("config.json");
                cand.is_file().then_some(cand)
            }
        };
        let cfg: AppConfig = match path {
            Some(p) => serde_json::from_str(&fs::read_to_string(&p)?)?,
            None => AppConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<AppConfig> {
        let cfg: AppConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Force one seed onto every stage. Used by the `IFAL_SEED` override so
    /// a single environment variable pins the whole pipeline.
    pub fn override_seeds(&mut self, seed: u64) {
        self.gen.seed = seed;
        self.train_base.seed = seed;
        self.train_adapter.seed = seed;
        self.sample.seed = seed;
        self.eval.seed = seed;
    }
}

/// Read the `IFAL_SEED` override: unset means `None`, anything set must be
/// an unsigned integer.
pub fn env_seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(raw) => raw
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| {
                Error::Validation(format!(
                    "{SEED_ENV} must be an unsigned integer, got {raw:?}"
                ))
            }),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Validation(format!("{SEED_ENV}: {e}"))),
    }
}
