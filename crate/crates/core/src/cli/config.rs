//! Run configuration: a flat TOML table with defaults for every key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ccam::UnetConfig;
use crate::corpus::{IMAGE_HEIGHT, IMAGE_WIDTH, VOCAB_SIZE};
use crate::diffusion::{ClDenominator, LossWeights};
use crate::encoders::EncoderConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

use super::CliError;

/// Prefix of environment variables that override configuration keys,
/// e.g. `FSACDM_LR=1e-3`.
pub const ENV_PREFIX: &str = "FSACDM_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub image_height: usize,
    pub image_width: usize,
    pub vocab: usize,
    pub d_model: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub lambda: f64,
    pub beta_fa: f64,
    pub tau: f64,
    pub num_negatives: usize,
    pub cl_denominator: ClDenominator,
    pub batch: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub grad_clip: f64,
    pub steps: u64,
    pub checkpoint_every: u64,
    pub ccam_blocks: usize,
    pub crossattn_blocks: usize,
    /// Documents written by the `corpus` command.
    pub corpus_size: usize,
    pub corpus_dir: PathBuf,
    pub out_dir: PathBuf,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let enc = EncoderConfig::default();
        let unet = UnetConfig::default();
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        Self {
            seed: 0,
            image_height: IMAGE_HEIGHT,
            image_width: IMAGE_WIDTH,
            vocab: VOCAB_SIZE,
            d_model: enc.d_model,
            timesteps: model.timesteps,
            beta_start: model.beta_start,
            beta_end: model.beta_end,
            lambda: w.lambda,
            beta_fa: w.beta_fa,
            tau: w.tau,
            num_negatives: w.num_negatives,
            cl_denominator: w.cl_denominator,
            batch: train.batch,
            lr: train.lr,
            warmup_steps: 500,
            grad_clip: 1e4,
            steps: 1000,
            checkpoint_every: 100,
            ccam_blocks: unet.ccam_blocks,
            crossattn_blocks: unet.cross_blocks,
            corpus_size: 8,
            corpus_dir: PathBuf::from("corpus"),
            out_dir: PathBuf::from("run"),
            threads: 1,
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    /// Parses a TOML document; absent keys take their defaults.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("every field has a TOML representation")
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Defaults, then the optional file, then `FSACDM_*` variables from
    /// `env`. Override values are read as TOML literals, falling back to a
    /// plain string, so `FSACDM_OUT_DIR=runs/a` needs no quoting.
    pub fn resolve(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        let mut overrides: Vec<(String, String)> =
            env.into_iter().filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|k| (k.to_ascii_lowercase(), v))).collect();
        overrides.sort();
        for (key, raw) in overrides {
            let value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or(toml::Value::String(raw));
            table.insert(key, value);
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if i64::try_from(self.seed).is_err() {
            return Err(config_err(format!("seed {} exceeds the TOML integer range", self.seed)));
        }
        if (self.image_height, self.image_width) != (IMAGE_HEIGHT, IMAGE_WIDTH) {
            return Err(config_err(format!(
                "image dims {}×{} differ from the renderer's {IMAGE_HEIGHT}×{IMAGE_WIDTH}",
                self.image_height, self.image_width
            )));
        }
        if self.vocab < VOCAB_SIZE {
            return Err(config_err(format!("vocab {} is smaller than the markup vocabulary of {VOCAB_SIZE}", self.vocab)));
        }
        if self.timesteps == 0 {
            return Err(config_err("timesteps must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(config_err(format!("grad_clip must be non-negative, got {}", self.grad_clip)));
        }
        if self.batch == 0 || self.threads == 0 {
            return Err(config_err("batch and threads must be positive"));
        }
        if self.corpus_size <= self.num_negatives {
            return Err(config_err(format!(
                "corpus_size {} leaves fewer than {} negatives per anchor",
                self.corpus_size, self.num_negatives
            )));
        }
        self.model_config()?;
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let encoder = EncoderConfig {
            vocab: self.vocab,
            d_model: self.d_model,
            image_height: self.image_height,
            image_width: self.image_width,
            ..EncoderConfig::default()
        };
        let unet = UnetConfig {
            image_height: self.image_height,
            image_width: self.image_width,
            markup_dim: self.d_model,
            ccam_blocks: self.ccam_blocks,
            cross_blocks: self.crossattn_blocks,
            ..UnetConfig::default()
        };
        let weights = LossWeights {
            lambda: self.lambda,
            beta_fa: self.beta_fa,
            tau: self.tau,
            num_negatives: self.num_negatives,
            cl_denominator: self.cl_denominator,
            ..LossWeights::default()
        };
        let cfg = ModelConfig {
            encoder,
            unet,
            timesteps: self.timesteps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            weights,
        };
        crate::model::Model::new(cfg.clone()).map_err(|e| config_err(e.to_string()))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            batch: self.batch,
            lr: self.lr,
            steps: self.steps,
            checkpoint_every: self.checkpoint_every,
            threads: self.threads,
            warmup_steps: self.warmup_steps,
            grad_clip: self.grad_clip,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn no_env() -> Vec<(String, String)> {
        Vec::new()
    }

    #[test]
    fn defaults_follow_the_published_weights() {
        let c = RunConfig::default();
        assert_eq!((c.lambda, c.beta_fa, c.num_negatives), (0.005, 0.02, 5));
        assert_eq!((c.timesteps, c.beta_start, c.beta_end), (50, 1e-4, 0.02));
        c.validate().unwrap();
    }

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("lamda = 0.1\n").unwrap_err();
        assert!(matches!(err, CliError::Config(ref m) if m.contains("lamda")), "{err}");
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in ["d_model = 7", "image_width = 64", "lr = 0.0", "vocab = 3", "num_negatives = 9", "tau = -1.0", "steps = \"many\""] {
            assert!(matches!(RunConfig::from_toml(text), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let mut c = RunConfig::default();
        c.lr = 0.1 + 0.2;
        c.beta_end = 1.0 / 3.0;
        c.cl_denominator = ClDenominator::NegativesOnly;
        c.out_dir = PathBuf::from("a b/ü");
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml(), c.to_toml());
    }

    #[test]
    fn environment_overrides_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "lr = 0.5\nsteps = 7\n").unwrap();
        let env = vec![
            ("FSACDM_LR".to_string(), "1e-3".to_string()),
            ("FSACDM_OUT_DIR".to_string(), "runs/x".to_string()),
            ("FSACDM_CL_DENOMINATOR".to_string(), "negatives_only".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ];
        let c = RunConfig::resolve(Some(&p), env).unwrap();
        assert_eq!((c.lr, c.steps), (1e-3, 7));
        assert_eq!(c.out_dir, PathBuf::from("runs/x"));
        assert_eq!(c.cl_denominator, ClDenominator::NegativesOnly);
        let bad = vec![("FSACDM_NOPE".to_string(), "1".to_string())];
        assert!(matches!(RunConfig::resolve(None, bad), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::resolve(Some(&dir.path().join("missing.toml")), no_env()), Err(CliError::Io(_))));
    }

    proptest! {
        #[test]
        fn arbitrary_numbers_round_trip(lr in 1e-8f64..1.0, lambda in 0.0f64..10.0, seed in 0..=i64::MAX as u64, steps in 0u64..1_000_000) {
            let c = RunConfig { lr, lambda, seed, steps, ..RunConfig::default() };
            prop_assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        }
    }
}
