//! Line-based `key=value` run configuration.
//!
//! The format is deliberately trivial: one `key=value` per line, `#`
//! comments, blank lines ignored. Unknown keys are rejected and every key
//! has a documented default, so a typo can never silently change behavior.
//! `serialize` emits a canonical ordering, making parse/serialize
//! idempotent after one normalization pass.

use crate::diffusion::{DiffusionConfig, NoiseDist, Variant};
use crate::error::{Error, Result};
use crate::fit::FitConfig;
use crate::sampler::{GuidanceMode, SamplerConfig};
use crate::train::{DatasetConfig, OptMode, OptimizerConfig, TrainConfig};

trait FromValue: Sized {
    fn from_value(v: &str) -> Option<Self>;
    fn to_value(&self) -> String;
}

impl FromValue for u64 {
    fn from_value(v: &str) -> Option<Self> {
        v.parse().ok()
    }
    fn to_value(&self) -> String {
        self.to_string()
    }
}

impl FromValue for usize {
    fn from_value(v: &str) -> Option<Self> {
        v.parse().ok()
    }
    fn to_value(&self) -> String {
        self.to_string()
    }
}

impl FromValue for f64 {
    fn from_value(v: &str) -> Option<Self> {
        v.parse().ok()
    }
    fn to_value(&self) -> String {
        // Debug formatting round-trips f64 exactly.
        format!("{self:?}")
    }
}

impl FromValue for String {
    fn from_value(v: &str) -> Option<Self> {
        Some(v.to_string())
    }
    fn to_value(&self) -> String {
        self.clone()
    }
}

macro_rules! define_run_config {
    ($(($name:ident, $ty:ty, $default:expr, $doc:expr)),* $(,)?) => {
        /// Flat run configuration covering the diffusion framework, the FIT
        /// architecture, the sampler and the training loop.
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $(#[doc = $doc] pub $name: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($name: $default,)* }
            }
        }

        impl RunConfig {
            fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($name) => {
                        self.$name = <$ty as FromValue>::from_value(value).ok_or_else(|| {
                            Error::Config(format!("bad value `{value}` for key `{key}`"))
                        })?;
                        Ok(())
                    })*
                    _ => Err(Error::Config(format!("unknown key `{key}`"))),
                }
            }

            /// Canonical serialization (fixed key order, normalized values).
            pub fn serialize(&self) -> String {
                let mut out = String::new();
                $(
                    out.push_str(stringify!($name));
                    out.push('=');
                    out.push_str(&FromValue::to_value(&self.$name));
                    out.push('\n');
                )*
                out
            }

            /// Commented template listing every key, its default and meaning.
            pub fn reference() -> String {
                let mut out =
                    String::from("# snapdiff run configuration (key=value, # comments)\n");
                let defaults = RunConfig::default();
                $(
                    out.push_str(&format!(
                        "{}={}  # {}\n",
                        stringify!($name),
                        FromValue::to_value(&defaults.$name),
                        $doc
                    ));
                )*
                out
            }
        }
    };
}

define_run_config![
    (seed, u64, 0, "master seed for init, data and noise"),
    (sigma_data, f64, 1.0, "data standard deviation"),
    (sigma_in, f64, 2.8284271247461903, "input scaling s*sqrt(T); sqrt(8) for the toy shape"),
    (sigma_min, f64, 0.002, "lowest noise level"),
    (sigma_max, f64, 80.0, "highest noise level"),
    (variant, String, "snapvideo".to_string(), "framework variant: snapvideo | edm"),
    (ptrain_mean, f64, -1.2, "log-normal mean of p_train"),
    (ptrain_std, f64, 1.2, "log-normal std of p_train"),
    (frames, usize, 8, "video frames T"),
    (height, usize, 16, "pixel height"),
    (width, usize, 16, "pixel width"),
    (channels, usize, 1, "data channels"),
    (cascade_channels, usize, 0, "low-resolution conditioning channels (0 = first stage)"),
    (patch_h, usize, 4, "patch height"),
    (patch_w, usize, 4, "patch width"),
    (group_t, usize, 8, "group frames (must equal frames)"),
    (group_h, usize, 2, "group height in patch-grid units"),
    (group_w, usize, 2, "group width in patch-grid units"),
    (patch_channels, usize, 32, "patch token channels"),
    (latent_count, usize, 32, "latent token count"),
    (latent_channels, usize, 32, "latent token channels"),
    (blocks, usize, 2, "FIT block count"),
    (global_layers, usize, 2, "latent self-attention layers per block"),
    (patch_head_channels, usize, 16, "per-head channels of patch attention"),
    (latent_head_channels, usize, 16, "per-head channels of latent attention"),
    (cond_channels, usize, 32, "conditioning token channels"),
    (n_classes, usize, 4, "conditioning classes (0 is reserved as null)"),
    (self_cond_prob, f64, 0.9, "self-conditioning probability"),
    (label_dropout, f64, 0.1, "classifier-free label dropout"),
    (dropout, f64, 0.0, "feed-forward dropout"),
    (ff_mult, usize, 4, "feed-forward expansion factor"),
    (data_videos, u64, 1048576, "video pool size of the sprite dataset"),
    (data_images, u64, 1048576, "image pool size of the sprite dataset"),
    (base_framerate, f64, 8.0, "frame rate of unsubsampled videos"),
    (batch_videos, usize, 8, "video samples per batch"),
    (batch_images, usize, 8, "image samples per batch"),
    (train_steps, u64, 1000, "optimization steps"),
    (optimizer, String, "lamb".to_string(), "optimizer: lamb | adam"),
    (lr, f64, 5e-3, "peak learning rate"),
    (beta1, f64, 0.9, "first-moment decay"),
    (beta2, f64, 0.99, "second-moment decay"),
    (adam_eps, f64, 1e-8, "moment epsilon"),
    (weight_decay, f64, 0.01, "decoupled weight decay"),
    (grad_clip, f64, 1.0, "global gradient-norm clip (0 disables)"),
    (warmup_steps, u64, 100, "linear warmup steps"),
    (ema_halflife, f64, 500.0, "EMA halflife in steps (0 = track exactly)"),
    (checkpoint_every, u64, 200, "checkpoint interval in steps"),
    (sample_steps, usize, 64, "sampler steps"),
    (rho, f64, 7.0, "noise-schedule exponent"),
    (guidance, f64, 2.0, "classifier-free guidance weight"),
    (guidance_mode, String, "constant".to_string(), "guidance schedule: constant | oscillating"),
    (threshold, f64, 99.5, "dynamic-thresholding percentile (0 disables)"),
    (recon_weight, f64, 0.5, "reconstruction-guidance weight"),
];

impl RunConfig {
    /// Parse `key=value` text; unknown keys and malformed values are errors.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key=value, got `{raw}`",
                    lineno + 1
                ))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.diffusion()?.validate()?;
        self.fit().validate()?;
        self.training()?;
        self.sampler()?;
        if self.threshold < 0.0 || self.threshold > 100.0 {
            return Err(Error::Config("threshold must lie in [0, 100]".into()));
        }
        Ok(())
    }

    pub fn diffusion(&self) -> Result<DiffusionConfig> {
        let variant = match self.variant.as_str() {
            "snapvideo" => Variant::SnapVideo,
            "edm" => Variant::Edm,
            other => {
                return Err(Error::Config(format!(
                    "variant must be snapvideo|edm, got `{other}`"
                )))
            }
        };
        Ok(DiffusionConfig {
            sigma_data: self.sigma_data,
            sigma_in: self.sigma_in,
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
            variant,
            train_noise: NoiseDist {
                mean: self.ptrain_mean,
                std: self.ptrain_std,
            },
        })
    }

    pub fn fit(&self) -> FitConfig {
        FitConfig {
            frames: self.frames,
            height: self.height,
            width: self.width,
            channels: self.channels,
            cascade_channels: self.cascade_channels,
            patch: (1, self.patch_h, self.patch_w),
            group: (self.group_t, self.group_h, self.group_w),
            patch_channels: self.patch_channels,
            latent_count: self.latent_count,
            latent_channels: self.latent_channels,
            blocks: self.blocks,
            global_layers: self.global_layers,
            patch_head_channels: self.patch_head_channels,
            latent_head_channels: self.latent_head_channels,
            cond_channels: self.cond_channels,
            n_classes: self.n_classes,
            self_cond_prob: self.self_cond_prob,
            label_dropout: self.label_dropout,
            dropout: self.dropout,
            ff_mult: self.ff_mult,
        }
    }

    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            seed: self.seed,
            n_videos: self.data_videos,
            n_images: self.data_images,
            frames: self.frames,
            height: self.height,
            width: self.width,
            n_classes: self.n_classes,
            base_framerate: self.base_framerate,
            framerate_strides: vec![1, 2, 4],
        }
    }

    pub fn training(&self) -> Result<TrainConfig> {
        let mode = match self.optimizer.as_str() {
            "lamb" => OptMode::Lamb,
            "adam" => OptMode::Adam,
            other => {
                return Err(Error::Config(format!(
                    "optimizer must be lamb|adam, got `{other}`"
                )))
            }
        };
        Ok(TrainConfig {
            batch_videos: self.batch_videos,
            batch_images: self.batch_images,
            steps: self.train_steps,
            opt: OptimizerConfig {
                mode,
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
                grad_clip: self.grad_clip,
                warmup_steps: self.warmup_steps,
                total_steps: self.train_steps,
                trust_clamp: 10.0,
            },
            ema_halflife: self.ema_halflife,
            seed: self.seed,
        })
    }

    pub fn sampler(&self) -> Result<SamplerConfig> {
        let guidance_mode = match self.guidance_mode.as_str() {
            "constant" => GuidanceMode::Constant,
            "oscillating" => GuidanceMode::Oscillating,
            other => {
                return Err(Error::Config(format!(
                    "guidance_mode must be constant|oscillating, got `{other}`"
                )))
            }
        };
        Ok(SamplerConfig {
            steps: self.sample_steps,
            rho: self.rho,
            guidance_weight: self.guidance,
            guidance_mode,
            threshold_percentile: if self.threshold > 0.0 {
                Some(self.threshold)
            } else {
                None
            },
            recon_weight: self.recon_weight,
            seed: self.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.serialize();
        let parsed = RunConfig::parse(&text).unwrap();
        assert_eq!(parsed, cfg);
        // Idempotence after one normalization pass.
        assert_eq!(parsed.serialize(), text);
    }

    #[test]
    fn comments_and_overrides() {
        let text = "# comment\nsigma_in = 4.0  # inline\n\nguidance=8\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.sigma_in, 4.0);
        assert_eq!(cfg.guidance, 8.0);
        assert_eq!(cfg.sigma_data, 1.0, "untouched keys keep defaults");
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::parse("sigma_inn=4").is_err());
        assert!(RunConfig::parse("sigma_in=abc").is_err());
        assert!(RunConfig::parse("just a line").is_err());
        assert!(RunConfig::parse("variant=vp")
            .unwrap_err()
            .to_string()
            .contains("variant"));
    }

    #[test]
    fn reference_lists_every_key() {
        let reference = RunConfig::reference();
        let parsed = RunConfig::parse(&reference).unwrap();
        assert_eq!(parsed, RunConfig::default());
    }

    #[test]
    fn conversions_validate() {
        let cfg = RunConfig::default();
        assert!(cfg.diffusion().is_ok());
        cfg.fit().validate().unwrap();
        assert!(cfg.training().is_ok());
        assert!(cfg.sampler().is_ok());

        let bad = RunConfig {
            variant: "vp".into(),
            ..RunConfig::default()
        };
        assert!(bad.diffusion().is_err());
    }
}
