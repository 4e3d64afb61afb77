//! The diffusion framework: plain EDM and the input-scaled rewrite.
//!
//! Both variants share the forward process `x_sigma = x / sigma_in + sigma * eps`
//! and the loss weight `lambda(sigma) = 1/sigma_data^2 + 1/sigma^2`. They differ
//! in how the network parameterization absorbs the input scaling:
//!
//! - `Edm` keeps the original scaling functions. Plugging the scaled forward
//!   process into them leaves a spurious `sigma_data^2 (sigma_in - 1) / (sigma_in sigma) * x`
//!   term in the training target, which blows up as `sigma -> 0`. This
//!   variant exists to demonstrate that failure mode; it is only a sane
//!   training setup at `sigma_in = 1`.
//! - `SnapVideo` rewrites the scalings so the target stays the v-prediction
//!   form `sigma_data^2 eps - sigma x` for every `sigma_in`, the network input and
//!   target have unit variance, and the effective loss weight keeps
//!   `lambda` unchanged. At `sigma_in = 1` it coincides with `Edm`.
//!
//! Sign convention: the training target is the v-form `sigma_data^2 eps - sigma x`
//! and `c_out` is negative, for both variants, so that the `sigma_in = 1`
//! reduction is an exact identity quantity by quantity.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Which column of the framework table to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Original EDM scalings (spurious target term when `sigma_in != 1`).
    Edm,
    /// Input-scaled rewrite with the v-prediction target for all `sigma_in`.
    SnapVideo,
}

/// Log-normal parameters of the training noise distribution `p_train`.
#[derive(Debug, Clone, Copy)]
pub struct NoiseDist {
    pub mean: f64,
    pub std: f64,
}

/// Framework parameters (every symbol of the scaling table).
#[derive(Debug, Clone)]
pub struct DiffusionConfig {
    pub sigma_data: f64,
    pub sigma_in: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub variant: Variant,
    /// `sigma ~ exp(N(mean, std))`, clamped to `[sigma_min, sigma_max]`.
    pub train_noise: NoiseDist,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            sigma_data: 1.0,
            sigma_in: 1.0,
            sigma_min: 0.002,
            sigma_max: 80.0,
            variant: Variant::SnapVideo,
            // The paper never states p_train; log-normal(-1.2, 1.2) follows
            // the EDM convention and is exposed here as configuration.
            train_noise: NoiseDist { mean: -1.2, std: 1.2 },
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_data <= 0.0 || self.sigma_in <= 0.0 {
            return Err(Error::InvalidArg(
                "sigma_data and sigma_in must be positive".into(),
            ));
        }
        if self.sigma_min <= 0.0 || self.sigma_min >= self.sigma_max {
            return Err(Error::InvalidArg(
                "need 0 < sigma_min < sigma_max".into(),
            ));
        }
        Ok(())
    }
}

/// The six scaling functions evaluated at one noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scalings {
    pub c_in: f64,
    pub c_out: f64,
    pub c_skip: f64,
    pub c_nrm: f64,
    pub w: f64,
    pub lambda: f64,
}

/// Evaluate the scaling functions for `cfg.variant` at noise level `sigma`.
pub fn scalings(sigma: f64, cfg: &DiffusionConfig) -> Result<Scalings> {
    if sigma <= 0.0 {
        return Err(Error::InvalidArg(format!("scalings need sigma > 0, got {sigma}")));
    }
    let sd2 = cfg.sigma_data * cfg.sigma_data;
    let s2 = sigma * sigma;
    let lambda = 1.0 / sd2 + 1.0 / s2;
    let c_nrm = 1.0 / (cfg.sigma_data * (s2 + sd2).sqrt());
    let out = match cfg.variant {
        Variant::Edm => Scalings {
            c_in: 1.0 / (sd2 + s2).sqrt(),
            c_out: -sigma * cfg.sigma_data / (s2 + sd2).sqrt(),
            c_skip: sd2 / (s2 + sd2),
            c_nrm,
            w: 1.0,
            lambda,
        },
        Variant::SnapVideo => {
            let si = cfg.sigma_in;
            Scalings {
                c_in: 1.0 / (sd2 / (si * si) + s2).sqrt(),
                c_out: -si * sigma * cfg.sigma_data * (s2 + sd2).sqrt() / (sd2 + si * s2),
                c_skip: si * sd2 / (si * s2 + sd2),
                c_nrm,
                w: (s2 + sd2) * (s2 + sd2) / ((s2 + sd2 / si) * (s2 + sd2 / si)),
                lambda,
            }
        }
    };
    Ok(out)
}

/// Forward process `x / sigma_in + sigma * eps` (both variants; an `Edm`
/// config normally carries `sigma_in = 1`, giving `x + sigma * eps`).
pub fn forward_process<E: Element>(
    x: &Tensor<E>,
    sigma: f64,
    eps: &Tensor<E>,
    cfg: &DiffusionConfig,
) -> Result<Tensor<E>> {
    if x.shape() != eps.shape() {
        return Err(Error::shape(format!(
            "forward_process shape mismatch: {:?} vs {:?}",
            x.shape(),
            eps.shape()
        )));
    }
    x.scale(E::from_f64(1.0 / cfg.sigma_in))?
        .add(&eps.scale(E::from_f64(sigma))?)
}

/// Training target. `SnapVideo` returns the v-form `sigma_data^2 eps - sigma x`
/// for every `sigma_in`; `Edm` additionally carries the spurious
/// `sigma_data^2 (sigma_in - 1) / (sigma_in sigma) * x` term when `sigma_in != 1`,
/// the instability this framework removes.
pub fn train_target<E: Element>(
    x: &Tensor<E>,
    eps: &Tensor<E>,
    sigma: f64,
    cfg: &DiffusionConfig,
) -> Result<Tensor<E>> {
    if x.shape() != eps.shape() {
        return Err(Error::shape("train_target shape mismatch"));
    }
    let sd2 = cfg.sigma_data * cfg.sigma_data;
    let v = eps
        .scale(E::from_f64(sd2))?
        .sub(&x.scale(E::from_f64(sigma))?)?;
    match cfg.variant {
        Variant::SnapVideo => Ok(v),
        Variant::Edm => {
            if cfg.sigma_in == 1.0 {
                Ok(v)
            } else {
                let spurious = sd2 * (cfg.sigma_in - 1.0) / (cfg.sigma_in * sigma);
                v.add(&x.scale(E::from_f64(spurious))?)
            }
        }
    }
}

/// Reconstruct the denoised estimate `c_out * f_out + c_skip * x_sigma`.
pub fn denoise<E: Element>(
    f_out: &Tensor<E>,
    x_sigma: &Tensor<E>,
    sigma: f64,
    cfg: &DiffusionConfig,
) -> Result<Tensor<E>> {
    if f_out.shape() != x_sigma.shape() {
        return Err(Error::shape("denoise shape mismatch"));
    }
    let s = scalings(sigma, cfg)?;
    f_out
        .scale(E::from_f64(s.c_out))?
        .add(&x_sigma.scale(E::from_f64(s.c_skip))?)
}

fn mean_batch_sum_rest<E: Element>(sq: &Tensor<E>) -> Result<Tensor<E>> {
    let batch = sq.shape()[0];
    sq.sum_all()?.scale(E::from_f64(1.0 / batch as f64))
}

/// Denoiser-space loss `lambda(sigma) * ||d - x||^2`, mean over the batch
/// axis and sum over all remaining axes.
pub fn loss_d<E: Element>(
    d: &Tensor<E>,
    x: &Tensor<E>,
    sigma: f64,
    cfg: &DiffusionConfig,
) -> Result<Tensor<E>> {
    let s = scalings(sigma, cfg)?;
    let sq = d.sub(x)?.square()?;
    mean_batch_sum_rest(&sq)?.scale(E::from_f64(s.lambda))
}

/// Network-space loss `w(sigma) * ||f_out - c_nrm(sigma) * F_tgt||^2`, same
/// reduction as [`loss_d`]. Consumes the same `(x, eps, sigma)` that built
/// the network input.
pub fn loss_f<E: Element>(
    f_out: &Tensor<E>,
    x: &Tensor<E>,
    eps: &Tensor<E>,
    sigma: f64,
    cfg: &DiffusionConfig,
) -> Result<Tensor<E>> {
    let s = scalings(sigma, cfg)?;
    let tgt = train_target(x, eps, sigma, cfg)?.scale(E::from_f64(s.c_nrm))?;
    let sq = f_out.sub(&tgt)?.square()?;
    mean_batch_sum_rest(&sq)?.scale(E::from_f64(s.w))
}

/// Recover `x` from the noisy sample and the v-target:
/// `x = (x_sigma - (sigma/sigma_data^2) v) / (1/sigma_in + sigma^2/sigma_data^2)`.
pub fn x_from_v<E: Element>(
    x_sigma: &Tensor<E>,
    v: &Tensor<E>,
    sigma: f64,
    cfg: &DiffusionConfig,
) -> Result<Tensor<E>> {
    if x_sigma.shape() != v.shape() {
        return Err(Error::shape("x_from_v shape mismatch"));
    }
    let sd2 = cfg.sigma_data * cfg.sigma_data;
    let denom = 1.0 / cfg.sigma_in + sigma * sigma / sd2;
    x_sigma
        .sub(&v.scale(E::from_f64(sigma / sd2))?)?
        .scale(E::from_f64(1.0 / denom))
}

/// Recover the v-target from the noisy sample and clean data:
/// `v = (sigma_data^2 x_sigma - (sigma_data^2/sigma_in + sigma^2) x) / sigma`.
pub fn v_from_x<E: Element>(
    x_sigma: &Tensor<E>,
    x: &Tensor<E>,
    sigma: f64,
    cfg: &DiffusionConfig,
) -> Result<Tensor<E>> {
    if sigma == 0.0 {
        return Err(Error::InvalidArg("v_from_x undefined at sigma = 0".into()));
    }
    if x_sigma.shape() != x.shape() {
        return Err(Error::shape("v_from_x shape mismatch"));
    }
    let sd2 = cfg.sigma_data * cfg.sigma_data;
    x_sigma
        .scale(E::from_f64(sd2))?
        .sub(&x.scale(E::from_f64(sd2 / cfg.sigma_in + sigma * sigma))?)?
        .scale(E::from_f64(1.0 / sigma))
}

/// Draw a training noise level: `exp(N(mean, std))` clamped to
/// `[sigma_min, sigma_max]`.
pub fn sample_sigma(rng: &mut ChaCha8Rng, cfg: &DiffusionConfig) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    (cfg.train_noise.mean + cfg.train_noise.std * z)
        .exp()
        .clamp(cfg.sigma_min, cfg.sigma_max)
}
