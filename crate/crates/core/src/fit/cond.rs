//! Conditioning tokens: noise level, frame rate, original resolution and
//! class id, plus the cascade noise-augmentation token.
//!
//! Scalar signals go through a sinusoidal embedding followed by a 2-layer
//! MLP. The infinite frame rate used for images is a sentinel that cannot
//! be embedded sinusoidally, so it selects a dedicated learned embedding
//! instead. Class conditioning is a learned table whose row 0 is the null
//! embedding used both for classifier-free dropout and unconditional
//! sampling.

use super::params::{ParamInit, ParamStore};
use super::FitConfig;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Frame rate of a sample; images are videos of infinite frame rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FrameRate {
    Finite(f64),
    Infinite,
}

/// Per-sample conditioning inputs for a forward pass.
pub struct CondInputs<'a> {
    pub sigma: &'a [f64],
    pub framerate: &'a [FrameRate],
    /// Original (pre-resize) resolution `(height, width)`.
    pub resolution: &'a [(u32, u32)],
    /// Class index; 0 is the null row.
    pub class_id: &'a [usize],
    /// Cascade noise-augmentation level, required iff the model has
    /// cascade conditioning channels.
    pub aug_sigma: Option<&'a [f64]>,
}

impl CondInputs<'_> {
    pub fn batch(&self) -> usize {
        self.sigma.len()
    }

    pub fn validate(&self, cfg: &FitConfig) -> Result<()> {
        let b = self.batch();
        if self.framerate.len() != b || self.resolution.len() != b || self.class_id.len() != b {
            return Err(Error::shape(
                "conditioning inputs must all have batch length",
            ));
        }
        if let Some(&bad) = self.class_id.iter().find(|&&c| c > cfg.n_classes) {
            return Err(Error::InvalidArg(format!(
                "class id {bad} out of range (n_classes = {})",
                cfg.n_classes
            )));
        }
        match (cfg.cascade_channels > 0, &self.aug_sigma) {
            (true, None) => Err(Error::InvalidArg(
                "cascade model needs aug_sigma conditioning".into(),
            )),
            (false, Some(_)) => Err(Error::InvalidArg(
                "aug_sigma given but the model has no cascade channels".into(),
            )),
            (true, Some(a)) if a.len() != b => {
                Err(Error::shape("aug_sigma batch length mismatch"))
            }
            _ => Ok(()),
        }
    }
}

/// Sinusoidal features of a scalar: `dim/2` log-spaced frequencies, sin
/// then cos halves.
fn sinusoidal(value: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = (value * freq).sin();
        out[half + k] = (value * freq).cos();
    }
    out
}

pub fn init_cond_params<E: Element>(init: &mut ParamInit<E>, cfg: &FitConfig) -> Result<()> {
    let d = cfg.cond_channels;
    for name in ["cond.sigma", "cond.nu", "cond.res"] {
        init.linear_weight(&format!("{name}.mlp1.w"), d, d)?;
        init.zeros(&format!("{name}.mlp1.b"), &[d])?;
        init.linear_weight(&format!("{name}.mlp2.w"), d, d)?;
        init.zeros(&format!("{name}.mlp2.b"), &[d])?;
    }
    init.normal("cond.nu.infinite", &[d], 0.02)?;
    init.normal("cond.class.table", &[cfg.n_classes + 1, d], 0.02)?;
    if cfg.cascade_channels > 0 {
        init.linear_weight("cond.aug.mlp1.w", d, d)?;
        init.zeros("cond.aug.mlp1.b", &[d])?;
        init.linear_weight("cond.aug.mlp2.w", d, d)?;
        init.zeros("cond.aug.mlp2.b", &[d])?;
    }
    Ok(())
}

pub fn cond_param_count(cfg: &FitConfig) -> usize {
    let d = cfg.cond_channels;
    let mlp = 2 * (d * d + d);
    let mut total = 3 * mlp            // sigma, nu, res MLPs
        + d                            // infinite-framerate embedding
        + (cfg.n_classes + 1) * d;     // class table with null row
    if cfg.cascade_channels > 0 {
        total += mlp;
    }
    total
}

/// Number of conditioning tokens per sample.
pub fn cond_token_count(cfg: &FitConfig) -> usize {
    if cfg.cascade_channels > 0 {
        5
    } else {
        4
    }
}

fn mlp2<E: Element>(
    features: Tensor<E>,
    params: &ParamStore<E>,
    prefix: &str,
) -> Result<Tensor<E>> {
    features
        .matmul(params.get(&format!("{prefix}.mlp1.w"))?)?
        .add(params.get(&format!("{prefix}.mlp1.b"))?)?
        .gelu()?
        .matmul(params.get(&format!("{prefix}.mlp2.w"))?)?
        .add(params.get(&format!("{prefix}.mlp2.b"))?)
}

fn scalar_token<E: Element>(
    values: &[f64],
    params: &ParamStore<E>,
    prefix: &str,
    dim: usize,
) -> Result<Tensor<E>> {
    let b = values.len();
    let mut feats = Vec::with_capacity(b * dim);
    for &v in values {
        feats.extend(sinusoidal(v, dim).into_iter().map(E::from_f64));
    }
    mlp2(Tensor::new(feats, &[b, dim])?, params, prefix)
}

/// Assemble the `[B, n_cond, cond_channels]` conditioning token sequence:
/// sigma, frame rate, resolution, class (and cascade noise level).
pub fn build_cond_tokens<E: Element>(
    cond: &CondInputs,
    params: &ParamStore<E>,
    cfg: &FitConfig,
) -> Result<Tensor<E>> {
    cond.validate(cfg)?;
    let b = cond.batch();
    let d = cfg.cond_channels;

    // sigma token: sinusoidal of ln(sigma)/4.
    let sig_vals: Vec<f64> = cond.sigma.iter().map(|s| s.ln() / 4.0).collect();
    let sigma_tok = scalar_token(&sig_vals, params, "cond.sigma", d)?;

    // Frame-rate token: finite rates go through the shared embedding (an
    // arbitrary placeholder value is computed for infinite entries and then
    // masked out); the sentinel row replaces them.
    let nu_vals: Vec<f64> = cond
        .framerate
        .iter()
        .map(|f| match f {
            FrameRate::Finite(v) => v.ln() / 4.0,
            FrameRate::Infinite => 0.0,
        })
        .collect();
    let finite_tok = scalar_token(&nu_vals, params, "cond.nu", d)?;
    let mask: Vec<E> = cond
        .framerate
        .iter()
        .flat_map(|f| {
            let m = if matches!(f, FrameRate::Finite(_)) {
                E::one()
            } else {
                E::zero()
            };
            std::iter::repeat(m).take(d)
        })
        .collect();
    let mask = Tensor::new(mask, &[b, d])?;
    let inf_row = params.get("cond.nu.infinite")?.reshape(&[1, d])?.broadcast_to(&[b, d])?;
    let inv_mask = mask.neg()?.add_scalar(E::one())?;
    let nu_tok = finite_tok.mul(&mask)?.add(&inf_row.mul(&inv_mask)?)?;

    // Resolution token: height embeds into the first half of the sinusoid
    // input, width into the second, via value mixing before the MLP.
    let res_vals: Vec<f64> = cond
        .resolution
        .iter()
        .map(|(h, w)| (*h as f64).ln() + 0.5 * (*w as f64).ln())
        .collect();
    let res_tok = scalar_token(&res_vals, params, "cond.res", d)?;

    let class_tok = params.get("cond.class.table")?.index_select(cond.class_id)?;

    let mut toks = vec![
        sigma_tok.reshape(&[b, 1, d])?,
        nu_tok.reshape(&[b, 1, d])?,
        res_tok.reshape(&[b, 1, d])?,
        class_tok.reshape(&[b, 1, d])?,
    ];
    if let Some(aug) = cond.aug_sigma {
        // ln is undefined at 0 (clean low-res conditioning), so shift.
        let aug_vals: Vec<f64> = aug.iter().map(|s| (s + 1e-4).ln() / 4.0).collect();
        toks.push(scalar_token(&aug_vals, params, "cond.aug", d)?.reshape(&[b, 1, d])?);
    }
    Tensor::concat(&toks, 1)
}
