//! The FIT denoiser network.
//!
//! Pixels are patchified into tokens (one frame per patch), embedded and
//! tagged with learnable positional embeddings. Computation happens on a
//! small set of latent tokens: each block reads conditioning into the
//! latents, compresses patch information into them with a groupwise "read"
//! cross-attention, runs several self-attention layers jointly over all
//! latents, and decompresses with a groupwise "write" cross-attention back
//! to the patch tokens. Patch tokens have no self-attention; a feed-forward
//! follows each read/write instead, which keeps the cost linear in the
//! patch-token count. Groups are contiguous blocks of the patch grid
//! covering all frames, so every group sees the full temporal extent.
//!
//! Self-conditioning feeds the latent tokens of a previous forward pass
//! (treated as constants) back through a zero-initialized adapter, making
//! it a no-op at the start of training.

mod attention;
mod cond;
mod params;
mod patch;

pub use attention::LN_EPS;
pub use cond::{build_cond_tokens, CondInputs, FrameRate};
pub use params::{ParamInit, ParamStore};
pub use patch::{group_tokens, patch_token_count, patchify, ungroup_tokens, unpatchify};

use attention::{
    attention, attention_param_count, feed_forward, feed_forward_param_count, init_attention,
    init_feed_forward,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Architecture shape of a FIT denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Data channels of the modeled video.
    pub channels: usize,
    /// Extra input channels carrying noise-augmented low-resolution
    /// conditioning (0 for a first-stage model).
    pub cascade_channels: usize,
    /// Patch extent `(T_p, H_p, W_p)`; `T_p` must be 1.
    pub patch: (usize, usize, usize),
    /// Group extent in patch-grid units; the temporal extent must cover
    /// all frames.
    pub group: (usize, usize, usize),
    pub patch_channels: usize,
    pub latent_count: usize,
    pub latent_channels: usize,
    pub blocks: usize,
    /// Latent self-attention layers per block.
    pub global_layers: usize,
    pub patch_head_channels: usize,
    pub latent_head_channels: usize,
    pub cond_channels: usize,
    /// Size of the class-conditioning table (row 0 is the null class).
    pub n_classes: usize,
    pub self_cond_prob: f64,
    pub label_dropout: f64,
    pub dropout: f64,
    /// Feed-forward expansion factor.
    pub ff_mult: usize,
}

impl FitConfig {
    /// Desk-scale configuration: 8 frames of 16x16x1 pixels, 1x4x4 patches,
    /// 8x2x2 groups, 32 latent tokens, 2 blocks.
    pub fn toy() -> Self {
        FitConfig {
            frames: 8,
            height: 16,
            width: 16,
            channels: 1,
            cascade_channels: 0,
            patch: (1, 4, 4),
            group: (8, 2, 2),
            patch_channels: 32,
            latent_count: 32,
            latent_channels: 32,
            blocks: 2,
            global_layers: 2,
            patch_head_channels: 16,
            latent_head_channels: 16,
            cond_channels: 32,
            n_classes: 4,
            self_cond_prob: 0.9,
            label_dropout: 0.1,
            dropout: 0.0,
            ff_mult: 4,
        }
    }

    pub fn input_channels(&self) -> usize {
        self.channels + self.cascade_channels
    }

    /// Patch-grid spatial extent `(rows, cols)`.
    pub fn grid_spatial(&self) -> (usize, usize) {
        (self.height / self.patch.1, self.width / self.patch.2)
    }

    pub fn patch_token_total(&self) -> usize {
        let (rows, cols) = self.grid_spatial();
        self.frames * rows * cols
    }

    pub fn group_count(&self) -> usize {
        let (rows, cols) = self.grid_spatial();
        (self.frames / self.group.0) * (rows / self.group.1) * (cols / self.group.2)
    }

    pub fn tokens_per_group(&self) -> usize {
        self.group.0 * self.group.1 * self.group.2
    }

    pub fn latents_per_group(&self) -> usize {
        self.latent_count / self.group_count()
    }

    pub fn patch_heads(&self) -> usize {
        self.patch_channels / self.patch_head_channels
    }

    pub fn latent_heads(&self) -> usize {
        self.latent_channels / self.latent_head_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch.0 != 1 {
            return Err(Error::InvalidArg(
                "patches must span the spatial dimension only (T_p = 1)".into(),
            ));
        }
        if self.height % self.patch.1 != 0 || self.width % self.patch.2 != 0 {
            return Err(Error::InvalidArg(format!(
                "{}x{} pixels not divisible by {}x{} patches",
                self.height, self.width, self.patch.1, self.patch.2
            )));
        }
        if self.group.0 != self.frames {
            return Err(Error::InvalidArg(format!(
                "group temporal extent {} must cover all {} frames",
                self.group.0, self.frames
            )));
        }
        let (rows, cols) = self.grid_spatial();
        if rows % self.group.1 != 0 || cols % self.group.2 != 0 {
            return Err(Error::InvalidArg(format!(
                "patch grid {rows}x{cols} not divisible by group {}x{}",
                self.group.1, self.group.2
            )));
        }
        if self.latent_count % self.group_count() != 0 {
            return Err(Error::InvalidArg(format!(
                "latent count {} not divisible by group count {}",
                self.latent_count,
                self.group_count()
            )));
        }
        if self.patch_channels % self.patch_head_channels != 0
            || self.latent_channels % self.latent_head_channels != 0
        {
            return Err(Error::InvalidArg("channels must divide into heads".into()));
        }
        if self.cond_channels % 2 != 0 {
            return Err(Error::InvalidArg(
                "cond_channels must be even (sin/cos halves)".into(),
            ));
        }
        if self.blocks == 0 || self.global_layers == 0 || self.ff_mult == 0 {
            return Err(Error::InvalidArg(
                "blocks, global_layers and ff_mult must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Initialize all learnable tensors for `cfg`, deterministically from
/// `seed`. Residual entry points (write projection, patch feed-forward
/// output, self-conditioning adapter, the final output projection) start at
/// zero so every residual branch begins as an identity.
pub fn init_fit_params<E: Element>(cfg: &FitConfig, seed: u64) -> Result<ParamStore<E>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = ParamInit::new(&mut rng);

    let p_in = cfg.patch.1 * cfg.patch.2 * cfg.input_channels();
    let p_out = cfg.patch.1 * cfg.patch.2 * cfg.channels;
    let (cp, cl, cc) = (cfg.patch_channels, cfg.latent_channels, cfg.cond_channels);

    init.linear_weight("patch.embed.w", p_in, cp)?;
    init.zeros("patch.embed.b", &[cp])?;
    init.normal("patch.pos", &[cfg.patch_token_total(), cp], 0.02)?;

    cond::init_cond_params(&mut init, cfg)?;

    init.ones("selfcond.norm.gain", &[cl])?;
    init.zeros("selfcond.norm.bias", &[cl])?;
    init.zeros("selfcond.w", &[cl, cl])?;
    init.zeros("selfcond.b", &[cl])?;

    init.normal("latent.init", &[cfg.latent_count, cl], 0.02)?;

    for b in 0..cfg.blocks {
        let p = format!("block{b}");
        init_attention(&mut init, &format!("{p}.cond_read"), cl, cc, cl, false)?;
        init_attention(&mut init, &format!("{p}.read"), cl, cp, cp, false)?;
        init_feed_forward(&mut init, &format!("{p}.read_ff"), cl, cfg.ff_mult, false)?;
        for g in 0..cfg.global_layers {
            init_attention(&mut init, &format!("{p}.global{g}.attn"), cl, cl, cl, false)?;
            init_feed_forward(&mut init, &format!("{p}.global{g}.ff"), cl, cfg.ff_mult, false)?;
        }
        init_attention(&mut init, &format!("{p}.write"), cp, cl, cp, true)?;
        init_feed_forward(&mut init, &format!("{p}.write_ff"), cp, cfg.ff_mult, true)?;
    }

    init.ones("out.norm.gain", &[cp])?;
    init.zeros("out.norm.bias", &[cp])?;
    // The output projection starts live (not zero): the network output is
    // multiplied by c_out and corrected by the skip path anyway, and a live
    // projection lets the linear component of the v-target be learned from
    // the first step (zero-initializing it stalls LAMB's trust ratio).
    init.linear_weight("out.proj.w", cp, p_out)?;
    init.zeros("out.proj.b", &[p_out])?;

    Ok(init.store)
}

/// Closed-form parameter count for a config (checked against enumeration
/// in the tests).
pub fn fit_param_count(cfg: &FitConfig) -> usize {
    let p_in = cfg.patch.1 * cfg.patch.2 * cfg.input_channels();
    let p_out = cfg.patch.1 * cfg.patch.2 * cfg.channels;
    let (cp, cl, cc, m) = (cfg.patch_channels, cfg.latent_channels, cfg.cond_channels, cfg.ff_mult);

    let embed = p_in * cp + cp + cfg.patch_token_total() * cp;
    let condp = cond::cond_param_count(cfg);
    let selfcond = 2 * cl + cl * cl + cl;
    let latent_init = cfg.latent_count * cl;
    let per_block = attention_param_count(cl, cc, cl)
        + attention_param_count(cl, cp, cp)
        + feed_forward_param_count(cl, m)
        + cfg.global_layers * (attention_param_count(cl, cl, cl) + feed_forward_param_count(cl, m))
        + attention_param_count(cp, cl, cp)
        + feed_forward_param_count(cp, m);
    let out = 2 * cp + cp * p_out + p_out;

    embed + condp + selfcond + latent_init + cfg.blocks * per_block + out
}

type Drop<'a> = Option<(&'a mut ChaCha8Rng, f64)>;

fn reborrow<'a>(d: &'a mut Drop<'_>) -> Option<(&'a mut ChaCha8Rng, f64)> {
    d.as_mut().map(|(rng, p)| (&mut **rng, *p))
}

/// Groupwise read: each group's latents attend to that group's patch
/// tokens. Latents outside a group never see its tokens, which is what
/// makes the compression local.
pub(crate) fn group_read<E: Element>(
    patch_tokens: &Tensor<E>,
    latents: &Tensor<E>,
    params: &ParamStore<E>,
    prefix: &str,
    cfg: &FitConfig,
) -> Result<Tensor<E>> {
    let b = latents.shape()[0];
    let pg = group_tokens(patch_tokens, cfg)?;
    let lg = patch::group_latents(latents, cfg)?;
    let read = attention(&lg, &pg, params, &format!("{prefix}.read"), cfg.patch_heads())?;
    let lg = lg.add(&read)?;
    patch::ungroup_latents(&lg, cfg, b)
}

/// One FIT block: conditioning read, groupwise read + latent feed-forward,
/// global latent self-attention stack, groupwise write + patch feed-forward.
/// Residual connections wrap every sub-layer.
pub fn fit_block<E: Element>(
    patch_tokens: &Tensor<E>,
    latents: &Tensor<E>,
    cond_tokens: &Tensor<E>,
    params: &ParamStore<E>,
    prefix: &str,
    cfg: &FitConfig,
    mut dropout: Drop<'_>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let b = patch_tokens.shape()[0];

    // (1) conditioning read.
    let cond_read = attention(
        latents,
        cond_tokens,
        params,
        &format!("{prefix}.cond_read"),
        cfg.latent_heads(),
    )?;
    let mut latents = latents.add(&cond_read)?;

    // (2) groupwise read, then feed-forward over the latents.
    latents = group_read(patch_tokens, &latents, params, prefix, cfg)?;
    let ff = feed_forward(&latents, params, &format!("{prefix}.read_ff"), reborrow(&mut dropout))?;
    latents = latents.add(&ff)?;

    // (3) global self-attention over all latents jointly.
    for g in 0..cfg.global_layers {
        let attn_out = attention(
            &latents,
            &latents,
            params,
            &format!("{prefix}.global{g}.attn"),
            cfg.latent_heads(),
        )?;
        latents = latents.add(&attn_out)?;
        let ff = feed_forward(
            &latents,
            params,
            &format!("{prefix}.global{g}.ff"),
            reborrow(&mut dropout),
        )?;
        latents = latents.add(&ff)?;
    }

    // (4) groupwise write, then feed-forward over the patch tokens (which
    // replaces local patch self-attention).
    let pg = group_tokens(patch_tokens, cfg)?;
    let lg = patch::group_latents(&latents, cfg)?;
    let write = attention(&pg, &lg, params, &format!("{prefix}.write"), cfg.patch_heads())?;
    let pg = pg.add(&write)?;
    let mut patch_tokens = ungroup_tokens(&pg, cfg, b)?;
    let ff = feed_forward(
        &patch_tokens,
        params,
        &format!("{prefix}.write_ff"),
        reborrow(&mut dropout),
    )?;
    patch_tokens = patch_tokens.add(&ff)?;

    Ok((patch_tokens, latents))
}

/// Full denoiser forward pass.
///
/// `x_in` is `[B, T, H, W, C_in]`, already multiplied by `c_in` (and with
/// cascade conditioning channels concatenated when configured). Returns the
/// prediction of `c_nrm * F_tgt` with shape `[B, T, H, W, C]` and the final
/// latent tokens for self-conditioning reuse.
pub fn fit_forward<E: Element>(
    x_in: &Tensor<E>,
    cond: &CondInputs<'_>,
    prev_latents: Option<&Tensor<E>>,
    params: &ParamStore<E>,
    cfg: &FitConfig,
    mut dropout: Drop<'_>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    cfg.validate()?;
    let b = x_in.shape()[0];
    if cond.batch() != b {
        return Err(Error::shape(format!(
            "batch mismatch: input {b}, conditioning {}",
            cond.batch()
        )));
    }

    // Patch embedding + learnable positional embeddings.
    let flat = patchify(x_in, cfg)?;
    let mut tokens = flat
        .matmul(params.get("patch.embed.w")?)?
        .add(params.get("patch.embed.b")?)?
        .add(params.get("patch.pos")?)?;

    let cond_tokens = build_cond_tokens(cond, params, cfg)?;

    // Latents: learned initial tokens, plus the adapter of previous latents
    // when self-conditioning. The adapter is zero-initialized, so feeding
    // zeros (or anything) through an untrained adapter is a no-op.
    let mut latents = params
        .get("latent.init")?
        .reshape(&[1, cfg.latent_count, cfg.latent_channels])?
        .broadcast_to(&[b, cfg.latent_count, cfg.latent_channels])?;
    if let Some(prev) = prev_latents {
        if prev.shape() != latents.shape() {
            return Err(Error::shape(format!(
                "prev_latents shape {:?} does not match {:?}",
                prev.shape(),
                latents.shape()
            )));
        }
        let adapted = prev
            .layer_norm(
                params.get("selfcond.norm.gain")?,
                params.get("selfcond.norm.bias")?,
                LN_EPS,
            )?
            .matmul(params.get("selfcond.w")?)?
            .add(params.get("selfcond.b")?)?;
        latents = latents.add(&adapted)?;
    }

    for blk in 0..cfg.blocks {
        let (t, l) = fit_block(
            &tokens,
            &latents,
            &cond_tokens,
            params,
            &format!("block{blk}"),
            cfg,
            reborrow(&mut dropout),
        )?;
        tokens = t;
        latents = l;
    }

    let out_tokens = tokens
        .layer_norm(params.get("out.norm.gain")?, params.get("out.norm.bias")?, LN_EPS)?
        .matmul(params.get("out.proj.w")?)?
        .add(params.get("out.proj.b")?)?;
    let f_out = unpatchify(&out_tokens, cfg, cfg.channels)?;
    Ok((f_out, latents))
}

/// Multiply-accumulate count of one forward pass at batch size 1. Mirrors
/// [`fit_forward`] term by term; used by `snapdiff bench` and the scaling
/// property tests.
pub fn fit_macs(cfg: &FitConfig) -> u64 {
    let n = cfg.patch_token_total() as u64;
    let l = cfg.latent_count as u64;
    let g = cfg.group_count() as u64;
    let (cp, cl, cc) = (
        cfg.patch_channels as u64,
        cfg.latent_channels as u64,
        cfg.cond_channels as u64,
    );
    let m = cfg.ff_mult as u64;
    let p_in = (cfg.patch.1 * cfg.patch.2 * cfg.input_channels()) as u64;
    let p_out = (cfg.patch.1 * cfg.patch.2 * cfg.channels) as u64;
    let n_cond = cond::cond_token_count(cfg) as u64;

    let mut macs = n * p_in * cp; // patch embedding
    macs += (n_cond - 1) * 2 * cc * cc; // cond MLPs (class token is a lookup)

    let per_block = {
        // conditioning read (latent-width attention)
        let cond_read = l * cl * cl + 2 * n_cond * cc * cl + 2 * l * n_cond * cl + l * cl * cl;
        // groupwise read (patch-width attention); scores are per group
        let read = l * cl * cp + 2 * n * cp * cp + 2 * l * (n / g) * cp + l * cp * cl;
        let read_ff = 2 * m * l * cl * cl;
        let global =
            cfg.global_layers as u64 * (4 * l * cl * cl + 2 * l * l * cl + 2 * m * l * cl * cl);
        // groupwise write
        let write = n * cp * cp + 2 * l * cl * cp + 2 * n * (l / g) * cp + n * cp * cp;
        let write_ff = 2 * m * n * cp * cp;
        cond_read + read + read_ff + global + write + write_ff
    };
    macs += cfg.blocks as u64 * per_block;
    macs += n * cp * p_out; // output projection
    macs
}

/// Noise-augmented low-resolution conditioning for a cascade stage.
pub struct CascadeCond<E: Element> {
    /// `low_res + aug_sigma * eps`, to be concatenated as extra channels.
    pub channels: Tensor<E>,
    /// The augmentation level, embedded as an extra conditioning token.
    pub aug_sigma: f64,
}

/// Corrupt an (already spatially upsampled) low-resolution conditioning
/// video with `aug_sigma`-scaled Gaussian noise.
pub fn cascade_condition<E: Element>(
    low_res: &Tensor<E>,
    aug_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<CascadeCond<E>> {
    if aug_sigma < 0.0 {
        return Err(Error::InvalidArg("aug_sigma must be nonnegative".into()));
    }
    let channels = if aug_sigma == 0.0 {
        low_res.clone()
    } else {
        let noise: Vec<E> = (0..low_res.numel())
            .map(|_| E::from_f64(aug_sigma * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        low_res.add(&Tensor::new(noise, low_res.shape())?)?
    };
    Ok(CascadeCond { channels, aug_sigma })
}

/// Concatenate cascade conditioning channels onto the network input
/// (channel-last layout).
pub fn concat_cascade<E: Element>(x: &Tensor<E>, cascade: &CascadeCond<E>) -> Result<Tensor<E>> {
    let axis = x.shape().len() - 1;
    Tensor::concat(&[x.clone(), cascade.channels.clone()], axis)
}

/// Nearest-neighbor spatial upsampling of `[B, T, h, w, C]` by `factor`.
pub fn nearest_upsample<E: Element>(x: &Tensor<E>, factor: usize) -> Result<Tensor<E>> {
    if x.shape().len() != 5 {
        return Err(Error::shape("nearest_upsample expects [B, T, h, w, C]"));
    }
    let (b, t, h, w, c) = (
        x.shape()[0],
        x.shape()[1],
        x.shape()[2],
        x.shape()[3],
        x.shape()[4],
    );
    let (hh, ww) = (h * factor, w * factor);
    let src = x.data();
    let mut out = Vec::with_capacity(b * t * hh * ww * c);
    for bt in 0..b * t {
        let base = bt * h * w * c;
        for y in 0..hh {
            for xx in 0..ww {
                let off = base + ((y / factor) * w + xx / factor) * c;
                out.extend_from_slice(&src[off..off + c]);
            }
        }
    }
    Tensor::new(out, &[b, t, hh, ww, c])
}
