//! Patchification and token grouping.
//!
//! Patches are non-overlapping `1 x H_p x W_p` pixel blocks of a single
//! frame (patches never span time); tokens are ordered `(t, row, col)`
//! lexicographically. Groups are contiguous blocks of the patch grid that
//! always cover all `T` frames, so cross-attention inside a group sees the
//! whole temporal extent.

use super::FitConfig;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Number of patch tokens for a `(T, H, W)` input and `(1, H_p, W_p)` patch.
/// Shape-only: nothing is allocated.
pub fn patch_token_count(frames: usize, height: usize, width: usize, patch: (usize, usize, usize)) -> Result<usize> {
    if patch.0 != 1 {
        return Err(Error::InvalidArg("patches must span a single frame (T_p = 1)".into()));
    }
    if height % patch.1 != 0 || width % patch.2 != 0 {
        return Err(Error::shape(format!(
            "{height}x{width} not divisible by patch {}x{}",
            patch.1, patch.2
        )));
    }
    Ok(frames * (height / patch.1) * (width / patch.2))
}

/// Rearrange `[B, T, H, W, C]` pixels into flat patch vectors
/// `[B, N, H_p * W_p * C]` (no projection applied).
pub fn patchify<E: Element>(x: &Tensor<E>, cfg: &FitConfig) -> Result<Tensor<E>> {
    let (_, hp, wp) = cfg.patch;
    let c_total = cfg.input_channels();
    let want = [cfg.frames, cfg.height, cfg.width, c_total];
    if x.shape().len() != 5 || x.shape()[1..] != want {
        return Err(Error::shape(format!(
            "patchify expects [B, {}, {}, {}, {}], got {:?}",
            cfg.frames, cfg.height, cfg.width, c_total, x.shape()
        )));
    }
    let b = x.shape()[0];
    let (rows, cols) = (cfg.height / hp, cfg.width / wp);
    x.reshape(&[b, cfg.frames, rows, hp, cols, wp, c_total])?
        .permute(&[0, 1, 2, 4, 3, 5, 6])?
        .reshape(&[b, cfg.frames * rows * cols, hp * wp * c_total])
}

/// Inverse of [`patchify`] for per-patch vectors of `c_out` channels:
/// `[B, N, H_p * W_p * c_out] -> [B, T, H, W, c_out]`.
pub fn unpatchify<E: Element>(tokens: &Tensor<E>, cfg: &FitConfig, c_out: usize) -> Result<Tensor<E>> {
    let (_, hp, wp) = cfg.patch;
    let (rows, cols) = (cfg.height / hp, cfg.width / wp);
    let n = cfg.frames * rows * cols;
    if tokens.shape().len() != 3 || tokens.shape()[1] != n || tokens.shape()[2] != hp * wp * c_out {
        return Err(Error::shape(format!(
            "unpatchify expects [B, {n}, {}], got {:?}",
            hp * wp * c_out,
            tokens.shape()
        )));
    }
    let b = tokens.shape()[0];
    tokens
        .reshape(&[b, cfg.frames, rows, cols, hp, wp, c_out])?
        .permute(&[0, 1, 2, 4, 3, 5, 6])?
        .reshape(&[b, cfg.frames, cfg.height, cfg.width, c_out])
}

/// View `[B, N, C]` tokens as `[B * G, tokens_per_group, C]`, each group a
/// contiguous `(T, H_g, W_g)` block of the patch grid.
pub fn group_tokens<E: Element>(tokens: &Tensor<E>, cfg: &FitConfig) -> Result<Tensor<E>> {
    let (rows, cols) = cfg.grid_spatial();
    let (_, gh, gw) = cfg.group;
    let b = tokens.shape()[0];
    let c = tokens.shape()[2];
    tokens
        .reshape(&[b, cfg.frames, rows / gh, gh, cols / gw, gw, c])?
        .permute(&[0, 2, 4, 1, 3, 5, 6])?
        .reshape(&[b * cfg.group_count(), cfg.tokens_per_group(), c])
}

/// Inverse of [`group_tokens`].
pub fn ungroup_tokens<E: Element>(grouped: &Tensor<E>, cfg: &FitConfig, batch: usize) -> Result<Tensor<E>> {
    let (rows, cols) = cfg.grid_spatial();
    let (_, gh, gw) = cfg.group;
    let c = grouped.shape()[2];
    grouped
        .reshape(&[batch, rows / gh, cols / gw, cfg.frames, gh, gw, c])?
        .permute(&[0, 3, 1, 4, 2, 5, 6])?
        .reshape(&[batch, cfg.patch_token_total(), c])
}

/// Split `[B, L, C]` latent tokens into per-group partitions
/// `[B * G, L / G, C]` (contiguous chunks).
pub fn group_latents<E: Element>(latents: &Tensor<E>, cfg: &FitConfig) -> Result<Tensor<E>> {
    let b = latents.shape()[0];
    let g = cfg.group_count();
    let per = cfg.latent_count / g;
    latents.reshape(&[b * g, per, cfg.latent_channels])
}

pub fn ungroup_latents<E: Element>(grouped: &Tensor<E>, cfg: &FitConfig, batch: usize) -> Result<Tensor<E>> {
    grouped.reshape(&[batch, cfg.latent_count, cfg.latent_channels])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::FitConfig;

    #[test]
    fn token_counts_match_reference_geometries() {
        // 16 frames of 64x40 px (width 64, height 40) with 1x4x4 patches.
        assert_eq!(patch_token_count(16, 40, 64, (1, 4, 4)).unwrap(), 2560);
        // Largest resolution, 512x288 px: shape-only, no weights involved.
        assert_eq!(patch_token_count(16, 288, 512, (1, 4, 4)).unwrap(), 147_456);

        assert!(patch_token_count(16, 40, 63, (1, 4, 4)).is_err());
        assert!(patch_token_count(16, 40, 64, (2, 4, 4)).is_err());
    }

    #[test]
    fn reference_group_geometry() {
        // Grid 16x10x16 (T x rows x cols) with groups 16x5x4: 8 groups of
        // 320 tokens.
        let cfg = FitConfig {
            frames: 16,
            height: 40,
            width: 64,
            group: (16, 5, 4),
            latent_count: 64,
            ..FitConfig::toy()
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.patch_token_total(), 2560);
        assert_eq!(cfg.group_count(), 8);
        assert_eq!(cfg.tokens_per_group(), 320);
    }

    #[test]
    fn degenerate_group_covers_everything() {
        let cfg = FitConfig {
            group: (8, 4, 4),
            ..FitConfig::toy()
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.group_count(), 1);
        assert_eq!(cfg.tokens_per_group(), cfg.patch_token_total());
    }

    #[test]
    fn group_must_span_all_frames() {
        let cfg = FitConfig {
            group: (4, 2, 2),
            ..FitConfig::toy()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn patchify_round_trip() {
        let cfg = FitConfig::toy();
        let n = cfg.frames * cfg.height * cfg.width * cfg.channels;
        let data: Vec<f64> = (0..2 * n).map(|i| i as f64).collect();
        let x = Tensor::new(data, &[2, cfg.frames, cfg.height, cfg.width, cfg.channels]).unwrap();
        let tokens = patchify(&x, &cfg).unwrap();
        assert_eq!(
            tokens.shape(),
            &[2, cfg.patch_token_total(), cfg.patch.1 * cfg.patch.2 * cfg.channels]
        );
        let back = unpatchify(&tokens, &cfg, cfg.channels).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn grouping_round_trip_and_shapes() {
        let cfg = FitConfig::toy();
        let n = cfg.patch_token_total();
        let data: Vec<f64> = (0..2 * n * 3).map(|i| i as f64 * 0.5).collect();
        let tokens = Tensor::new(data, &[2, n, 3]).unwrap();
        let grouped = group_tokens(&tokens, &cfg).unwrap();
        assert_eq!(
            grouped.shape(),
            &[2 * cfg.group_count(), cfg.tokens_per_group(), 3]
        );
        let back = ungroup_tokens(&grouped, &cfg, 2).unwrap();
        assert_eq!(back.data(), tokens.data());
    }
}
