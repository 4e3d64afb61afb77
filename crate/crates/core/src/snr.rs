//! Signal-to-noise analysis of block-averaged noisy video.
//!
//! Averaging a noisy video over `T x s x s` blocks reduces the noise
//! variance by `T s^2` while (for block-constant content) leaving the signal
//! untouched, so the averaged frame has `SNR_avg = T s^2 * SNR_full`. Scaling
//! the input down by `sigma_in = s sqrt(T)` before noise is applied restores
//! the averaged-frame SNR to that of an unscaled single frame at the same
//! noise level.
//!
//! The synthetic videos here are low-frequency 2-D cosine patterns
//! replicated exactly across every block, which makes the redundancy
//! premise hold exactly and isolates the statistical claim. Natural images
//! satisfy it only approximately, so the quantitative ratio is exact only
//! in this synthetic setting.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Measured and predicted SNR figures for one `(T, s, sigma)` setting.
#[derive(Debug, Clone)]
pub struct SnrReport {
    pub t: usize,
    pub s: usize,
    pub sigma: f64,
    pub scaled: bool,
    /// SNR of the noisy video at full resolution.
    pub snr_full: f64,
    /// SNR of the block-averaged frame.
    pub snr_avg: f64,
    /// `snr_avg / snr_full`.
    pub ratio: f64,
    /// The averaging gain `T * s^2`.
    pub predicted_ratio: f64,
}

/// Mean over non-overlapping `T x s x s` blocks:
/// `[T, s*H, s*W] -> [1, H, W]`.
pub fn block_average<E: Element>(video: &Tensor<E>, t: usize, s: usize) -> Result<Tensor<E>> {
    let shape = video.shape();
    if shape.len() != 3 || shape[0] != t {
        return Err(Error::shape(format!(
            "block_average expects [T={t}, s*H, s*W], got {shape:?}"
        )));
    }
    if shape[1] % s != 0 || shape[2] % s != 0 {
        return Err(Error::shape(format!(
            "spatial dims {}x{} not divisible by s={s}",
            shape[1], shape[2]
        )));
    }
    let (h, w) = (shape[1] / s, shape[2] / s);
    let src = video.data();
    let inv = E::from_f64(1.0 / (t * s * s) as f64);
    let mut out = vec![E::zero(); h * w];
    for frame in 0..t {
        let base = frame * shape[1] * shape[2];
        for y in 0..shape[1] {
            let row = base + y * shape[2];
            let oy = y / s;
            for x in 0..shape[2] {
                let o = oy * w + x / s;
                out[o] = out[o] + src[row + x];
            }
        }
    }
    for v in &mut out {
        *v = *v * inv;
    }
    Tensor::new(out, &[1, h, w])
}

/// Signal power over noise power: `mean(clean^2) / mean((noisy - clean)^2)`.
pub fn empirical_snr<E: Element>(clean: &Tensor<E>, noisy: &Tensor<E>) -> Result<f64> {
    if clean.shape() != noisy.shape() {
        return Err(Error::shape("empirical_snr shape mismatch"));
    }
    let n = clean.numel() as f64;
    let sig: f64 = clean.data().iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>() / n;
    let noise: f64 = clean
        .data()
        .iter()
        .zip(noisy.data())
        .map(|(c, x)| {
            let d = x.to_f64() - c.to_f64();
            d * d
        })
        .sum::<f64>()
        / n;
    if noise == 0.0 {
        return Err(Error::InvalidArg("zero noise power (infinite SNR)".into()));
    }
    Ok(sig / noise)
}

/// Block-constant synthetic video: a 2-D cosine at the original `H x W`
/// resolution, replicated across `T` frames and `s x s` pixel blocks.
/// Integer frequencies make the spatial power exactly `amplitude^2 / 2`.
fn cosine_video(
    t: usize,
    s: usize,
    h: usize,
    w: usize,
    sigma_data: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let amp = sigma_data * 2f64.sqrt();
    let ky = rng.gen_range(1..=3) as f64;
    let kx = rng.gen_range(1..=3) as f64;
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut base = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let u = ky * y as f64 / h as f64 + kx * x as f64 / w as f64;
            base[y * w + x] = amp * (std::f64::consts::TAU * u + phase).cos();
        }
    }
    let (fh, fw) = (s * h, s * w);
    let mut video = vec![0.0f64; t * fh * fw];
    for frame in 0..t {
        for y in 0..fh {
            for x in 0..fw {
                video[frame * fh * fw + y * fw + x] = base[(y / s) * w + x / s];
            }
        }
    }
    video
}

/// Run the block-averaging experiment: build redundant videos, apply the
/// forward process with `sigma_in = 1` (unscaled) or `sigma_in = s sqrt(T)`
/// (scaled), block-average, and report SNRs aggregated over `trials`
/// independent draws.
pub fn snr_scaling_experiment(
    t: usize,
    s: usize,
    sigma: f64,
    scale_input: bool,
    trials: usize,
    seed: u64,
) -> Result<SnrReport> {
    if trials == 0 {
        return Err(Error::InvalidArg("snr experiment needs trials >= 1".into()));
    }
    if t == 0 || s == 0 {
        return Err(Error::InvalidArg("T and s must be positive".into()));
    }
    let (h, w) = (16usize, 16usize);
    let sigma_data = 1.0;
    let sigma_in = if scale_input {
        s as f64 * (t as f64).sqrt()
    } else {
        1.0
    };

    let mut sig_full = 0.0;
    let mut noise_full = 0.0;
    let mut sig_avg = 0.0;
    let mut noise_avg = 0.0;
    let mut n_full = 0usize;
    let mut n_avg = 0usize;

    for trial in 0..trials {
        // Per-trial RNG stream derived from the master seed; trials are
        // independent and order-insensitive.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64);
        let clean = cosine_video(t, s, h, w, sigma_data, &mut rng);
        let scaled_clean: Vec<f64> = clean.iter().map(|v| v / sigma_in).collect();
        let noisy: Vec<f64> = scaled_clean
            .iter()
            .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();

        for (c, x) in scaled_clean.iter().zip(&noisy) {
            sig_full += c * c;
            noise_full += (x - c) * (x - c);
        }
        n_full += noisy.len();

        let shape = [t, s * h, s * w];
        let clean_t = Tensor::new(scaled_clean, &shape)?;
        let noisy_t = Tensor::new(noisy, &shape)?;
        let clean_avg = block_average(&clean_t, t, s)?;
        let noisy_avg = block_average(&noisy_t, t, s)?;
        for (c, x) in clean_avg.data().iter().zip(noisy_avg.data()) {
            sig_avg += c * c;
            noise_avg += (x - c) * (x - c);
        }
        n_avg += clean_avg.numel();
    }

    let snr_full = (sig_full / n_full as f64) / (noise_full / n_full as f64);
    let snr_avg = (sig_avg / n_avg as f64) / (noise_avg / n_avg as f64);
    Ok(SnrReport {
        t,
        s,
        sigma,
        scaled: scale_input,
        snr_full,
        snr_avg,
        ratio: snr_avg / snr_full,
        predicted_ratio: (t * s * s) as f64,
    })
}

/// Run the experiment over a `(T, s)` grid, scaled and unscaled.
pub fn snr_grid(
    ts: &[usize],
    ss: &[usize],
    sigma: f64,
    trials: usize,
    seed: u64,
) -> Result<Vec<SnrReport>> {
    let mut out = Vec::new();
    for &t in ts {
        for &s in ss {
            for scaled in [false, true] {
                out.push(snr_scaling_experiment(t, s, sigma, scaled, trials, seed)?);
            }
        }
    }
    Ok(out)
}

/// CSV emission: `T,s,sigma,scaled,snr_full,snr_avg,ratio,predicted_ratio`.
pub fn write_snr_csv<W: Write>(reports: &[SnrReport], mut w: W) -> Result<()> {
    writeln!(w, "T,s,sigma,scaled,snr_full,snr_avg,ratio,predicted_ratio")?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.t, r.s, r.sigma, r.scaled, r.snr_full, r.snr_avg, r.ratio, r.predicted_ratio
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_average_of_constant_is_constant() {
        let v = Tensor::full(3.25f64, &[4, 8, 8]).unwrap();
        let avg = block_average(&v, 4, 2).unwrap();
        assert_eq!(avg.shape(), &[1, 4, 4]);
        assert!(avg.data().iter().all(|&x| (x - 3.25).abs() < 1e-12));
    }

    #[test]
    fn block_average_identity_when_no_redundancy() {
        let data: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let v = Tensor::new(data.clone(), &[1, 3, 3]).unwrap();
        let avg = block_average(&v, 1, 1).unwrap();
        assert_eq!(avg.data(), data.as_slice());
    }

    #[test]
    fn block_average_rejects_indivisible_dims() {
        let v = Tensor::<f64>::zeros(&[2, 5, 4]).unwrap();
        assert!(block_average(&v, 2, 2).is_err());
        assert!(block_average(&v, 3, 1).is_err());
    }

    #[test]
    fn block_average_noise_variance_shrinks_by_block_size() {
        // Pure N(0, sigma^2) noise: averaged variance sigma^2/(T s^2) within 3%
        // over >= 1e5 output pixels.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (t, s, sigma) = (4usize, 2usize, 1.5f64);
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for _ in 0..500 {
            let n = t * 32 * 32;
            let data: Vec<f64> = (0..n)
                .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let v = Tensor::new(data, &[t, 32, 32]).unwrap();
            let avg = block_average(&v, t, s).unwrap();
            sum_sq += avg.data().iter().map(|x| x * x).sum::<f64>();
            count += avg.numel();
        }
        assert!(count >= 100_000);
        let var = sum_sq / count as f64;
        let expect = sigma * sigma / (t * s * s) as f64;
        assert!((var / expect - 1.0).abs() < 0.03, "var {var} vs {expect}");
    }

    #[test]
    fn empirical_snr_definition() {
        let clean = Tensor::new(vec![2.0, -2.0, 2.0, -2.0], &[4]).unwrap();
        let noisy = Tensor::new(vec![3.0, -1.0, 3.0, -3.0], &[4]).unwrap();
        // signal power 4, noise power 1.
        let snr = empirical_snr(&clean, &noisy).unwrap();
        assert!((snr - 4.0).abs() < 1e-12);

        let unit = Tensor::new(vec![1.0, -1.0], &[2]).unwrap();
        let off = Tensor::new(vec![0.0, 0.0], &[2]).unwrap();
        assert!((empirical_snr(&unit, &off).unwrap() - 1.0).abs() < 1e-12);

        assert!(empirical_snr(&clean, &clean).is_err());
    }

    #[test]
    fn unscaled_ratio_matches_averaging_gain() {
        let r = snr_scaling_experiment(16, 1, 1.0, false, 400, 7).unwrap();
        assert!(
            (r.ratio / 16.0 - 1.0).abs() < 0.05,
            "ratio {} expected ~16",
            r.ratio
        );
    }

    #[test]
    fn scaled_snr_matches_single_frame_reference() {
        // T=16, s=1, sigma_in=4: averaged SNR returns to the unscaled
        // original-resolution value sigma_data^2 / sigma^2.
        let sigma = 0.8;
        let r = snr_scaling_experiment(16, 1, sigma, true, 400, 7).unwrap();
        let reference = 1.0 / (sigma * sigma);
        assert!(
            (r.snr_avg / reference - 1.0).abs() < 0.1,
            "snr_avg {} vs reference {reference}",
            r.snr_avg
        );
    }

    #[test]
    fn degenerate_grid_point_has_unit_ratio() {
        for scaled in [false, true] {
            let r = snr_scaling_experiment(1, 1, 1.0, scaled, 400, 3).unwrap();
            assert!((r.ratio - 1.0).abs() < 0.05, "ratio {}", r.ratio);
        }
    }

    #[test]
    fn scaling_equalizes_averaged_noise_variance() {
        // Var[averaged noise] * sigma_in^2 == sigma^2 within 3% when
        // sigma_in = s sqrt(T).
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (t, s, sigma) = (4usize, 2usize, 0.7f64);
        let sigma_in = s as f64 * (t as f64).sqrt();
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for _ in 0..400 {
            let n = t * 32 * 32;
            let noise: Vec<f64> = (0..n)
                .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let v = Tensor::new(noise, &[t, 32, 32]).unwrap();
            let avg = block_average(&v, t, s).unwrap();
            sum_sq += avg.data().iter().map(|x| x * x).sum::<f64>();
            count += avg.numel();
        }
        let var = sum_sq / count as f64;
        assert!(
            (var * sigma_in * sigma_in / (sigma * sigma) - 1.0).abs() < 0.03,
            "normalized var {}",
            var * sigma_in * sigma_in
        );
    }

    #[test]
    fn experiment_rejects_zero_trials() {
        assert!(snr_scaling_experiment(2, 2, 1.0, false, 0, 1).is_err());
    }

    #[test]
    fn csv_contains_header_and_rows() {
        let reports = snr_grid(&[1, 2], &[1], 1.0, 100, 11).unwrap();
        let mut buf = Vec::new();
        write_snr_csv(&reports, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "T,s,sigma,scaled,snr_full,snr_avg,ratio,predicted_ratio"
        );
        assert_eq!(lines.len(), 1 + 4);
    }
}
