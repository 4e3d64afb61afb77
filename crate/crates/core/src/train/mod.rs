//! Desk-scale joint image/video training loop.
//!
//! Every batch mixes video samples with images replicated into
//! infinite-framerate videos; from there a single code path handles both
//! modalities: per-sample noise levels from `p_train`, the scaled forward
//! process, self-conditioning, classifier-free label dropout, the
//! network-space loss, global-norm clipping, the optimizer and the EMA.
//! There is deliberately no branch on modality anywhere past batch
//! assembly.

mod data;
mod ema;
mod optim;

pub use data::{
    classify_frame, images_as_videos, DatasetConfig, Sample, SpriteDataset, VideoBatch, SPRITE,
};
pub use ema::EmaState;
pub use optim::{cosine_lr, optimizer_update, OptMode, OptimizerConfig, OptimizerState, UpdateStats};

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffusion::{sample_sigma, scalings, DiffusionConfig};
use crate::error::{Error, Result};
use crate::fit::{fit_forward, CondInputs, FitConfig, ParamStore};
use crate::tensor::Tensor;

/// Training-loop parameters beyond the optimizer itself.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_videos: usize,
    pub batch_images: usize,
    pub steps: u64,
    pub opt: OptimizerConfig,
    pub ema_halflife: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_videos: 8,
            batch_images: 8,
            steps: 1000,
            opt: OptimizerConfig::default(),
            ema_halflife: 100.0,
            seed: 0,
        }
    }
}

/// Per-step metrics row.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    pub sigma_mean: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

pub fn write_metrics_header<W: Write>(mut w: W) -> Result<()> {
    writeln!(w, "step,lr,sigma_mean,loss,grad_norm,wall_ms")?;
    Ok(())
}

pub fn write_metrics_row<W: Write>(mut w: W, s: &StepStats) -> Result<()> {
    writeln!(
        w,
        "{},{},{},{},{},{}",
        s.step, s.lr, s.sigma_mean, s.loss, s.grad_norm, s.wall_ms
    )?;
    Ok(())
}

/// Inputs of one training step after the forward-process preparation, all
/// untracked (only network parameters carry gradients).
pub struct PreparedBatch {
    /// `c_in(sigma_b) * x_sigma`, channels-last `[B, T, H, W, C]`.
    pub x_in: Tensor<f32>,
    /// `c_nrm(sigma_b) * F_tgt`, same shape.
    pub target: Tensor<f32>,
    /// Effective loss weights `w(sigma_b)`.
    pub weights: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// Class ids after label dropout.
    pub cond_ids: Vec<usize>,
}

/// Draw noise levels and noise, apply the forward process and target
/// construction per sample, and apply classifier-free label dropout.
pub fn prepare_batch(
    batch: &VideoBatch<f32>,
    dcfg: &DiffusionConfig,
    label_dropout: f64,
    rng: &mut ChaCha8Rng,
) -> Result<PreparedBatch> {
    batch.validate()?;
    let b = batch.batch_size();
    let x = batch.to_channels_last()?;
    let per = x.numel() / b;

    let sigmas: Vec<f64> = (0..b).map(|_| sample_sigma(rng, dcfg)).collect();
    let cond_ids: Vec<usize> = batch
        .cond_id
        .iter()
        .map(|&c| if rng.gen::<f64>() < label_dropout { 0 } else { c })
        .collect();

    let sd2 = (dcfg.sigma_data * dcfg.sigma_data) as f32;
    let inv_in = (1.0 / dcfg.sigma_in) as f32;
    let mut x_in = vec![0.0f32; x.numel()];
    let mut target = vec![0.0f32; x.numel()];
    let mut weights = Vec::with_capacity(b);
    for bi in 0..b {
        let s = scalings(sigmas[bi], dcfg)?;
        weights.push(s.w);
        let (c_in, c_nrm, sig) = (s.c_in as f32, s.c_nrm as f32, sigmas[bi] as f32);
        let src = &x.data()[bi * per..(bi + 1) * per];
        for i in 0..per {
            let eps: f64 = rng.sample(StandardNormal);
            let e = eps as f32;
            let xi = src[i];
            x_in[bi * per + i] = c_in * (xi * inv_in + sig * e);
            target[bi * per + i] = c_nrm * (sd2 * e - sig * xi);
        }
    }

    Ok(PreparedBatch {
        x_in: Tensor::new(x_in, x.shape())?,
        target: Tensor::new(target, x.shape())?,
        weights,
        sigmas,
        cond_ids,
    })
}

/// `mean_b [ w(sigma_b) * sum_pixels (f_b - target_b)^2 ]` as a scalar
/// tensor on the graph.
pub fn weighted_loss(
    f_out: &Tensor<f32>,
    target: &Tensor<f32>,
    weights: &[f64],
) -> Result<Tensor<f32>> {
    let b = f_out.shape()[0];
    if weights.len() != b {
        return Err(Error::shape("per-sample weight count mismatch"));
    }
    let mut wshape = vec![b];
    wshape.extend(std::iter::repeat(1).take(f_out.shape().len() - 1));
    let wt = Tensor::new(weights.iter().map(|&w| w as f32).collect(), &wshape)?;
    f_out
        .sub(target)?
        .square()?
        .mul(&wt)?
        .sum_all()?
        .scale(1.0 / b as f32)
}

/// One optimization step over a prepared joint batch.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut ParamStore<f32>,
    opt_state: &mut OptimizerState,
    ema: &mut EmaState,
    batch: &VideoBatch<f32>,
    dcfg: &DiffusionConfig,
    fit_cfg: &FitConfig,
    ocfg: &OptimizerConfig,
    schedule_step: u64,
    rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    let start = Instant::now();
    let prepared = prepare_batch(batch, dcfg, fit_cfg.label_dropout, rng)?;
    let cond = CondInputs {
        sigma: &prepared.sigmas,
        framerate: &batch.framerate,
        resolution: &batch.resolution,
        class_id: &prepared.cond_ids,
        aug_sigma: None,
    };

    // Self-conditioning: with probability self_cond_prob a preliminary pass
    // through detached parameters produces latents that enter the main pass
    // as constants (no gradient reaches the first pass). Otherwise zero
    // latents stand in; through the zero-initialized adapter that is exactly
    // the no-self-conditioning forward, and the adapter parameters stay in
    // the graph on every step.
    let prev_latents = if rng.gen::<f64>() < fit_cfg.self_cond_prob {
        let detached = params.detached();
        let (_, latents) = fit_forward(&prepared.x_in, &cond, None, &detached, fit_cfg, None)?;
        debug_assert!(!latents.tracked());
        latents
    } else {
        let b = batch.batch_size();
        Tensor::zeros(&[b, fit_cfg.latent_count, fit_cfg.latent_channels])?
    };

    let dropout = if fit_cfg.dropout > 0.0 {
        Some((&mut *rng, fit_cfg.dropout))
    } else {
        None
    };
    let forward = fit_forward(
        &prepared.x_in,
        &cond,
        Some(&prev_latents),
        params,
        fit_cfg,
        dropout,
    );
    let (f_out, _) = forward.map_err(|e| diagnose(e, &prepared, schedule_step))?;
    let loss = weighted_loss(&f_out, &prepared.target, &prepared.weights)
        .map_err(|e| diagnose(e, &prepared, schedule_step))?;
    let loss_value = loss.item()? as f64;

    let grads = loss.backward()?;
    let lr = cosine_lr(schedule_step, ocfg.warmup_steps, ocfg.total_steps, ocfg.lr);
    let stats = optimizer_update(params, &grads, lr, opt_state, ocfg)?;
    ema.update(params)?;

    let sigma_mean = prepared.sigmas.iter().sum::<f64>() / prepared.sigmas.len() as f64;
    Ok(StepStats {
        step: schedule_step,
        lr,
        sigma_mean,
        loss: loss_value,
        grad_norm: stats.clipped_norm,
        wall_ms: start.elapsed().as_secs_f64() * 1000.0,
    })
}

fn diagnose(e: Error, prepared: &PreparedBatch, step: u64) -> Error {
    match e {
        Error::NonFinite { op, detail } => Error::Train(format!(
            "non-finite value in `{op}`{detail} at step {step}; batch sigmas {:?}",
            prepared.sigmas
        )),
        other => other,
    }
}

/// Owns everything one training run needs; `step_once` is a pure function
/// of the held state, so a checkpointed run resumes bitwise.
pub struct Trainer {
    pub dcfg: DiffusionConfig,
    pub fit_cfg: FitConfig,
    pub tcfg: TrainConfig,
    pub dataset: SpriteDataset,
    pub params: ParamStore<f32>,
    pub opt: OptimizerState,
    pub ema: EmaState,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl Trainer {
    pub fn new(
        dcfg: DiffusionConfig,
        fit_cfg: FitConfig,
        tcfg: TrainConfig,
        dataset_cfg: DatasetConfig,
    ) -> Result<Self> {
        dcfg.validate()?;
        fit_cfg.validate()?;
        let dataset = SpriteDataset::new(dataset_cfg)?;
        let params = crate::fit::init_fit_params::<f32>(&fit_cfg, tcfg.seed)?;
        let opt = OptimizerState::new(tcfg.opt.mode);
        let ema = EmaState::new(&params, tcfg.ema_halflife);
        let rng = rand::SeedableRng::seed_from_u64(tcfg.seed);
        Ok(Trainer {
            dcfg,
            fit_cfg,
            tcfg,
            dataset,
            params,
            opt,
            ema,
            rng,
            step: 0,
        })
    }

    pub fn step_once(&mut self) -> Result<StepStats> {
        let batch = self
            .dataset
            .batch(self.step, self.tcfg.batch_videos, self.tcfg.batch_images)?;
        let stats = train_step(
            &mut self.params,
            &mut self.opt,
            &mut self.ema,
            &batch,
            &self.dcfg,
            &self.fit_cfg,
            &self.tcfg.opt,
            self.step,
            &mut self.rng,
        )?;
        self.step += 1;
        Ok(stats)
    }
}
