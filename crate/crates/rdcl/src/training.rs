//! Rate-distortion training: loss, the three-phase schedule, data ingestion.

use std::path::Path;

use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CodecModel, ModelError, Quantizer};
use crate::nn::{Adam, PlateauScheduler};
use crate::tensor::Tape;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("no usable images in {0}")]
    NoImages(String),
    #[error("non-finite loss at phase {phase} epoch {epoch}: training diverged")]
    Diverged { phase: usize, epoch: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaPolicy {
    Fixed(f64),
    UniformOverGrid,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Phase {
    pub lambda_policy: LambdaPolicy,
    pub quantizer: Quantizer,
    pub epochs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseSchedule {
    pub phases: Vec<Phase>,
    pub batch_size: usize,
    pub crop: usize,
    pub initial_lr: f32,
    pub plateau_patience: usize,
    pub plateau_factor: f32,
    pub reset_lr_each_phase: bool,
}

/// The published three-phase schedule: high-rate warmup under noise, then
/// uniform lambda sampling under noise, then the rounding estimator.
pub fn default_schedule() -> PhaseSchedule {
    PhaseSchedule {
        phases: vec![
            Phase { lambda_policy: LambdaPolicy::Fixed(1.4400), quantizer: Quantizer::Noise, epochs: 100 },
            Phase { lambda_policy: LambdaPolicy::UniformOverGrid, quantizer: Quantizer::Noise, epochs: 80 },
            Phase { lambda_policy: LambdaPolicy::UniformOverGrid, quantizer: Quantizer::Ste, epochs: 70 },
        ],
        batch_size: 32,
        crop: 256,
        initial_lr: 2e-4,
        plateau_patience: 10,
        plateau_factor: 0.5,
        reset_lr_each_phase: true,
    }
}

/// Desk-scale preset: epochs scaled by 1/20 (rounded up) with all phase
/// ratios kept; batch and crop shrink so the full trend experiment fits a
/// commodity-CPU budget.
pub fn desk_schedule() -> PhaseSchedule {
    PhaseSchedule {
        phases: vec![
            Phase { lambda_policy: LambdaPolicy::Fixed(1.4400), quantizer: Quantizer::Noise, epochs: 5 },
            Phase { lambda_policy: LambdaPolicy::UniformOverGrid, quantizer: Quantizer::Noise, epochs: 4 },
            Phase { lambda_policy: LambdaPolicy::UniformOverGrid, quantizer: Quantizer::Ste, epochs: 4 },
        ],
        batch_size: 8,
        crop: 64,
        initial_lr: 2e-4,
        plateau_patience: 10,
        plateau_factor: 0.5,
        reset_lr_each_phase: true,
    }
}

/// `L = R + lambda * D` with `R` in bits/pixel and `D = 255^2 * MSE`.
pub fn rd_loss(
    x: &ArrayD<f32>,
    x_hat: &ArrayD<f32>,
    total_bits: f64,
    n_pixels: usize,
    lambda: f64,
) -> Result<f64, TrainingError> {
    if x.shape() != x_hat.shape() {
        return Err(TrainingError::Invalid(format!(
            "shape mismatch {:?} vs {:?}",
            x.shape(),
            x_hat.shape()
        )));
    }
    if !total_bits.is_finite() {
        return Err(TrainingError::Invalid("non-finite bit count".into()));
    }
    let mut se = 0.0f64;
    for (a, b) in x.iter().zip(x_hat.iter()) {
        if !a.is_finite() || !b.is_finite() {
            return Err(TrainingError::Invalid("non-finite pixel value".into()));
        }
        let d = (*a as f64) - (*b as f64);
        se += d * d;
    }
    let mse = se / x.len() as f64;
    Ok(total_bits / n_pixels as f64 + lambda * 255.0 * 255.0 * mse)
}

/// Training imagery held in memory as 8-bit to keep the footprint small.
pub struct ImageDataset {
    images: Vec<(Vec<u8>, usize, usize)>,
    pub skipped: Vec<String>,
}

pub struct TrainBatch {
    pub crops: ArrayD<f32>,
    pub source_ids: Vec<usize>,
}

impl ImageDataset {
    /// Load every decodable image at least `min_size` on both sides;
    /// smaller or unreadable files are recorded as skipped.
    pub fn load_dir(dir: &Path, min_size: usize) -> Result<Self, TrainingError> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|_| TrainingError::NoImages(dir.display().to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        let mut images = Vec::new();
        let mut skipped = Vec::new();
        for p in paths {
            match crate::image_io::load_image(&p) {
                Ok(img) => {
                    let (_, h, w) = img.dim();
                    if h < min_size || w < min_size {
                        skipped.push(format!("{}: {h}x{w} smaller than crop {min_size}", p.display()));
                        continue;
                    }
                    images.push((crate::image_io::to_rgb8(&img), h, w));
                }
                Err(e) => skipped.push(e.to_string()),
            }
        }
        if images.is_empty() {
            return Err(TrainingError::NoImages(dir.display().to_string()));
        }
        Ok(ImageDataset { images, skipped })
    }

    pub fn from_images(images: &[Array3<f32>]) -> Self {
        ImageDataset {
            images: images
                .iter()
                .map(|img| {
                    let (_, h, w) = img.dim();
                    (crate::image_io::to_rgb8(img), h, w)
                })
                .collect(),
            skipped: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn crop_into(&self, id: usize, y0: usize, x0: usize, crop: usize, out: &mut [f32]) {
        let (buf, _, w) = &self.images[id];
        for c in 0..3 {
            for y in 0..crop {
                for x in 0..crop {
                    let px = buf[((y0 + y) * w + (x0 + x)) * 3 + c];
                    out[(c * crop + y) * crop + x] = px as f32 / 255.0;
                }
            }
        }
    }

    /// One uniformly random crop per image per epoch, shuffled, grouped into
    /// full batches (a trailing partial batch is dropped). Deterministic in
    /// `seed`.
    pub fn epoch_batches(&self, seed: u64, crop: usize, batch: usize) -> Vec<TrainBatch> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..self.images.len()).collect();
        // Fisher-Yates under our own rng
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut batches = Vec::new();
        for chunk in order.chunks(batch) {
            if chunk.len() < batch {
                break;
            }
            let mut crops = ArrayD::<f32>::zeros(IxDyn(&[batch, 3, crop, crop]));
            let mut ids = Vec::with_capacity(batch);
            for (bi, id) in chunk.iter().enumerate() {
                let (_, h, w) = self.images[*id];
                let y0 = rng.random_range(0..=h - crop);
                let x0 = rng.random_range(0..=w - crop);
                let plane = crops.as_slice_mut().unwrap();
                let off = bi * 3 * crop * crop;
                self.crop_into(*id, y0, x0, crop, &mut plane[off..off + 3 * crop * crop]);
                ids.push(*id);
            }
            batches.push(TrainBatch { crops, source_ids: ids });
        }
        batches
    }

    /// Deterministic center crops, for validation.
    pub fn center_crops(&self, ids: &[usize], crop: usize) -> Vec<Array3<f32>> {
        ids.iter()
            .map(|id| {
                let (_, h, w) = self.images[*id];
                let y0 = (h - crop) / 2;
                let x0 = (w - crop) / 2;
                let mut out = vec![0.0f32; 3 * crop * crop];
                self.crop_into(*id, y0, x0, crop, &mut out);
                Array3::from_shape_vec((3, crop, crop), out).unwrap()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub phase: usize,
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_bpp: f64,
    pub mean_psnr: f64,
    pub lr: f32,
    pub val_loss: f64,
}

pub struct TrainReport {
    pub logs: Vec<EpochLog>,
    pub diverged: bool,
    pub final_val_loss: f64,
}

/// Mean rounded-quantizer validation loss at the reference lambda (slot 0).
pub fn validation_loss(
    model: &CodecModel,
    val_images: &[Array3<f32>],
) -> Result<f64, TrainingError> {
    let lambda_idx = 0;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut rng = ChaCha12Rng::seed_from_u64(0); // unused by the STE path
    for chunk in val_images.chunks(8) {
        let (c, h, w) = chunk[0].dim();
        let mut x = ArrayD::<f32>::zeros(IxDyn(&[chunk.len(), c, h, w]));
        for (bi, img) in chunk.iter().enumerate() {
            x.index_axis_mut(ndarray::Axis(0), bi).assign(&img.clone().into_dyn());
        }
        let tape = Tape::no_grad();
        let out = model.forward_train(&tape, &x, lambda_idx, Quantizer::Ste, &mut rng)?;
        total += out.stats.loss * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count as f64)
}

/// Split dataset indices into train and a deterministic ~5% validation set.
pub fn train_val_split(n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for i in 0..n {
        if i % 20 == 19 {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    if val.is_empty() && n > 1 {
        val.push(n - 1);
        train.pop();
    }
    (train, val)
}

struct TrainContext<'a> {
    model: &'a mut CodecModel,
    adam: &'a mut Adam,
    schedule: &'a PhaseSchedule,
    dataset: &'a ImageDataset,
    train_ids: Vec<usize>,
    val_crops: Vec<Array3<f32>>,
    seed: u64,
}

/// Run all phases of `schedule`. Each phase resets the learning rate when
/// configured; the plateau scheduler watches validation loss at the
/// reference lambda. Divergence restores the last epoch snapshot.
pub fn train_full(
    model: &mut CodecModel,
    schedule: &PhaseSchedule,
    dataset: &ImageDataset,
    seed: u64,
) -> Result<TrainReport, TrainingError> {
    let (train_ids, val_ids) = train_val_split(dataset.len());
    if train_ids.is_empty() {
        return Err(TrainingError::NoImages("<dataset>".into()));
    }
    let val_crops = dataset.center_crops(&val_ids, schedule.crop);
    let mut adam = Adam::new(schedule.initial_lr);
    let mut ctx = TrainContext {
        model,
        adam: &mut adam,
        schedule,
        dataset,
        train_ids,
        val_crops,
        seed,
    };
    let mut logs = Vec::new();
    let mut diverged = false;
    for phase_idx in 0..schedule.phases.len() {
        if schedule.reset_lr_each_phase {
            ctx.adam.lr = schedule.initial_lr;
        }
        let ok = run_phase_inner(&mut ctx, phase_idx, &mut logs)?;
        if !ok {
            diverged = true;
            break;
        }
    }
    let final_val_loss = logs.last().map(|l| l.val_loss).unwrap_or(f64::INFINITY);
    Ok(TrainReport { logs, diverged, final_val_loss })
}

/// Run one phase standalone (exposed for tests and partial training).
pub fn run_phase(
    model: &mut CodecModel,
    adam: &mut Adam,
    schedule: &PhaseSchedule,
    phase_idx: usize,
    dataset: &ImageDataset,
    seed: u64,
) -> Result<Vec<EpochLog>, TrainingError> {
    let (train_ids, val_ids) = train_val_split(dataset.len());
    let val_crops = dataset.center_crops(&val_ids, schedule.crop);
    let mut ctx = TrainContext {
        model,
        adam,
        schedule,
        dataset,
        train_ids,
        val_crops,
        seed,
    };
    let mut logs = Vec::new();
    let ok = run_phase_inner(&mut ctx, phase_idx, &mut logs)?;
    if !ok {
        return Err(TrainingError::Diverged { phase: phase_idx, epoch: logs.len() });
    }
    Ok(logs)
}

fn run_phase_inner(
    ctx: &mut TrainContext,
    phase_idx: usize,
    logs: &mut Vec<EpochLog>,
) -> Result<bool, TrainingError> {
    let phase = ctx.schedule.phases[phase_idx].clone();
    let grid_len = ctx.model.config.lambda_grid.len();
    let fixed_idx = match phase.lambda_policy {
        LambdaPolicy::Fixed(l) => Some(ctx.model.config.lambda_grid.index_of(l).ok_or_else(
            || TrainingError::Invalid(format!("lambda {l} not in the grid")),
        )?),
        LambdaPolicy::UniformOverGrid => None,
    };
    let mut scheduler = PlateauScheduler::new(ctx.schedule.plateau_patience, ctx.schedule.plateau_factor);
    for epoch in 0..phase.epochs {
        // snapshot for divergence recovery
        let snapshot: Vec<_> = ctx.model.store.entries.iter().map(|e| e.value.clone()).collect();
        let epoch_seed = ctx
            .seed
            .wrapping_add(1_000_003 * (phase_idx as u64 + 1))
            .wrapping_add(epoch as u64);
        let mut lambda_rng = ChaCha12Rng::seed_from_u64(epoch_seed ^ 0xABCD);
        let mut noise_rng = ChaCha12Rng::seed_from_u64(epoch_seed ^ 0x1234);
        // epoch visits each training image once
        let sub = SubsetView { ds: ctx.dataset, ids: &ctx.train_ids };
        let batches = sub.epoch_batches(epoch_seed, ctx.schedule.crop, ctx.schedule.batch_size);
        let mut sum_loss = 0.0;
        let mut sum_bpp = 0.0;
        let mut sum_psnr = 0.0;
        let mut n = 0usize;
        for batch in &batches {
            // lambda sampled per batch; the gain slot follows the same index
            let lambda_idx = fixed_idx.unwrap_or_else(|| lambda_rng.random_range(0..grid_len));
            let tape = Tape::new();
            let out = ctx.model.forward_train(
                &tape,
                &batch.crops,
                lambda_idx,
                phase.quantizer,
                &mut noise_rng,
            )?;
            if !out.stats.loss.is_finite() {
                // restore last good parameters and abort
                for (e, snap) in ctx.model.store.entries.iter_mut().zip(snapshot) {
                    e.value = snap;
                }
                return Ok(false);
            }
            ctx.model.store.zero_grads();
            ctx.model.store.backward(&tape, out.loss);
            ctx.model.store.clip_grad_norm(1.0);
            ctx.adam.step(&mut ctx.model.store);
            ctx.model.clamp_gains();
            sum_loss += out.stats.loss;
            sum_bpp += out.stats.bpp;
            sum_psnr += out.stats.psnr;
            n += 1;
        }
        let val_loss = if ctx.val_crops.is_empty() {
            sum_loss / n.max(1) as f64
        } else {
            validation_loss(ctx.model, &ctx.val_crops)?
        };
        scheduler.observe(val_loss, &mut ctx.adam.lr);
        logs.push(EpochLog {
            phase: phase_idx,
            epoch,
            mean_loss: sum_loss / n.max(1) as f64,
            mean_bpp: sum_bpp / n.max(1) as f64,
            mean_psnr: sum_psnr / n.max(1) as f64,
            lr: ctx.adam.lr,
            val_loss,
        });
    }
    Ok(true)
}

/// Restriction of a dataset to a subset of image ids.
struct SubsetView<'a> {
    ds: &'a ImageDataset,
    ids: &'a [usize],
}

impl SubsetView<'_> {
    fn epoch_batches(&self, seed: u64, crop: usize, batch: usize) -> Vec<TrainBatch> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = self.ids.to_vec();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut batches = Vec::new();
        for chunk in order.chunks(batch) {
            if chunk.len() < batch {
                break;
            }
            let mut crops = ArrayD::<f32>::zeros(IxDyn(&[batch, 3, crop, crop]));
            let mut ids = Vec::with_capacity(batch);
            for (bi, id) in chunk.iter().enumerate() {
                let (_, h, w) = self.ds.images[*id];
                let y0 = rng.random_range(0..=h - crop);
                let x0 = rng.random_range(0..=x_max_guard(w, crop));
                let plane = crops.as_slice_mut().unwrap();
                let off = bi * 3 * crop * crop;
                self.ds.crop_into(*id, y0, x0, crop, &mut plane[off..off + 3 * crop * crop]);
                ids.push(*id);
            }
            batches.push(TrainBatch { crops, source_ids: ids });
        }
        batches
    }
}

fn x_max_guard(w: usize, crop: usize) -> usize {
    w - crop
}

/// Serialize epoch logs as JSON lines.
pub fn logs_to_jsonl(logs: &[EpochLog]) -> String {
    logs.iter().map(|l| serde_json::to_string(l).unwrap() + "\n").collect()
}
