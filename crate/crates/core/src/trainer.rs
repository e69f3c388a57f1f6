//! Optimization loop: seeded shuffling and cropping, deep-supervised loss,
//! Adam under a cosine schedule, evaluation, logging and checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use dpm_tensor::{Module, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, Progress};
use crate::data::ImagePair;
use crate::error::{Error, Result};
use crate::inference::derain;
use crate::losses::{total_loss, LossWeights, SupervisionSet};
use crate::metrics::{psnr_y, ssim_y};
use crate::model::{DpmFormer, SPATIAL_MULTIPLE};
use crate::optim::{adam_step, cosine_lr, AdamConfig, AdamState};

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const CROP_STREAM: u64 = 0x4352_4f50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Side of the square training crop; a multiple of 16.
    pub crop: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub loss: LossWeights,
    /// Supervision weight of every branch output (the final output has 1).
    pub branch_weight: f64,
    /// Evaluate every this many epochs; 0 disables evaluation.
    pub eval_every: usize,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 2,
            crop: 256,
            lr_max: 1e-4,
            lr_min: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-8,
            adam_eps: 1e-8,
            seed: 0,
            loss: LossWeights::default(),
            branch_weight: 1.0,
            eval_every: 1,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.epochs == 0 {
            v.push("train.epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            v.push("train.batch_size must be at least 1".into());
        }
        if self.crop == 0 || !self.crop.is_multiple_of(SPATIAL_MULTIPLE) {
            v.push(format!(
                "train.crop must be a positive multiple of {SPATIAL_MULTIPLE}, got {}",
                self.crop
            ));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            v.push(format!(
                "train.lr_min ({}) must satisfy 0 <= lr_min <= lr_max ({})",
                self.lr_min, self.lr_max
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                v.push(format!("train.{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            v.push(format!(
                "train.adam_eps must be positive, got {}",
                self.adam_eps
            ));
        }
        if !(self.weight_decay >= 0.0) {
            v.push(format!(
                "train.weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if !(self.branch_weight >= 0.0) {
            v.push(format!(
                "train.branch_weight must be non-negative, got {}",
                self.branch_weight
            ));
        }
        v.extend(self.loss.violations("train.loss"));
        v
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One line of the training log. `step` counts completed updates (from 1),
/// `epoch` is 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_char: f64,
    pub loss_edge: f64,
    pub loss_fft: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub psnr: f64,
    pub ssim: f64,
    pub images: Vec<ImageScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Mean Y-PSNR and Y-SSIM of the model's restorations against clean images.
pub fn evaluate(model: &DpmFormer<f32>, data: &[ImagePair]) -> Result<EvalSummary> {
    if data.is_empty() {
        return Err(Error::Invalid("evaluate: no images".into()));
    }
    let images = data
        .iter()
        .map(|p| {
            let out = derain(model, &p.rainy)?.image;
            Ok(ImageScore {
                id: p.id.clone(),
                psnr: psnr_y(&out, &p.clean)?,
                ssim: ssim_y(&out, &p.clean)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = images.len() as f64;
    Ok(EvalSummary {
        psnr: images.iter().map(|s| s.psnr).sum::<f64>() / n,
        ssim: images.iter().map(|s| s.ssim).sum::<f64>() / n,
        images,
    })
}

/// Aligned crop at offsets that are multiples of 16.
pub fn random_crop(
    pair: &ImagePair,
    crop: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (h, w) = pair.extent();
    if crop > h || crop > w {
        return Err(Error::Invalid(format!(
            "pair {}: crop {crop} exceeds image extent {h}x{w}",
            pair.id
        )));
    }
    let oy = SPATIAL_MULTIPLE * rng.random_range(0..=(h - crop) / SPATIAL_MULTIPLE);
    let ox = SPATIAL_MULTIPLE * rng.random_range(0..=(w - crop) / SPATIAL_MULTIPLE);
    let cut = |t: &Tensor<f32>| -> Result<Tensor<f32>> {
        Ok(t.narrow(2, oy, crop)?.narrow(3, ox, crop)?)
    };
    Ok((cut(&pair.rainy)?, cut(&pair.clean)?))
}

pub struct Trainer {
    pub model: DpmFormer<f32>,
    pub adam: AdamState<f32>,
    cfg: TrainConfig,
    progress: Progress,
    steps_per_epoch: u64,
}

impl Trainer {
    pub fn new(model: DpmFormer<f32>, cfg: TrainConfig, train_len: usize) -> Result<Self> {
        let errs = cfg.violations();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        if train_len == 0 {
            return Err(Error::Invalid("training set is empty".into()));
        }
        let adam = AdamState::new(&model);
        let steps_per_epoch = train_len.div_ceil(cfg.batch_size) as u64;
        Ok(Trainer {
            model,
            adam,
            cfg,
            progress: Progress { step: 0, epoch: 0 },
            steps_per_epoch,
        })
    }

    /// Continues from a training checkpoint.
    pub fn resume(ckpt: &Checkpoint, cfg: TrainConfig, train_len: usize) -> Result<Self> {
        let model = ckpt.build_model()?;
        let adam = ckpt
            .adam_state(&model)?
            .ok_or_else(|| Error::Checkpoint("no optimizer state to resume from".into()))?;
        let progress = ckpt
            .progress
            .ok_or_else(|| Error::Checkpoint("no training progress to resume from".into()))?;
        let mut t = Trainer::new(model, cfg, train_len)?;
        t.adam = adam;
        t.progress = progress;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn progress(&self) -> Progress {
        self.progress
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch * self.cfg.epochs as u64
    }

    /// The schedule runs from the first update (`lr_max`) to the last
    /// update (`lr_min`), so its horizon is one less than the step count.
    pub fn schedule_horizon(&self) -> u64 {
        self.total_steps().saturating_sub(1).max(1)
    }

    /// Sample order for a 0-based epoch.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ SHUFFLE_STREAM);
        rng.set_stream(epoch as u64);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx
    }

    /// One update on a batch; crops are drawn from a stream keyed by the
    /// global step so resumed runs see the same crops.
    pub fn step(&mut self, batch: &[&ImagePair]) -> Result<StepRecord> {
        let step = self.progress.step;
        let lr = cosine_lr(
            step,
            self.schedule_horizon(),
            self.cfg.lr_max,
            self.cfg.lr_min,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ CROP_STREAM);
        rng.set_stream(step);
        let (mut rainy, mut clean) = (Vec::new(), Vec::new());
        for p in batch {
            let (r, c) = random_crop(p, self.cfg.crop, &mut rng)?;
            rainy.push(r);
            clean.push(c);
        }
        let rainy = Tensor::concat(&rainy, 0)?;
        let clean = Tensor::concat(&clean, 0)?;

        let out = self.model.forward(&rainy)?;
        let set = SupervisionSet::from_output(&out, &clean, self.cfg.branch_weight)?;
        let loss = total_loss(&set, &self.cfg.loss)?;
        let total = loss.total.item() as f64;
        if !total.is_finite() {
            return Err(Error::NonFinite {
                step: step + 1,
                lr,
                total,
                charbonnier: loss.charbonnier,
                edge: loss.edge,
                fft: loss.fft,
            });
        }
        self.model.zero_grad();
        loss.total.backward()?;
        adam_step(&mut self.model, &mut self.adam, lr, &self.cfg.adam())?;
        self.progress.step += 1;
        Ok(StepRecord {
            step: self.progress.step,
            epoch: self.progress.epoch + 1,
            lr,
            loss_total: total,
            loss_char: loss.charbonnier,
            loss_edge: loss.edge,
            loss_fft: loss.fft,
            psnr: None,
            ssim: None,
        })
    }

    /// Runs the remainder of the current epoch.
    pub fn run_epoch(&mut self, data: &[ImagePair]) -> Result<Vec<StepRecord>> {
        let epoch = self.progress.epoch;
        let order = self.epoch_order(epoch, data.len());
        let first = epoch as u64 * self.steps_per_epoch;
        let mut records = Vec::new();
        for (i, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            if first + (i as u64) < self.progress.step {
                continue;
            }
            let batch: Vec<&ImagePair> = chunk.iter().map(|&j| &data[j]).collect();
            let rec = self.step(&batch)?;
            log::debug!("step {} loss {:.6}", rec.step, rec.loss_total);
            records.push(rec);
        }
        self.progress.epoch += 1;
        Ok(records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.model, Some(&self.adam), Some(self.progress))
    }

    /// Trains until the configured epoch count. With `out_dir`, appends
    /// `train_log.jsonl`, writes periodic `checkpoints/epoch_NNNN.dpm` and
    /// a final `final.dpm`. `eval` falls back to the training set when empty.
    pub fn fit(
        &mut self,
        train: &[ImagePair],
        eval: &[ImagePair],
        out_dir: Option<&Path>,
    ) -> Result<TrainReport> {
        let mut log_file = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("train_log.jsonl");
                let f = if self.progress.step > 0 {
                    OpenOptions::new().create(true).append(true).open(&path)
                } else {
                    File::create(&path)
                };
                Some((f.map_err(|e| Error::io(&path, e))?, path))
            }
            None => None,
        };
        let eval_set = if eval.is_empty() { train } else { eval };
        let mut report = TrainReport::default();
        while self.progress.epoch < self.cfg.epochs {
            let mut records = self.run_epoch(train)?;
            let epoch = self.progress.epoch;
            let mean_loss = if records.is_empty() {
                f64::NAN
            } else {
                records.iter().map(|r| r.loss_total).sum::<f64>() / records.len() as f64
            };
            let mut summary = EpochSummary {
                epoch,
                mean_loss,
                psnr: None,
                ssim: None,
            };
            let due = |every: usize| {
                every > 0 && (epoch.is_multiple_of(every) || epoch == self.cfg.epochs)
            };
            if due(self.cfg.eval_every) {
                let ev = evaluate(&self.model, eval_set)?;
                summary.psnr = Some(ev.psnr);
                summary.ssim = Some(ev.ssim);
                if let Some(last) = records.last_mut() {
                    last.psnr = Some(ev.psnr);
                    last.ssim = Some(ev.ssim);
                }
                log::info!(
                    "epoch {epoch}: loss {mean_loss:.6}, psnr {:.3} dB, ssim {:.4}",
                    ev.psnr,
                    ev.ssim
                );
            } else {
                log::info!("epoch {epoch}: loss {mean_loss:.6}");
            }
            if let Some((f, path)) = log_file.as_mut() {
                for r in &records {
                    let line = serde_json::to_string(r)?;
                    writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
                }
            }
            if let Some(dir) = out_dir {
                if self.cfg.checkpoint_every > 0 && epoch.is_multiple_of(self.cfg.checkpoint_every)
                {
                    self.save(
                        &dir.join("checkpoints")
                            .join(format!("epoch_{epoch:04}.dpm")),
                    )?;
                }
            }
            report.steps.extend(records);
            report.epochs.push(summary);
        }
        if let Some(dir) = out_dir {
            let path = dir.join("final.dpm");
            self.save(&path)?;
            report.final_checkpoint = Some(path);
        }
        Ok(report)
    }
}
