use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::dataset::{LabeledImageSet, CHANNELS, IMAGE_SIZE};
use crate::harness::eval::evaluate;
use crate::rng;
use crate::tensor::{AdamState, Tensor};
use crate::vit::{forward, FullPrecision, ViTConfig, ViTModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of steps spent in linear warm-up before cosine decay.
    pub warmup: f64,
    /// Random horizontal flips (every class is mirror symmetric).
    pub flip: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 24,
            batch_size: 50,
            lr: 2e-3,
            warmup: 0.05,
            flip: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

/// Mean cross-entropy of `logits [B, C]` against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::shape("cross_entropy", format!("{b} rows, {} labels", labels.len())));
    }
    let mut mask = vec![0.0; b * c];
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::Invalid(format!("label {l} outside {c} classes")));
        }
        mask[i * c + l] = 1.0;
    }
    let picked = logits.log_softmax(1)?.mul(&Tensor::new(vec![b, c], mask)?)?;
    picked.sum()?.scale(-1.0 / b as f64)
}

fn lr_at(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    let warm = ((total as f64) * cfg.warmup).ceil() as usize;
    if step < warm {
        return cfg.lr * (step + 1) as f64 / warm as f64;
    }
    let t = (step - warm) as f64 / (total - warm).max(1) as f64;
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

fn flip_horizontal(data: &mut [f64]) {
    for row in data.chunks_mut(IMAGE_SIZE) {
        row.reverse();
    }
}

/// Trains a fresh model on `train` (evaluating on `test` when given).
pub fn train_toy_model(
    config: ViTConfig,
    train: &LabeledImageSet,
    test: Option<&LabeledImageSet>,
    cfg: &TrainConfig,
) -> Result<(ViTModel, TrainReport)> {
    if train.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Invalid("training needs data and a positive batch size".into()));
    }
    crate::alloc::tune_allocator();
    let mut model = ViTModel::init(config, cfg.seed)?;
    let sizes: Vec<usize> = model.weights.named().iter().map(|(_, p)| p.data.len()).collect();
    let mut adam = AdamState::new(&sizes, cfg.lr, 0.9, 0.999);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut step = 0;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let image_len = CHANNELS * IMAGE_SIZE * IMAGE_SIZE;

    for epoch in 0..cfg.epochs {
        let mut r = rng::stream(cfg.seed, &[0x7A1, epoch as u64]);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut r);
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch = train.batch(idx)?;
            let mut data = batch.to_vec();
            if cfg.flip {
                for img in data.chunks_mut(image_len) {
                    if r.random::<bool>() {
                        flip_horizontal(img);
                    }
                }
            }
            let images = Tensor::new(batch.shape().to_vec(), data)?;
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();

            let bound = model.bind(|_| true)?;
            let out = forward(&bound, &model.config, &images, &FullPrecision, false)?;
            let loss = cross_entropy(&out.logits, &labels)?;
            if !loss.item().is_finite() {
                return Err(Error::Diverged(format!("loss {} at epoch {epoch}, step {step}", loss.item())));
            }
            loss.backward()?;
            loss_sum += loss.item() * idx.len() as f64;

            let grads: Vec<Vec<f64>> = bound.named().iter().map(|(_, t)| t.grad_or_zero()).collect();
            adam.lr = lr_at(cfg, step, total);
            let mut named = model.weights.named_mut();
            let mut params: Vec<&mut [f64]> = named.iter_mut().map(|(_, p)| p.data.as_mut_slice()).collect();
            let grad_refs: Vec<Option<&[f64]>> = grads.iter().map(|g| Some(g.as_slice())).collect();
            adam.step(&mut params, &grad_refs)?;
            step += 1;
        }
        let mean = loss_sum / train.len() as f64;
        info!("epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
    }

    let train_accuracy = evaluate(&model, train)?;
    let test_accuracy = test.map(|t| evaluate(&model, t)).transpose()?;
    let report = TrainReport {
        epochs: cfg.epochs,
        steps: step,
        final_loss: epoch_losses.last().copied().unwrap_or(f64::NAN),
        epoch_losses,
        train_accuracy,
        test_accuracy,
    };
    Ok((model, report))
}
