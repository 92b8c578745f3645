//! Block-wise reconstruction of a fake-quantized model.
//!
//! Units are processed in forward order: block 0 (with the embedding), the
//! remaining blocks, then the head (final norm and classifier). Each unit is
//! fed the output of its already-reconstructed quantized predecessors and is
//! trained to match the full-precision output of the same unit.

use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{attach_quantizers_with, QuantizedModel};
use crate::tensor::{AdamState, Tensor};
use crate::vit::{block_forward, embed, head_forward, Bound, FullPrecision, SiteHook, Unit, ViTConfig, ViTModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PtqConfig {
    pub iterations: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// `false` stops after calibration.
    pub finetune: bool,
    /// Bit-width of the image fed to the patch embedding; `None` uses the
    /// activation bit-width.
    pub image_bits: Option<u32>,
    pub seed: u64,
}

impl Default for PtqConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            lr: 4e-5,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            finetune: true,
            image_bits: Some(8),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitReport {
    pub unit: String,
    pub pre_loss: f64,
    pub post_loss: f64,
    pub iterations: usize,
    pub lr_start: f64,
    pub lr_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PtqReport {
    pub wbits: u32,
    pub abits: u32,
    pub calibration_images: usize,
    pub finetuned: bool,
    pub units: Vec<UnitReport>,
}

/// Per-sample Frobenius norm of `a - b`, averaged over the leading axis.
pub fn block_reconstruction_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() || a.shape().is_empty() {
        return Err(Error::shape(
            "block_reconstruction_loss",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let n = a.shape()[0];
    let d = a.sub(b)?;
    d.mul(&d)?.reshape(&[n, d.numel() / n])?.sum_axis(1)?.sqrt()?.mean()
}

fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos())
}

/// Units in reconstruction order.
pub fn units(model: &ViTModel) -> Vec<Unit> {
    let mut u: Vec<Unit> = (0..model.config.num_blocks).map(Unit::Block).collect();
    u.push(Unit::Head);
    u
}

fn unit_name(u: Unit) -> String {
    match u {
        Unit::Block(l) => format!("block{l}"),
        Unit::Head => "head".into(),
    }
}

/// Output of `unit` for input `x` (images for block 0).
fn unit_output(w: &Bound, cfg: &ViTConfig, unit: Unit, x: &Tensor, hook: &dyn SiteHook) -> Result<Tensor> {
    match unit {
        Unit::Block(l) => {
            let input = if l == 0 { embed(w, cfg, x, hook)? } else { x.clone() };
            Ok(block_forward(&w.blocks[l], cfg, l, &input, hook)?.output)
        }
        Unit::Head => Ok(head_forward(w, cfg, x, hook)?.0),
    }
}

fn unit_forward(model: &ViTModel, unit: Unit, x: &Tensor, hook: &dyn SiteHook) -> Result<Tensor> {
    unit_output(&model.bind_frozen()?, &model.config, unit, x, hook)
}

/// Reconstructs one unit in place. `input` is the quantized predecessor
/// output (images for block 0); `target` the full-precision unit output.
pub fn finetune_block(
    q: &mut QuantizedModel,
    unit: Unit,
    input: &Tensor,
    target: &Tensor,
    cfg: &PtqConfig,
) -> Result<UnitReport> {
    let loss_now = |q: &QuantizedModel| -> Result<f64> {
        let out = unit_forward(&q.model, unit, input, &q.sites)?;
        Ok(block_reconstruction_loss(&out, target)?.item())
    };
    let pre_loss = loss_now(q)?;
    let sizes: Vec<usize> = q
        .model
        .weights
        .named()
        .into_iter()
        .filter(|(n, _)| Unit::of(n) == unit)
        .map(|(_, p)| p.data.len())
        .collect();
    let mut adam = AdamState::new(&sizes, cfg.lr, cfg.beta1, cfg.beta2);
    for step in 0..cfg.iterations {
        let w = q.model.bind(|name| Unit::of(name) == unit)?;
        let out = unit_output(&w, &q.model.config, unit, input, &q.sites)?;
        let loss = block_reconstruction_loss(&out, target)?;
        if !loss.item().is_finite() {
            return Err(Error::Diverged(format!("{} step {step}: loss {}", unit_name(unit), loss.item())));
        }
        loss.backward()?;
        let bound = w.named();
        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(sizes.len());
        for (name, t) in &bound {
            if Unit::of(name) == unit {
                let mut g = t.grad_or_zero();
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Diverged(format!("{} step {step}: non-finite gradient in {name}", unit_name(unit))));
                }
                if cfg.weight_decay != 0.0 {
                    for (gi, wi) in g.iter_mut().zip(t.data()) {
                        *gi += cfg.weight_decay * wi;
                    }
                }
                grads.push(g);
            }
        }
        adam.lr = cosine_lr(cfg.lr, step, cfg.iterations);
        let mut named = q.model.weights.named_mut();
        let mut params: Vec<&mut [f64]> = named
            .iter_mut()
            .filter(|(n, _)| Unit::of(n) == unit)
            .map(|(_, p)| p.data.as_mut_slice())
            .collect();
        let refs: Vec<Option<&[f64]>> = grads.iter().map(|g| Some(g.as_slice())).collect();
        adam.step(&mut params, &refs)?;
    }
    let post_loss = loss_now(q)?;
    Ok(UnitReport {
        unit: unit_name(unit),
        pre_loss,
        post_loss,
        iterations: cfg.iterations,
        lr_start: cfg.lr,
        lr_end: cosine_lr(cfg.lr, cfg.iterations.saturating_sub(1), cfg.iterations),
    })
}

/// Calibrates every site on `images` (standardized `[B, 3, S, S]`), then
/// reconstructs each unit in order.
pub fn run_ptq(fp: &ViTModel, images: &Tensor, wbits: u32, abits: u32, cfg: &PtqConfig) -> Result<(QuantizedModel, PtqReport)> {
    crate::alloc::tune_allocator();
    let mut q = attach_quantizers_with(fp, wbits, abits, cfg.image_bits, images)?;
    let mut report = PtqReport {
        wbits,
        abits,
        calibration_images: images.shape()[0],
        finetuned: cfg.finetune,
        units: Vec::new(),
    };
    if !cfg.finetune {
        return Ok((q, report));
    }
    let mut fp_in = images.clone();
    let mut q_in = images.clone();
    for unit in units(fp) {
        let target = unit_forward(fp, unit, &fp_in, &FullPrecision)?.detach();
        let r = finetune_block(&mut q, unit, &q_in, &target, cfg)?;
        info!("W{wbits}A{abits} {}: {:.5} -> {:.5}", r.unit, r.pre_loss, r.post_loss);
        report.units.push(r);
        if unit != Unit::Head {
            q_in = unit_forward(&q.model, unit, &q_in, &q.sites)?.detach();
            fp_in = target;
        }
    }
    Ok((q, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::attach_quantizers;

    #[test]
    fn loss_oracles() {
        let a = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(block_reconstruction_loss(&a, &a).unwrap().item(), 0.0);
        let b = a.offset(0.3).unwrap();
        assert!((block_reconstruction_loss(&a, &b).unwrap().item() - 0.6).abs() < 1e-12);
        let c = Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(block_reconstruction_loss(&a, &c).is_err());
    }

    fn setup() -> (ViTModel, Tensor) {
        let cfg = ViTConfig { image_size: 8, embed_dim: 8, num_heads: 2, num_blocks: 2, ..ViTConfig::default() };
        let m = ViTModel::init(cfg, 3).unwrap();
        let imgs = Tensor::new(vec![4, 3, 8, 8], (0..768).map(|i| ((i * 53) % 29) as f64 / 14.0 - 1.0).collect()).unwrap();
        (m, imgs)
    }

    #[test]
    fn finetune_is_local_and_helps() {
        let (m, imgs) = setup();
        let cfg = PtqConfig { iterations: 20, lr: 1e-3, ..Default::default() };
        let (q, rep) = run_ptq(&m, &imgs, 3, 4, &cfg).unwrap();
        assert_eq!(rep.units.len(), 3);
        for u in &rep.units {
            assert!(u.post_loss <= u.pre_loss, "{u:?}");
        }
        // only unit-1 parameters move when unit 1 is tuned
        let mut q2 = attach_quantizers(&m, 3, 4, &imgs).unwrap();
        let before = q2.model.clone();
        let x = Tensor::new(vec![4, 17, 8], vec![0.1; 4 * 17 * 8]).unwrap();
        let t = Tensor::new(vec![4, 17, 8], vec![0.2; 4 * 17 * 8]).unwrap();
        finetune_block(&mut q2, Unit::Block(1), &x, &t, &cfg).unwrap();
        for ((n, a), (_, b)) in before.weights.named().iter().zip(q2.model.weights.named()) {
            if Unit::of(n) != Unit::Block(1) {
                assert_eq!(a.data, b.data, "{n} moved");
            }
        }
        let (q3, _) = run_ptq(&m, &imgs, 3, 4, &cfg).unwrap();
        assert_eq!(q, q3);
    }

    #[test]
    fn zero_iterations_is_noop() {
        let (m, imgs) = setup();
        let cfg = PtqConfig { iterations: 0, ..Default::default() };
        let (q, _) = run_ptq(&m, &imgs, 4, 4, &cfg).unwrap();
        assert_eq!(q.model, m);
        let (q, rep) = run_ptq(&m, &imgs, 4, 4, &PtqConfig { finetune: false, ..Default::default() }).unwrap();
        assert!(rep.units.is_empty());
        assert_eq!(q.model, m);
    }
}
