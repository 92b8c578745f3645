//! Synthesis objectives. Batched `*_rows` variants return one value per view
//! (`[V]`); the single-image functions wrap them.

use rand::Rng;

use crate::error::{Error, Result};
use crate::priors::{AttentionPrior, PriorSet};
use crate::rng;
use crate::tensor::Tensor;
use crate::vit::{cls_attention_rows, ForwardTrace};

/// Smoothing inside the isotropic TV square root.
pub const TV_EPS: f64 = 1e-12;

fn as_rows(logits: &Tensor) -> Result<Tensor> {
    match logits.shape() {
        [c] => logits.reshape(&[1, *c]),
        [_, _] => Ok(logits.clone()),
        s => Err(Error::shape("logits", format!("expected [C] or [V, C], got {s:?}"))),
    }
}

/// `-sum_c T[v, c] log softmax(logits[v])[c]`, `[V]`.
pub fn soft_cross_entropy_rows(logits: &Tensor, targets: &[f64]) -> Result<Tensor> {
    let logits = as_rows(logits)?;
    let (v, c) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != v * c {
        return Err(Error::shape("soft_cross_entropy", format!("{} targets for [{v}, {c}] logits", targets.len())));
    }
    for row in targets.chunks(c) {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 || row.iter().any(|t| *t < 0.0) {
            return Err(Error::Invalid(format!("soft target sums to {s}")));
        }
    }
    let t = Tensor::new(vec![v, c], targets.to_vec())?;
    logits.log_softmax(1)?.mul(&t)?.sum_axis(1)?.scale(-1.0)
}

pub fn one_hot(c: usize, classes: usize) -> Result<Vec<f64>> {
    if c >= classes {
        return Err(Error::Invalid(format!("class {c} outside {classes} classes")));
    }
    let mut t = vec![0.0; classes];
    t[c] = 1.0;
    Ok(t)
}

/// Cross-entropy of one image's logits against class `c`.
pub fn one_hot_loss(logits: &Tensor, c: usize) -> Result<Tensor> {
    let n = *logits.shape().last().unwrap_or(&0);
    soft_cross_entropy_rows(logits, &one_hot(c, n)?)?.sum()
}

/// Soft cross-entropy of one image's logits against `target`.
pub fn sl_loss(logits: &Tensor, target: &[f64]) -> Result<Tensor> {
    soft_cross_entropy_rows(logits, target)?.sum()
}

/// `Z ~ U(0, 1)^C`, `Z[c] ~ U(eps1, eps2)` for `c` in `classes`,
/// returns `softmax(Z)`.
pub fn make_soft_target(r: &mut rng::Rng, classes: &[usize], num_classes: usize, eps1: f64, eps2: f64) -> Result<Vec<f64>> {
    if classes.is_empty() {
        return Err(Error::Invalid("soft target needs at least one class".into()));
    }
    if !(eps2 > eps1 && eps1 > 1.0) {
        return Err(Error::Invalid(format!("need eps2 > eps1 > 1, got ({eps1}, {eps2})")));
    }
    for (i, &c) in classes.iter().enumerate() {
        if c >= num_classes {
            return Err(Error::Invalid(format!("class {c} outside {num_classes} classes")));
        }
        if classes[..i].contains(&c) {
            return Err(Error::Invalid(format!("duplicate class {c}")));
        }
    }
    let mut z: Vec<f64> = (0..num_classes).map(|_| r.random_range(0.0..1.0)).collect();
    for &c in classes {
        z[c] = r.random_range(eps1..eps2);
    }
    Ok(softmax(&z))
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Isotropic total variation per view of `[V, C, H, W]` images.
///
/// `sqrt(dh^2 + dv^2 + eps)` at every pixel that has both a right and a
/// lower neighbour, summed and divided by the element count `C * H * W`.
pub fn tv_rows(images: &Tensor) -> Result<Tensor> {
    let s = images.shape().to_vec();
    if s.len() != 4 || s[2] < 2 || s[3] < 2 {
        return Err(Error::shape("tv_loss", format!("need [V, C, H>=2, W>=2], got {s:?}")));
    }
    let (v, c, h, w) = (s[0], s[1], s[2], s[3]);
    let top_left = images.slice(2, 0, h - 1)?.slice(3, 0, w - 1)?;
    let dh = images.slice(2, 0, h - 1)?.slice(3, 1, w)?.sub(&top_left)?;
    let dv = images.slice(2, 1, h)?.slice(3, 0, w - 1)?.sub(&top_left)?;
    let mag = dh.mul(&dh)?.add(&dv.mul(&dv)?)?.offset(TV_EPS)?.sqrt()?;
    mag.reshape(&[v, c * (h - 1) * (w - 1)])?.sum_axis(1)?.scale(1.0 / (c * h * w) as f64)
}

/// TV of one `[C, H, W]` image.
pub fn tv_loss(image: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    if shape.len() != 4 {
        return Err(Error::shape("tv_loss", format!("need [C, H, W], got {:?}", image.shape())));
    }
    tv_rows(&image.reshape(&shape)?)?.sum()
}

/// Mean squared difference between a classification-token attention row
/// and a prior.
pub fn apa_head_loss(a_c: &Tensor, prior: &AttentionPrior) -> Result<Tensor> {
    let n = prior.values.len();
    if a_c.shape() != [n] {
        return Err(Error::shape("apa_head_loss", format!("attention {:?} vs prior of {n}", a_c.shape())));
    }
    let d = a_c.sub(&Tensor::new(vec![n], prior.values.clone())?)?;
    d.mul(&d)?.mean()
}

/// Depth-weighted APA per view. `priors[v]` covers 1-indexed blocks
/// `first_block..=L`; a view with `None` contributes zero.
pub fn apa_rows(trace: &ForwardTrace, priors: &[Option<&PriorSet>], first_block: usize) -> Result<Tensor> {
    let nblocks = trace.blocks.len();
    if nblocks == 0 {
        return Err(Error::Invalid("APA needs a traced forward pass".into()));
    }
    let first = first_block.max(1);
    let mut total: Option<Tensor> = None;
    for l in first..=nblocks {
        let rows = cls_attention_rows(trace.attention(l - 1)?)?;
        let (v, h, n) = (rows.shape()[0], rows.shape()[1], rows.shape()[2]);
        if priors.len() != v {
            return Err(Error::shape("apa_loss", format!("{} prior sets for {v} views", priors.len())));
        }
        let mut target = vec![0.0; v * h * n];
        let mut mask = vec![0.0; v * h * n];
        for (vi, set) in priors.iter().enumerate() {
            let Some(set) = set else { continue };
            for hi in 0..h {
                let p = set
                    .get(&(l, hi + 1))
                    .ok_or_else(|| Error::Invalid(format!("no prior for block {l}, head {}", hi + 1)))?;
                if p.values.len() != n {
                    return Err(Error::shape("apa_loss", format!("prior of {} for {n} tokens", p.values.len())));
                }
                let o = (vi * h + hi) * n;
                target[o..o + n].copy_from_slice(&p.values);
                mask[o..o + n].fill(1.0);
            }
        }
        let d = rows
            .sub(&Tensor::new(vec![v, h, n], target)?)?
            .mul(&Tensor::new(vec![v, h, n], mask)?)?;
        let weight = l as f64 / nblocks as f64;
        let term = d.mul(&d)?.reshape(&[v, h * n])?.sum_axis(1)?.scale(weight / n as f64)?;
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term)?,
        });
    }
    Ok(total.expect("at least one block"))
}

/// APA of view `image` in a traced batch.
pub fn apa_loss(trace: &ForwardTrace, image: usize, priors: &PriorSet, first_block: usize) -> Result<Tensor> {
    let v = trace.logits.shape()[0];
    if image >= v {
        return Err(Error::Index(format!("view {image} of {v}")));
    }
    let sets: Vec<Option<&PriorSet>> = (0..v).map(|i| (i == image).then_some(priors)).collect();
    apa_rows(trace, &sets, first_block)?.sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::{generate_priors_for_item, PriorConfig};
    use crate::vit::{ViTConfig, ViTModel};

    fn scalar_ce(logits: &[f64], t: &[f64]) -> f64 {
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        -logits.iter().zip(t).map(|(l, ti)| ti * (l - lse)).sum::<f64>()
    }

    #[test]
    fn one_hot_cases() {
        let u = Tensor::zeros(&[10]);
        assert!((one_hot_loss(&u, 4).unwrap().item() - 10f64.ln()).abs() < 1e-12);
        let mut big = vec![0.0; 10];
        big[2] = 800.0;
        assert!(one_hot_loss(&Tensor::new(vec![10], big).unwrap(), 2).unwrap().item() < 1e-12);
        assert!(one_hot_loss(&u, 10).is_err());
        let mut r = rng::seeded(4);
        for _ in 0..20 {
            let l: Vec<f64> = (0..10).map(|_| r.random_range(-5.0..5.0)).collect();
            let c = r.random_range(0..10);
            let got = one_hot_loss(&Tensor::new(vec![10], l.clone()).unwrap(), c).unwrap().item();
            assert!((got - scalar_ce(&l, &one_hot(c, 10).unwrap())).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_label_cases() {
        let mut r = rng::seeded(5);
        for _ in 0..20 {
            let l: Vec<f64> = (0..10).map(|_| r.random_range(-5.0..5.0)).collect();
            let t = make_soft_target(&mut r, &[1, 7], 10, 5.0, 10.0).unwrap();
            let got = sl_loss(&Tensor::new(vec![10], l.clone()).unwrap(), &t).unwrap().item();
            assert!((got - scalar_ce(&l, &t)).abs() < 1e-12);
        }
        // minimum at equality is the entropy
        let z = [0.3, 1.2, -0.4, 2.0];
        let t = softmax(&z);
        let entropy: f64 = -t.iter().map(|p| p * p.ln()).sum::<f64>();
        let got = sl_loss(&Tensor::new(vec![4], z.to_vec()).unwrap(), &t).unwrap().item();
        assert!((got - entropy).abs() < 1e-12);
        assert!(sl_loss(&Tensor::zeros(&[4]), &[0.5, 0.6, 0.0, 0.0]).is_err());
    }

    #[test]
    fn soft_target_examples() {
        let t = softmax(&[0.1, 0.7, 6.0, 0.3]);
        let oracle = 6f64.exp() / (0.1f64.exp() + 0.7f64.exp() + 6f64.exp() + 0.3f64.exp());
        assert!((t[2] - oracle).abs() < 1e-15);
        assert!((t[2] - 0.9890444).abs() < 1e-7);
        let mut r = rng::seeded(1);
        assert!(make_soft_target(&mut r, &[1, 1], 10, 5.0, 10.0).is_err());
        assert!(make_soft_target(&mut r, &[], 10, 5.0, 10.0).is_err());
        for _ in 0..200 {
            let t = make_soft_target(&mut r, &[1, 3], 10, 5.0, 10.0).unwrap();
            assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(t[1] + t[3] > 0.9);
        }
    }

    #[test]
    fn tv_cases() {
        let c = Tensor::full(&[3, 8, 8], 0.4);
        assert!(tv_loss(&c).unwrap().item().abs() < 1e-6);
        // vertical step edge: 7 positions of magnitude 1, 42 flat ones
        let step: Vec<f64> = (0..64).map(|i| if i % 8 >= 4 { 1.0 } else { 0.0 }).collect();
        let v = tv_loss(&Tensor::new(vec![1, 8, 8], step).unwrap()).unwrap().item();
        let oracle = (7.0 * (1.0f64 + 1e-12).sqrt() + 42.0 * 1e-6) / 64.0;
        assert!((v - oracle).abs() < 1e-15, "{v} vs {oracle}");
        assert!((v - 7.0 / 64.0).abs() < 1e-6);
        let mut r = rng::seeded(2);
        let x: Vec<f64> = (0..3 * 64).map(|_| r.random_range(-1.0..1.0)).collect();
        let a = tv_loss(&Tensor::new(vec![3, 8, 8], x.clone()).unwrap()).unwrap().item();
        let b = tv_loss(&Tensor::new(vec![3, 8, 8], x.iter().map(|v| 2.0 * v).collect()).unwrap()).unwrap().item();
        assert!((b / a - 2.0).abs() < 1e-9);
        assert!(tv_loss(&Tensor::zeros(&[3, 1, 8])).is_err());
    }

    #[test]
    fn apa_head_cases() {
        let prior = AttentionPrior { side: 2, x: 0.2, values: vec![0.1, 0.2, 0.3, 0.2] };
        let a = Tensor::new(vec![4], prior.values.clone()).unwrap();
        assert_eq!(apa_head_loss(&a, &prior).unwrap().item(), 0.0);
        let a = a.offset(0.05).unwrap();
        assert!((apa_head_loss(&a, &prior).unwrap().item() - 0.0025).abs() < 1e-15);
        assert!(apa_head_loss(&Tensor::zeros(&[3]), &prior).is_err());
    }

    #[test]
    fn apa_depth_weights() {
        // priors offset by exactly 1 from the attention rows: every head loss is 1
        let cfg = ViTConfig { image_size: 8, embed_dim: 8, num_heads: 4, num_blocks: 4, ..ViTConfig::default() };
        let m = ViTModel::init(cfg, 1).unwrap();
        let img = Tensor::new(vec![1, 3, 8, 8], vec![0.3; 192]).unwrap();
        let trace = m.forward_batch(&img, true).unwrap();
        let mut set = PriorSet::new();
        for l in 2..=4 {
            for h in 1..=4 {
                let row = crate::vit::extract_cls_attention(&trace, 0, l - 1, h - 1).unwrap();
                let values = row.data().iter().map(|v| v + 1.0).collect();
                set.insert((l, h), AttentionPrior { side: 2, x: 0.0, values });
            }
        }
        let v = apa_loss(&trace, 0, &set, 2).unwrap().item();
        assert!((v - 9.0).abs() < 1e-12, "{v}");
        for p in set.values_mut() {
            for x in &mut p.values {
                *x -= 1.0;
            }
        }
        assert!(apa_loss(&trace, 0, &set, 2).unwrap().item() < 1e-30);
        set.remove(&(3, 2));
        assert!(apa_loss(&trace, 0, &set, 2).is_err());
        let pc = PriorConfig { grid: 2, num_blocks: 4, num_heads: 4, k_apa: 5 };
        let full = generate_priors_for_item(&mut rng::seeded(0), &pc).unwrap();
        assert!(apa_loss(&trace, 0, &full, 2).unwrap().item() >= 0.0);
    }
}
