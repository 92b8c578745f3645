//! Per-class cosine similarity of penultimate features between a synthetic
//! set and real images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::ViTModel;

const FEATURE_BATCH: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSimilarity {
    pub class: usize,
    /// Mean cosine over (synthetic, real) pairs of this class; `None` when
    /// the synthetic set has no item of the class.
    pub synthetic: Option<f64>,
    /// Mean cosine over all (real, real) pairs of this class.
    pub intra_real: f64,
}

/// Penultimate features `[B, D]` for standardized images.
pub fn features(model: &ViTModel, images: &Tensor) -> Result<Vec<Vec<f64>>> {
    let b = images.shape()[0];
    let stride = images.numel() / b.max(1);
    let mut out = Vec::with_capacity(b);
    for start in (0..b).step_by(FEATURE_BATCH) {
        let n = FEATURE_BATCH.min(b - start);
        let mut shape = images.shape().to_vec();
        shape[0] = n;
        let chunk = Tensor::new(shape, images.data()[start * stride..(start + n) * stride].to_vec())?;
        let f = model.forward_batch(&chunk, false)?.feature;
        let d = f.shape()[1];
        out.extend(f.data().chunks(d).map(<[f64]>::to_vec));
    }
    Ok(out)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Mean cosine over the full cross product of `a` and `b`.
pub fn mean_cross_cosine(a: &[&[f64]], b: &[&[f64]]) -> f64 {
    let mut sum = 0.0;
    for x in a {
        for y in b {
            sum += cosine(x, y);
        }
    }
    sum / (a.len() * b.len()) as f64
}

fn by_class<'a>(feats: &'a [Vec<f64>], labels: &[usize], class: usize) -> Vec<&'a [f64]> {
    feats.iter().zip(labels).filter(|(_, &l)| l == class).map(|(f, _)| f.as_slice()).collect()
}

/// Table over every class; classes missing from the synthetic set get `None`.
/// Real classes must all be present.
pub fn class_similarity(
    model: &ViTModel,
    synthetic: &Tensor,
    synthetic_labels: &[usize],
    real: &Tensor,
    real_labels: &[usize],
) -> Result<Vec<ClassSimilarity>> {
    if synthetic.shape()[0] != synthetic_labels.len() || real.shape()[0] != real_labels.len() {
        return Err(Error::Invalid("feature similarity: image and label counts differ".into()));
    }
    let fs = features(model, synthetic)?;
    let fr = features(model, real)?;
    let mut table = Vec::with_capacity(model.config.num_classes);
    for class in 0..model.config.num_classes {
        let r = by_class(&fr, real_labels, class);
        if r.is_empty() {
            return Err(Error::Invalid(format!("feature similarity: no real images of class {class}")));
        }
        let s = by_class(&fs, synthetic_labels, class);
        table.push(ClassSimilarity {
            class,
            synthetic: (!s.is_empty()).then(|| mean_cross_cosine(&s, &r)),
            intra_real: mean_cross_cosine(&r, &r),
        });
    }
    Ok(table)
}

/// Like [`class_similarity`] but every class must be present in both sets.
pub fn feature_similarity_report(
    model: &ViTModel,
    synthetic: &Tensor,
    synthetic_labels: &[usize],
    real: &Tensor,
    real_labels: &[usize],
) -> Result<Vec<ClassSimilarity>> {
    let table = class_similarity(model, synthetic, synthetic_labels, real, real_labels)?;
    if let Some(c) = table.iter().find(|c| c.synthetic.is_none()) {
        return Err(Error::Invalid(format!("feature similarity: no synthetic images of class {}", c.class)));
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::gen_toy_dataset;
    use crate::vit::ViTConfig;

    #[test]
    fn cosine_oracles() {
        assert!((cosine(&[1.0, 0.0], &[0.0, 2.0])).abs() < 1e-15);
        assert!((cosine(&[1.0, 1.0], &[2.0, 2.0]) - 1.0).abs() < 1e-15);
        assert!((cosine(&[1.0, 0.0], &[-3.0, 0.0]) + 1.0).abs() < 1e-15);
        let a: [&[f64]; 2] = [&[1.0, 0.0], &[0.0, 1.0]];
        assert!((mean_cross_cosine(&a, &a) - 0.5).abs() < 1e-15);
    }

    fn setup() -> (ViTModel, Tensor, Vec<usize>) {
        let cfg = ViTConfig { num_blocks: 1, embed_dim: 16, num_heads: 2, ..ViTConfig::default() };
        let m = ViTModel::init(cfg, 1).unwrap();
        let (d, _) = gen_toy_dataset(5, 30, 10).unwrap();
        let idx: Vec<usize> = (0..d.len()).collect();
        (m, d.batch(&idx).unwrap(), d.labels.clone())
    }

    #[test]
    fn identical_sets_match_intra_real() {
        let (m, x, y) = setup();
        let t = feature_similarity_report(&m, &x, &y, &x, &y).unwrap();
        assert_eq!(t.len(), 10);
        for c in &t {
            assert_eq!(c.synthetic, Some(c.intra_real));
        }
    }

    #[test]
    fn missing_class() {
        let (m, x, y) = setup();
        let keep: Vec<usize> = (0..y.len()).filter(|&i| y[i] != 3).collect();
        let stride = x.numel() / y.len();
        let mut data = Vec::new();
        for &i in &keep {
            data.extend_from_slice(&x.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = keep.len();
        let xs = Tensor::new(shape, data).unwrap();
        let ys: Vec<usize> = keep.iter().map(|&i| y[i]).collect();
        let t = class_similarity(&m, &xs, &ys, &x, &y).unwrap();
        assert!(t[3].synthetic.is_none());
        assert!(t[2].synthetic.is_some());
        assert!(feature_similarity_report(&m, &xs, &ys, &x, &y).is_err());
        // real side must be complete
        assert!(class_similarity(&m, &x, &y, &xs, &ys).is_err());
    }
}
