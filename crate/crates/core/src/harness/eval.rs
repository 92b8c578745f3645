use crate::error::{Error, Result};
use crate::harness::dataset::LabeledImageSet;
use crate::tensor::Tensor;
use crate::vit::ViTModel;

const EVAL_BATCH: usize = 100;

/// Anything that maps a standardized image batch to class logits.
pub trait Classifier {
    fn logits(&self, images: &Tensor) -> Result<Tensor>;
}

impl Classifier for ViTModel {
    fn logits(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.forward_batch(images, false)?.logits)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class per image.
pub fn predict(model: &dyn Classifier, data: &LabeledImageSet) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let logits = model.logits(&data.batch(chunk)?)?;
        let c = logits.shape()[1];
        preds.extend(logits.data().chunks(c).map(argmax));
    }
    Ok(preds)
}

/// Top-1 accuracy.
pub fn evaluate(model: &dyn Classifier, data: &LabeledImageSet) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Invalid("cannot evaluate on an empty dataset".into()));
    }
    let preds = predict(model, data)?;
    let correct = preds.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::{gen_toy_dataset, NUM_CLASSES};

    /// Returns one-hot logits looked up from the first pixel value, which the
    /// crafted dataset sets to the label.
    struct Oracle;
    impl Classifier for Oracle {
        fn logits(&self, images: &Tensor) -> Result<Tensor> {
            let b = images.shape()[0];
            let stride = images.numel() / b;
            let mut out = vec![0.0; b * NUM_CLASSES];
            for i in 0..b {
                let p = images.data()[i * stride];
                let label = ((p * 0.5 + 0.5) * 255.0).round() as usize;
                out[i * NUM_CLASSES + label] = 1.0;
            }
            Tensor::new(vec![b, NUM_CLASSES], out)
        }
    }

    struct Constant;
    impl Classifier for Constant {
        fn logits(&self, images: &Tensor) -> Result<Tensor> {
            Ok(Tensor::zeros(&[images.shape()[0], NUM_CLASSES]))
        }
    }

    fn crafted() -> LabeledImageSet {
        let (mut d, _) = gen_toy_dataset(0, 40, 10).unwrap();
        for i in 0..d.len() {
            d.images[i * crate::harness::dataset::PIXELS] = d.labels[i] as u8;
        }
        d
    }

    #[test]
    fn oracle_model_is_perfect() {
        assert_eq!(evaluate(&Oracle, &crafted()).unwrap(), 1.0);
    }

    #[test]
    fn constant_model_hits_class_zero_share() {
        let d = crafted();
        let share = d.labels.iter().filter(|&&l| l == 0).count() as f64 / d.len() as f64;
        assert_eq!(evaluate(&Constant, &d).unwrap(), share);
        assert_eq!(share, 0.1);
    }

    #[test]
    fn shuffling_does_not_change_accuracy() {
        let d = crafted();
        let mut order: Vec<usize> = (0..d.len()).collect();
        order.reverse();
        order.swap(3, 17);
        let shuffled = d.subset(&order);
        assert_eq!(evaluate(&Oracle, &d).unwrap(), evaluate(&Oracle, &shuffled).unwrap());
        assert_eq!(evaluate(&Constant, &d).unwrap(), evaluate(&Constant, &shuffled).unwrap());
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let d = crafted().subset(&[]);
        assert!(evaluate(&Constant, &d).is_err());
    }

    #[test]
    fn argmax_tie_break() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
