//! Procedural ten-class shape dataset.
//!
//! Each class is a (shape, fill) pair: five outlines (circle, square,
//! triangle, cross, ring) times two fills (solid, striped). Shapes are drawn
//! at random positions, scales, small rotations and colours (bright
//! foreground over a dark noisy background), with 4x4 supersampled
//! anti-aliasing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 10;
pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const PIXELS: usize = CHANNELS * IMAGE_SIZE * IMAGE_SIZE;

/// Channel mean and std of the fixed input standardization.
pub const NORM_MEAN: f64 = 0.5;
pub const NORM_STD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
}

impl Shape {
    const ALL: [Shape; 5] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross, Shape::Ring];

    /// Membership in local coordinates scaled so the shape spans about [-1, 1].
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Circle => u * u + v * v <= 1.0,
            Shape::Square => u.abs() <= 0.82 && v.abs() <= 0.82,
            Shape::Triangle => {
                // apex up (image y grows downwards)
                let (ax, ay, bx, by, cx, cy) = (0.0, -1.0, -1.0, 0.8, 1.0, 0.8);
                let s1 = (bx - ax) * (v - ay) - (by - ay) * (u - ax);
                let s2 = (cx - bx) * (v - by) - (cy - by) * (u - bx);
                let s3 = (ax - cx) * (v - cy) - (ay - cy) * (u - cx);
                (s1 <= 0.0 && s2 <= 0.0 && s3 <= 0.0) || (s1 >= 0.0 && s2 >= 0.0 && s3 >= 0.0)
            }
            Shape::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            Shape::Ring => {
                let r2 = u * u + v * v;
                (0.55 * 0.55..=1.0).contains(&r2)
            }
        }
    }
}

/// Class index `shape * 2 + fill`, fill 0 = solid, 1 = striped.
pub fn class_parts(label: usize) -> (Shape, bool) {
    (Shape::ALL[label / 2], label % 2 == 1)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledImageSet {
    /// `[n, 3, 32, 32]` row-major 8-bit pixels.
    pub images: Vec<u8>,
    pub labels: Vec<usize>,
    pub split: Split,
    pub seed: u64,
}

impl LabeledImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * PIXELS..(i + 1) * PIXELS]
    }

    /// Standardized model input `[k, 3, 32, 32]` for the given indices.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * PIXELS);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index(format!("image {i} of {}", self.len())));
            }
            data.extend(self.image(i).iter().map(|&p| standardize(p)));
        }
        Tensor::new(vec![indices.len(), CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data)
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Subset by index, keeping split and seed.
    pub fn subset(&self, indices: &[usize]) -> LabeledImageSet {
        let mut images = Vec::with_capacity(indices.len() * PIXELS);
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        LabeledImageSet {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
            seed: self.seed,
        }
    }
}

pub fn standardize(p: u8) -> f64 {
    (p as f64 / 255.0 - NORM_MEAN) / NORM_STD
}

/// Renders one image of class `label` from its own random stream.
pub fn render(label: usize, rng: &mut rng::Rng) -> Vec<u8> {
    let (shape, striped) = class_parts(label);
    let size = IMAGE_SIZE as f64;
    // dark background, bright foreground: the silhouette is always visible
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..100.0));
    let noise_amp = rng.random_range(5.0..20.0);
    let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(155.0..255.0));
    let radius = rng.random_range(9.5..11.5);
    let cx = rng.random_range(size / 2.0 - 2.0..size / 2.0 + 2.0);
    let cy = rng.random_range(size / 2.0 - 2.0..size / 2.0 + 2.0);
    let theta: f64 = rng.random_range(-0.1..0.1);
    let (sin, cos) = theta.sin_cos();
    let stripe_period = rng.random_range(5.0..7.0);
    let stripe_phase = rng.random_range(0.0..stripe_period);

    let mut out = vec![0u8; PIXELS];
    const SS: usize = 4;
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let mut hits = 0usize;
            for sy in 0..SS {
                for sx in 0..SS {
                    let px = x as f64 + (sx as f64 + 0.5) / SS as f64 - cx;
                    let py = y as f64 + (sy as f64 + 0.5) / SS as f64 - cy;
                    let lx = cos * px + sin * py;
                    let ly = -sin * px + cos * py;
                    if !shape.contains(lx / radius, ly / radius) {
                        continue;
                    }
                    if striped && ((ly + radius + stripe_phase) / (stripe_period / 2.0)).floor() as i64 % 2 == 1 {
                        continue;
                    }
                    hits += 1;
                }
            }
            let cover = hits as f64 / (SS * SS) as f64;
            for c in 0..CHANNELS {
                let bg = base[c] + rng.random_range(-noise_amp..noise_amp);
                let v = bg * (1.0 - cover) + fg[c] * cover;
                out[(c * IMAGE_SIZE + y) * IMAGE_SIZE + x] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

fn generate_split(seed: u64, n: usize, split: Split) -> LabeledImageSet {
    let mut images = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % NUM_CLASSES;
        let mut r = rng::stream(seed, &[0xDA7A, split.tag(), i as u64]);
        images.extend(render(label, &mut r));
        labels.push(label);
    }
    LabeledImageSet { images, labels, split, seed }
}

/// Train and test sets. Labels cycle through the classes so counts stay
/// balanced within one.
pub fn gen_toy_dataset(seed: u64, n_train: usize, n_test: usize) -> Result<(LabeledImageSet, LabeledImageSet)> {
    if n_train < NUM_CLASSES || n_test < NUM_CLASSES {
        return Err(Error::Invalid(format!(
            "need at least {NUM_CLASSES} images per split, got {n_train}/{n_test}"
        )));
    }
    Ok((
        generate_split(seed, n_train, Split::Train),
        generate_split(seed, n_test, Split::Test),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let (a, b) = gen_toy_dataset(3, 53, 20).unwrap();
        let (a2, b2) = gen_toy_dataset(3, 53, 20).unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);
        let counts = a.class_counts();
        assert!(counts.iter().all(|&c| c == 5 || c == 6));
        assert!(counts.iter().all(|&c| c > 0));
        let (c, _) = gen_toy_dataset(4, 53, 20).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn too_small_rejected() {
        assert!(gen_toy_dataset(0, 5, 20).is_err());
    }

    #[test]
    fn batch_is_standardized() {
        let (a, _) = gen_toy_dataset(1, 10, 10).unwrap();
        let t = a.batch(&[0, 3]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 32, 32]);
        assert!(t.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        assert!(a.batch(&[10]).is_err());
    }

    #[test]
    fn render_is_a_pure_function_of_the_stream() {
        for label in 0..NUM_CLASSES {
            let a = render(label, &mut rng::seeded(label as u64));
            let b = render(label, &mut rng::seeded(label as u64));
            assert_eq!(a, b);
            assert_eq!(a.len(), PIXELS);
        }
    }

    #[test]
    fn class_parts_cover_grid() {
        assert_eq!(class_parts(0), (Shape::Circle, false));
        assert_eq!(class_parts(5), (Shape::Triangle, true));
        assert_eq!(class_parts(9), (Shape::Ring, true));
    }
}
