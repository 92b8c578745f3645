//! Random attention priors: max-composed 2-D Gaussians on the token grid.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Axis-aligned Gaussian on the grid. `mean` is `(row, col)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub mean: [f64; 2],
    /// Diagonal of the covariance, `(row, col)`.
    pub var: [f64; 2],
}

impl GaussianSpec {
    /// Unnormalized density `exp(-0.5 d^T S^-1 d)`.
    pub fn density(&self, row: f64, col: f64) -> f64 {
        let dr = row - self.mean[0];
        let dc = col - self.mean[1];
        (-0.5 * (dr * dr / self.var[0] + dc * dc / self.var[1])).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionPrior {
    pub side: usize,
    /// Share of attention the classification token keeps for itself.
    pub x: f64,
    /// Row-major normalized grid, sums to `1 - x`.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    /// Grid side (square root of the patch-token count).
    pub grid: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    /// Maximum Gaussians per prior.
    pub k_apa: usize,
}

impl PriorConfig {
    /// First block (1-indexed) that receives priors: `max(L / 2, 1)`.
    pub fn first_block(&self) -> usize {
        (self.num_blocks / 2).max(1)
    }
}

/// `k ~ U{1..k_apa}` Gaussians with means uniform on `[0, G-1]^2` and
/// variances uniform on `[(G/8)^2, (G/2)^2]`.
pub fn sample_gaussians(r: &mut rng::Rng, k_apa: usize, grid: usize) -> Vec<GaussianSpec> {
    let k = r.random_range(1..=k_apa.max(1));
    let g = grid as f64;
    let hi = (g - 1.0).max(0.0);
    let (vlo, vhi) = ((g / 8.0).powi(2), (g / 2.0).powi(2));
    (0..k)
        .map(|_| GaussianSpec {
            mean: [r.random_range(0.0..=hi), r.random_range(0.0..=hi)],
            var: [r.random_range(vlo..=vhi), r.random_range(vlo..=vhi)],
        })
        .collect()
}

/// Pointwise max of the Gaussian densities on integer grid coordinates.
pub fn render_prior_grid(specs: &[GaussianSpec], grid: usize) -> Result<Vec<f64>> {
    if specs.is_empty() {
        return Err(Error::Invalid("prior needs at least one Gaussian".into()));
    }
    if let Some(s) = specs.iter().find(|s| !(s.var[0] > 0.0 && s.var[1] > 0.0)) {
        return Err(Error::Invalid(format!("covariance {:?} is not positive-definite", s.var)));
    }
    let mut out = Vec::with_capacity(grid * grid);
    for i in 0..grid {
        for j in 0..grid {
            let v = specs
                .iter()
                .map(|s| s.density(i as f64, j as f64))
                .fold(f64::NEG_INFINITY, f64::max);
            out.push(v);
        }
    }
    Ok(out)
}

/// Scales the grid to total `1 - x`.
pub fn normalize_and_flatten(grid: &[f64], side: usize, x: f64) -> Result<AttentionPrior> {
    if grid.len() != side * side {
        return Err(Error::shape("normalize_and_flatten", format!("{} values for side {side}", grid.len())));
    }
    if !(0.0..1.0).contains(&x) {
        return Err(Error::Invalid(format!("self share {x} outside [0, 1)")));
    }
    let total: f64 = grid.iter().sum();
    if !(total > 0.0) || grid.iter().any(|v| *v < 0.0) {
        return Err(Error::Invalid("prior grid has no positive mass".into()));
    }
    let k = (1.0 - x) / total;
    Ok(AttentionPrior {
        side,
        x,
        values: grid.iter().map(|v| v * k).collect(),
    })
}

/// One prior per `(block, head)`, blocks 1-indexed from `first_block()` to
/// `num_blocks`, heads 1-indexed.
pub type PriorSet = BTreeMap<(usize, usize), AttentionPrior>;

pub fn generate_priors_for_item(r: &mut rng::Rng, cfg: &PriorConfig) -> Result<PriorSet> {
    let mut out = BTreeMap::new();
    for l in cfg.first_block()..=cfg.num_blocks {
        for h in 1..=cfg.num_heads {
            let specs = sample_gaussians(r, cfg.k_apa, cfg.grid);
            let x = r.random_range(0.0..1.0);
            let grid = render_prior_grid(&specs, cfg.grid)?;
            out.insert((l, h), normalize_and_flatten(&grid, cfg.grid, x)?);
        }
    }
    Ok(out)
}

impl AttentionPrior {
    /// 8-bit max-scaled grayscale rendering, row-major.
    pub fn to_gray(&self) -> Vec<u8> {
        let max = self.values.iter().copied().fold(0.0, f64::max);
        self.values
            .iter()
            .map(|v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 })
            .collect()
    }
}
