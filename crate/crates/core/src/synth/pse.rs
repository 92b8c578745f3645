//! Patch-similarity entropy baseline objective.
//!
//! Per block, token features of the attention output (classification token
//! dropped) give a cosine-similarity matrix. A Gaussian KDE with Silverman's
//! rule-of-thumb bandwidth is fit to (a strided subset of) its entries and
//! `integral f log f` is approximated by the plug-in mean of `log f` at the
//! samples.

use std::f64::consts::PI;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Primitive, Tensor};
use crate::vit::ForwardTrace;

/// Added to feature norms before dividing.
pub const NORM_EPS: f64 = 1e-12;
/// Added to the sample variance inside the bandwidth rule.
pub const VAR_EPS: f64 = 1e-12;

/// Plug-in negative entropy of each row of `[V, T]`, using every `stride`-th
/// column as the sample.
#[derive(Debug)]
struct KdePlugIn {
    stride: usize,
}

struct RowStats {
    h: f64,
    mean: f64,
    sigma: f64,
    /// Kernel weights `phi(u_mj) / sum_j phi(u_mj)`, row-major `M x M`.
    weights: Vec<f64>,
    /// `u_mj = (x_m - x_j) / h`.
    u: Vec<f64>,
    value: f64,
}

fn silverman(m: usize) -> f64 {
    1.06 * (m as f64).powf(-0.2)
}

fn row_stats(x: &[f64]) -> RowStats {
    let m = x.len();
    let mean = x.iter().sum::<f64>() / m as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m.max(2) - 1) as f64;
    let sigma = (var + VAR_EPS).sqrt();
    let h = silverman(m) * sigma;
    let mut u = vec![0.0; m * m];
    let mut weights = vec![0.0; m * m];
    let mut value = 0.0;
    let norm = (m as f64 * h * (2.0 * PI).sqrt()).ln();
    for i in 0..m {
        let mut s = 0.0;
        for j in 0..m {
            let uij = (x[i] - x[j]) / h;
            let k = (-0.5 * uij * uij).exp();
            u[i * m + j] = uij;
            weights[i * m + j] = k;
            s += k;
        }
        for w in &mut weights[i * m..(i + 1) * m] {
            *w /= s;
        }
        value += s.ln() - norm;
    }
    RowStats { h, mean, sigma, weights, u, value: value / m as f64 }
}

impl KdePlugIn {
    fn samples(&self, row: &[f64]) -> Vec<f64> {
        row.iter().step_by(self.stride).copied().collect()
    }
}

impl CustomOp for KdePlugIn {
    fn name(&self) -> &'static str {
        "kde_plug_in"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Vec<usize>, Vec<f64>)> {
        let x = inputs[0];
        let [v, t] = x.shape() else {
            return Err(Error::shape("kde_plug_in", format!("expected [V, T], got {:?}", x.shape())));
        };
        if t.div_ceil(self.stride) < 2 {
            return Err(Error::Invalid("KDE needs at least two samples".into()));
        }
        let out = x.data().chunks(*t).map(|row| row_stats(&self.samples(row)).value).collect();
        Ok((vec![*v], out))
    }

    fn vjp(&self, inputs: &[Tensor], _output: &[f64], g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let x = &inputs[0];
        let t = x.shape()[1];
        let mut grad = vec![0.0; x.numel()];
        for (r, row) in x.data().chunks(t).enumerate() {
            let xs = self.samples(row);
            let m = xs.len();
            let st = row_stats(&xs);
            let mf = m as f64;
            // direct term with h fixed, plus the dependence through h
            let mut gx = vec![0.0; m];
            let mut dh = 0.0;
            for i in 0..m {
                let mut acc = 0.0;
                let mut du2 = 0.0;
                for j in 0..m {
                    let w = st.weights[i * m + j];
                    let uij = st.u[i * m + j];
                    acc += w * uij;
                    gx[j] += w * uij / st.h / mf;
                    du2 += w * uij * uij;
                }
                gx[i] -= acc / st.h / mf;
                dh += (du2 - 1.0) / st.h / mf;
            }
            let scale = silverman(m) / ((mf - 1.0).max(1.0) * st.sigma);
            for (k, gk) in gx.iter_mut().enumerate() {
                *gk += dh * scale * (xs[k] - st.mean);
            }
            for (k, gk) in gx.into_iter().enumerate() {
                grad[r * t + k * self.stride] = g[r] * gk;
            }
        }
        Ok(vec![Some(grad)])
    }
}

/// Plug-in `integral f log f` of each row's strided samples, `[V]`.
pub fn kde_plug_in_rows(samples: &Tensor, stride: usize) -> Result<Tensor> {
    if stride == 0 {
        return Err(Error::Invalid("stride must be positive".into()));
    }
    Tensor::apply(Primitive::Custom(Rc::new(KdePlugIn { stride })), &[samples])
}

/// Cosine-similarity matrices of token features `[V, T, D]`, flattened to
/// `[V, T * T]`.
pub fn cosine_similarity_rows(features: &Tensor) -> Result<Tensor> {
    let [v, t, d] = *features.shape() else {
        return Err(Error::shape("cosine_similarity", format!("expected [V, T, D], got {:?}", features.shape())));
    };
    if t < 2 {
        return Err(Error::Invalid("need at least two tokens".into()));
    }
    let norms = features.mul(features)?.sum_axis(2)?.sqrt()?.offset(NORM_EPS)?.reshape(&[v, t, 1])?;
    let unit = features.div(&norms.broadcast(&[v, t, d])?)?;
    unit.matmul(&unit.transpose(&[0, 2, 1])?)?.reshape(&[v, t * t])
}

/// PSE loss per view summed over all blocks, `[V]`.
pub fn pse_rows(trace: &ForwardTrace, stride: usize) -> Result<Tensor> {
    if trace.blocks.is_empty() {
        return Err(Error::Invalid("PSE needs a traced forward pass".into()));
    }
    let mut total: Option<Tensor> = None;
    for b in &trace.blocks {
        let n = b.mhsa.shape()[1];
        let tokens = b.mhsa.slice(1, 1, n)?;
        let term = kde_plug_in_rows(&cosine_similarity_rows(&tokens)?, stride)?;
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term)?,
        });
    }
    Ok(total.expect("non-empty"))
}

/// PSE loss of a traced batch (summed over views).
pub fn pse_loss(trace: &ForwardTrace, stride: usize) -> Result<Tensor> {
    pse_rows(trace, stride)?.sum()
}
