//! Uniform (linear) and log2 fake quantization, min-max calibration and the
//! quantized model wrapper.
//!
//! Quantizers run as fused graph primitives: the forward pass applies the
//! quantize/dequantize round trip exactly, the backward pass is the clipped
//! straight-through estimator (identity where the unrounded code lies inside
//! the integer range, zero elsewhere).

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::eval::Classifier;
use crate::tensor::{CustomOp, Primitive, Tensor};
use crate::vit::{forward, ForwardTrace, Layer, Site, SiteHook, ViTModel};

/// Scales below this are treated as degenerate and floored.
pub const MIN_SCALE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Linear,
    Log2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    /// One scale per index of the last axis (output channel of a `[in, out]` weight).
    PerChannel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scheme: Scheme,
    pub granularity: Granularity,
    pub bits: u32,
    pub scale: Vec<f64>,
    /// Empty for log2.
    pub zero_point: Vec<i64>,
}

pub fn qmax(bits: u32) -> f64 {
    ((1u64 << bits) - 1) as f64
}

fn check_bits(bits: u32) -> Result<()> {
    if !(2..=8).contains(&bits) {
        return Err(Error::Quant(format!("bit-width {bits} outside 2..=8")));
    }
    Ok(())
}

/// Linear quantize-dequantize of one value.
pub fn fake_quant_linear(x: f64, scale: f64, zero: i64, bits: u32) -> f64 {
    let q = ((x / scale).round() + zero as f64).clamp(0.0, qmax(bits));
    scale * (q - zero as f64)
}

/// Log2 quantize-dequantize of one non-negative value. Zeros are first
/// clamped to the smallest representable level.
pub fn fake_quant_log2(x: f64, scale: f64, bits: u32) -> f64 {
    let top = qmax(bits);
    let x = if x <= 0.0 { scale * (-top).exp2() } else { x };
    let q = (-(x / scale).log2()).round().clamp(0.0, top);
    scale * (-q).exp2()
}

impl QuantParams {
    pub fn linear(granularity: Granularity, bits: u32, scale: Vec<f64>, zero_point: Vec<i64>) -> Result<Self> {
        let p = Self { scheme: Scheme::Linear, granularity, bits, scale, zero_point };
        p.validate()?;
        Ok(p)
    }

    pub fn log2(bits: u32, scale: f64) -> Result<Self> {
        let p = Self {
            scheme: Scheme::Log2,
            granularity: Granularity::PerTensor,
            bits,
            scale: vec![scale],
            zero_point: vec![],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if self.scale.is_empty() {
            return Err(Error::Quant("no scales".into()));
        }
        if let Some(s) = self.scale.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Quant(format!("scale {s} is not positive")));
        }
        if self.granularity == Granularity::PerTensor && self.scale.len() != 1 {
            return Err(Error::Quant("per-tensor quantizer with several scales".into()));
        }
        match self.scheme {
            Scheme::Linear => {
                if self.zero_point.len() != self.scale.len() {
                    return Err(Error::Quant(format!(
                        "{} scales but {} zero points",
                        self.scale.len(),
                        self.zero_point.len()
                    )));
                }
                let top = qmax(self.bits) as i64;
                if let Some(z) = self.zero_point.iter().find(|z| !(0..=top).contains(*z)) {
                    return Err(Error::Quant(format!("zero point {z} outside [0, {top}]")));
                }
            }
            Scheme::Log2 => {
                if self.granularity != Granularity::PerTensor || !self.zero_point.is_empty() {
                    return Err(Error::Quant("log2 quantizers are per-tensor without zero point".into()));
                }
            }
        }
        Ok(())
    }

    fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Channel of flat element `i` for a tensor whose last axis has `c` entries.
    fn channel(&self, i: usize) -> usize {
        match self.granularity {
            Granularity::PerTensor => 0,
            Granularity::PerChannel => i % self.channels(),
        }
    }

    /// Fake-quantized value and whether the gradient passes.
    fn apply_one(&self, i: usize, x: f64) -> (f64, bool) {
        let c = self.channel(i);
        let s = self.scale[c];
        let top = qmax(self.bits);
        match self.scheme {
            Scheme::Linear => {
                let z = self.zero_point[c];
                let raw = (x / s).round() + z as f64;
                (fake_quant_linear(x, s, z, self.bits), (0.0..=top).contains(&raw))
            }
            Scheme::Log2 => {
                let xc = if x <= 0.0 { s * (-top).exp2() } else { x };
                let raw = (-(xc / s).log2()).round();
                (fake_quant_log2(x, s, self.bits), (0.0..=top).contains(&raw))
            }
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if self.granularity == Granularity::PerChannel {
            let last = x.shape().last().copied().unwrap_or(1);
            if last != self.channels() {
                return Err(Error::shape(
                    "fake_quant",
                    format!("{} channel scales for last axis {last}", self.channels()),
                ));
            }
        }
        if self.scheme == Scheme::Log2 {
            if let Some(v) = x.data().iter().find(|v| **v < 0.0) {
                return Err(Error::Quant(format!("log2 quantizer got negative input {v}")));
            }
        }
        Ok(())
    }

    /// Integer codes (not dequantized), mainly for inspection and tests.
    pub fn codes(&self, x: &[f64]) -> Vec<i64> {
        let top = qmax(self.bits);
        x.iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = self.channel(i);
                let s = self.scale[c];
                match self.scheme {
                    Scheme::Linear => ((v / s).round() + self.zero_point[c] as f64).clamp(0.0, top) as i64,
                    Scheme::Log2 => {
                        let v = if v <= 0.0 { s * (-top).exp2() } else { v };
                        (-(v / s).log2()).round().clamp(0.0, top) as i64
                    }
                }
            })
            .collect()
    }
}

#[derive(Debug)]
struct FakeQuantOp(QuantParams);

impl CustomOp for FakeQuantOp {
    fn name(&self) -> &'static str {
        match self.0.scheme {
            Scheme::Linear => "fake_quant_linear",
            Scheme::Log2 => "fake_quant_log2",
        }
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Vec<usize>, Vec<f64>)> {
        let x = inputs[0];
        self.0.check_input(x)?;
        let data = x.data().iter().enumerate().map(|(i, &v)| self.0.apply_one(i, v).0).collect();
        Ok((x.shape().to_vec(), data))
    }

    fn vjp(&self, inputs: &[Tensor], _output: &[f64], g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let gx = inputs[0]
            .data()
            .iter()
            .zip(g)
            .enumerate()
            .map(|(i, (&v, &gi))| if self.0.apply_one(i, v).1 { gi } else { 0.0 })
            .collect();
        Ok(vec![Some(gx)])
    }
}

/// Applies `params` to `x` as a differentiable graph node.
pub fn fake_quant(x: &Tensor, params: &QuantParams) -> Result<Tensor> {
    params.validate()?;
    Tensor::apply(Primitive::Custom(Rc::new(FakeQuantOp(params.clone()))), &[x])
}

/// Running min/max, per tensor or per last-axis channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Observer {
    pub granularity: Granularity,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Observer {
    pub fn new(granularity: Granularity) -> Self {
        Self { granularity, min: vec![], max: vec![] }
    }

    pub fn observe(&mut self, x: &Tensor) -> Result<()> {
        let c = match self.granularity {
            Granularity::PerTensor => 1,
            Granularity::PerChannel => x.shape().last().copied().unwrap_or(1),
        };
        if self.min.is_empty() {
            self.min = vec![f64::INFINITY; c];
            self.max = vec![f64::NEG_INFINITY; c];
        } else if self.min.len() != c {
            return Err(Error::shape("observe", format!("{} channels, then {c}", self.min.len())));
        }
        for (i, &v) in x.data().iter().enumerate() {
            let ch = i % c;
            self.min[ch] = self.min[ch].min(v);
            self.max[ch] = self.max[ch].max(v);
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.min.is_empty()
    }

    /// Min-max quantizer parameters. Degenerate ranges get the floor scale.
    pub fn params(&self, scheme: Scheme, bits: u32) -> Result<QuantParams> {
        check_bits(bits)?;
        if self.is_empty() {
            return Err(Error::Quant("observer saw no data".into()));
        }
        match scheme {
            Scheme::Linear => {
                let top = qmax(bits);
                let mut scale = Vec::with_capacity(self.min.len());
                let mut zero = Vec::with_capacity(self.min.len());
                for (&lo, &hi) in self.min.iter().zip(&self.max) {
                    let mut s = (hi - lo) / top;
                    if !(s >= MIN_SCALE) {
                        warn!("degenerate range [{lo}, {hi}], scale floored to {MIN_SCALE}");
                        s = MIN_SCALE;
                    }
                    scale.push(s);
                    zero.push((-lo / s).round().clamp(0.0, top) as i64);
                }
                QuantParams::linear(self.granularity, bits, scale, zero)
            }
            Scheme::Log2 => {
                if self.granularity != Granularity::PerTensor {
                    return Err(Error::Quant("log2 calibration is per-tensor".into()));
                }
                let mut s = self.max[0];
                if !(s >= MIN_SCALE) {
                    warn!("degenerate log2 range (max {s}), scale floored to {MIN_SCALE}");
                    s = MIN_SCALE;
                }
                QuantParams::log2(bits, s)
            }
        }
    }
}

/// One-shot min-max calibration over `samples`.
pub fn calibrate(samples: &[&Tensor], bits: u32, scheme: Scheme, granularity: Granularity) -> Result<QuantParams> {
    let mut obs = Observer::new(granularity);
    for s in samples {
        obs.observe(s)?;
    }
    obs.params(scheme, bits)
}

/// Scheme and granularity used at a site.
pub fn site_policy(site: Site) -> (Scheme, Granularity) {
    match site {
        Site::Weight(_) => (Scheme::Linear, Granularity::PerChannel),
        Site::AttnProb(_) => (Scheme::Log2, Granularity::PerTensor),
        _ => (Scheme::Linear, Granularity::PerTensor),
    }
}

/// Records ranges at every site while passing tensors through unchanged.
#[derive(Debug, Default)]
pub struct RangeRecorder {
    pub observers: RefCell<BTreeMap<Site, Observer>>,
}

impl SiteHook for RangeRecorder {
    fn apply(&self, site: Site, x: &Tensor) -> Result<Tensor> {
        let mut obs = self.observers.borrow_mut();
        obs.entry(site)
            .or_insert_with(|| Observer::new(site_policy(site).1))
            .observe(x)?;
        Ok(x.clone())
    }
}

/// Fake-quantizes every site with its stored parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteQuantizers(pub BTreeMap<Site, QuantParams>);

impl SiteHook for SiteQuantizers {
    fn apply(&self, site: Site, x: &Tensor) -> Result<Tensor> {
        let p = self
            .0
            .get(&site)
            .ok_or_else(|| Error::Quant(format!("no quantizer for site {site}")))?;
        fake_quant(x, p)
    }
}

/// A model whose weights and activations are fake-quantized.
///
/// `model` holds the latent (unquantized) weights; weight quantizers are
/// applied during every forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub model: ViTModel,
    pub wbits: u32,
    pub abits: u32,
    pub sites: SiteQuantizers,
}

/// Calibrates every site of `model` on `calib_images` `[B, 3, S, S]`.
pub fn attach_quantizers(model: &ViTModel, wbits: u32, abits: u32, calib_images: &Tensor) -> Result<QuantizedModel> {
    attach_quantizers_with(model, wbits, abits, None, calib_images)
}

/// Like [`attach_quantizers`], but the image entering the patch embedding
/// uses `image_bits` when given instead of `abits`.
pub fn attach_quantizers_with(
    model: &ViTModel,
    wbits: u32,
    abits: u32,
    image_bits: Option<u32>,
    calib_images: &Tensor,
) -> Result<QuantizedModel> {
    check_bits(wbits)?;
    check_bits(abits)?;
    if let Some(b) = image_bits {
        check_bits(b)?;
    }
    if calib_images.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::Quant("empty calibration set".into()));
    }
    let rec = RangeRecorder::default();
    forward(&model.bind_frozen()?, &model.config, calib_images, &rec, false)?;
    let observers = rec.observers.into_inner();
    let mut sites = BTreeMap::new();
    for site in Site::catalog(model.config.num_blocks) {
        let obs = observers
            .get(&site)
            .ok_or_else(|| Error::Quant(format!("calibration never reached site {site}")))?;
        let bits = match site {
            s if s.is_weight() => wbits,
            Site::Input(Layer::PatchEmbed) => image_bits.unwrap_or(abits),
            _ => abits,
        };
        sites.insert(site, obs.params(site_policy(site).0, bits)?);
    }
    Ok(QuantizedModel { model: model.clone(), wbits, abits, sites: SiteQuantizers(sites) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SiteEntry {
    site: String,
    #[serde(flatten)]
    params: QuantParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct QuantSection {
    wbits: u32,
    abits: u32,
    sites: Vec<SiteEntry>,
}

impl QuantizedModel {
    pub fn forward(&self, images: &Tensor, trace: bool) -> Result<ForwardTrace> {
        forward(&self.model.bind_frozen()?, &self.model.config, images, &self.sites, trace)
    }

    /// Checkpoint quant section.
    pub fn quant_section(&self) -> Result<serde_json::Value> {
        let section = QuantSection {
            wbits: self.wbits,
            abits: self.abits,
            sites: self
                .sites
                .0
                .iter()
                .map(|(s, p)| SiteEntry { site: s.to_string(), params: p.clone() })
                .collect(),
        };
        Ok(serde_json::to_value(section)?)
    }

    pub fn from_section(model: ViTModel, section: &serde_json::Value) -> Result<Self> {
        let sec: QuantSection = serde_json::from_value(section.clone())?;
        let by_name: BTreeMap<String, Site> = Site::catalog(model.config.num_blocks)
            .into_iter()
            .map(|s| (s.to_string(), s))
            .collect();
        let mut sites = BTreeMap::new();
        for e in sec.sites {
            let site = *by_name
                .get(&e.site)
                .ok_or_else(|| Error::Quant(format!("unknown site {}", e.site)))?;
            e.params.validate()?;
            sites.insert(site, e.params);
        }
        if sites.len() != by_name.len() {
            return Err(Error::Quant(format!("{} of {} sites quantized", sites.len(), by_name.len())));
        }
        Ok(Self { model, wbits: sec.wbits, abits: sec.abits, sites: SiteQuantizers(sites) })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let bytes = crate::vit::write_checkpoint(&self.model, Some(self.quant_section()?))?;
        std::fs::write(path, bytes)?;
        Ok(())
    }
}

impl Classifier for QuantizedModel {
    fn logits(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.forward(images, false)?.logits)
    }
}

/// Either kind of checkpoint.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Full(ViTModel),
    Quantized(QuantizedModel),
}

impl AnyModel {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let c = crate::vit::read_checkpoint(&std::fs::read(path)?, path)?;
        Ok(match c.quant {
            None => AnyModel::Full(c.model),
            Some(q) => AnyModel::Quantized(QuantizedModel::from_section(c.model, &q)?),
        })
    }

    pub fn base(&self) -> &ViTModel {
        match self {
            AnyModel::Full(m) => m,
            AnyModel::Quantized(q) => &q.model,
        }
    }
}

impl Classifier for AnyModel {
    fn logits(&self, images: &Tensor) -> Result<Tensor> {
        match self {
            AnyModel::Full(m) => m.logits(images),
            AnyModel::Quantized(q) => q.logits(images),
        }
    }
}

impl fmt::Display for QuantParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}/{:?} b={} ({} scales)", self.scheme, self.granularity, self.bits, self.scale.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::ViTConfig;
    use proptest::prelude::*;

    #[test]
    fn linear_known_values() {
        // scale 0.5, zero 2, 3 bits: codes 0..7 map to -1.0..2.5
        let p = QuantParams::linear(Granularity::PerTensor, 3, vec![0.5], vec![2]).unwrap();
        let x = Tensor::new(vec![6], vec![-5.0, -1.0, 0.26, 0.75, 2.5, 9.0]).unwrap();
        let y = fake_quant(&x, &p).unwrap();
        assert_eq!(y.data(), &[-1.0, -1.0, 0.5, 1.0, 2.5, 2.5]);
        assert_eq!(p.codes(x.data()), vec![0, 0, 3, 4, 7, 7]);
    }

    #[test]
    fn log2_known_values() {
        let p = QuantParams::log2(2, 1.0).unwrap();
        let x = Tensor::new(vec![5], vec![0.0, 0.1, 0.3, 0.5, 1.0]).unwrap();
        let y = fake_quant(&x, &p).unwrap();
        assert_eq!(y.data(), &[0.125, 0.125, 0.25, 0.5, 1.0]);
        assert!(fake_quant(&Tensor::new(vec![1], vec![-0.1]).unwrap(), &p).is_err());
    }

    #[test]
    fn clipped_ste_gradient() {
        let p = QuantParams::linear(Granularity::PerTensor, 2, vec![1.0], vec![1]).unwrap();
        let x = Tensor::param(vec![4], vec![-3.0, -0.4, 1.2, 5.0]).unwrap();
        fake_quant(&x, &p).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 1.0, 0.0]);

        let p = QuantParams::log2(3, 1.0).unwrap();
        let x = Tensor::param(vec![3], vec![4.0, 0.3, 1e-9]).unwrap();
        fake_quant(&x, &p).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn per_channel_uses_last_axis() {
        let p = QuantParams::linear(Granularity::PerChannel, 8, vec![1.0, 0.1], vec![0, 0]).unwrap();
        let x = Tensor::new(vec![2, 2], vec![1.26, 1.26, 2.0, 0.04]).unwrap();
        let y = fake_quant(&x, &p).unwrap();
        assert_eq!(y.data()[0], 1.0);
        assert!((y.data()[1] - 1.3).abs() < 1e-12);
        assert!(fake_quant(&Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap(), &p).is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(QuantParams::linear(Granularity::PerTensor, 1, vec![1.0], vec![0]).is_err());
        assert!(QuantParams::linear(Granularity::PerTensor, 9, vec![1.0], vec![0]).is_err());
        assert!(QuantParams::linear(Granularity::PerTensor, 4, vec![0.0], vec![0]).is_err());
        assert!(QuantParams::linear(Granularity::PerTensor, 4, vec![1.0], vec![16]).is_err());
        assert!(QuantParams::linear(Granularity::PerTensor, 4, vec![1.0, 1.0], vec![0, 0]).is_err());
        assert!(QuantParams::log2(4, -1.0).is_err());
    }

    #[test]
    fn min_max_calibration() {
        let x = Tensor::new(vec![4], vec![-1.0, 0.0, 0.5, 2.0]).unwrap();
        let p = calibrate(&[&x], 4, Scheme::Linear, Granularity::PerTensor).unwrap();
        assert!((p.scale[0] - 0.2).abs() < 1e-15);
        assert_eq!(p.zero_point, vec![5]);
        let p = calibrate(&[&x.clip(0.0, 9.0).unwrap()], 4, Scheme::Log2, Granularity::PerTensor).unwrap();
        assert_eq!(p.scale, vec![2.0]);
        // constant input: floored scale, still valid
        let c = Tensor::full(&[3], 0.7);
        let p = calibrate(&[&c], 4, Scheme::Linear, Granularity::PerTensor).unwrap();
        assert_eq!(p.scale, vec![MIN_SCALE]);
        assert!(fake_quant(&c, &p).unwrap().data().iter().all(|v| v.is_finite()));
    }

    fn small_model() -> ViTModel {
        let cfg = ViTConfig { image_size: 8, embed_dim: 8, num_heads: 2, num_blocks: 2, ..ViTConfig::default() };
        ViTModel::init(cfg, 5).unwrap()
    }

    #[test]
    fn attach_covers_catalog_and_round_trips() {
        let m = small_model();
        let imgs = Tensor::new(vec![2, 3, 8, 8], (0..384).map(|i| ((i * 37) % 17) as f64 / 8.0 - 1.0).collect())
            .unwrap();
        let q = attach_quantizers(&m, 8, 8, &imgs).unwrap();
        assert_eq!(q.sites.0.len(), Site::catalog(2).len());
        assert_eq!(q.sites.0[&Site::AttnProb(1)].scheme, Scheme::Log2);
        let fp = m.forward_batch(&imgs, false).unwrap().logits;
        let ql = q.forward(&imgs, false).unwrap().logits;
        let gap = fp.data().iter().zip(ql.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 0.05, "{gap}");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.ckpt");
        q.save(&path).unwrap();
        match AnyModel::load(&path).unwrap() {
            AnyModel::Quantized(back) => assert_eq!(back, q),
            AnyModel::Full(_) => panic!("lost quant section"),
        }
        assert!(attach_quantizers(&m, 1, 8, &imgs).is_err());
    }

    #[test]
    fn image_site_bits_override() {
        let m = small_model();
        let imgs = Tensor::new(vec![2, 3, 8, 8], (0..384).map(|i| ((i * 37) % 17) as f64 / 8.0 - 1.0).collect())
            .unwrap();
        let q = attach_quantizers_with(&m, 4, 4, Some(8), &imgs).unwrap();
        let image = Site::Input(Layer::PatchEmbed);
        for (site, p) in &q.sites.0 {
            let want = if *site == image { 8 } else { 4 };
            assert_eq!(p.bits, want, "{site}");
        }
        let plain = attach_quantizers(&m, 4, 4, &imgs).unwrap();
        assert_eq!(plain.sites.0[&image].bits, 4);
        assert!(attach_quantizers_with(&m, 4, 4, Some(9), &imgs).is_err());
    }

    proptest! {
        #[test]
        fn linear_idempotent_and_bounded(x in -50.0f64..50.0, lo in -10.0f64..0.0, span in 0.01f64..20.0, bits in 2u32..=8) {
            let obs = Tensor::new(vec![2], vec![lo, lo + span]).unwrap();
            let p = calibrate(&[&obs], bits, Scheme::Linear, Granularity::PerTensor).unwrap();
            let (s, z) = (p.scale[0], p.zero_point[0]);
            let y = fake_quant_linear(x, s, z, bits);
            prop_assert_eq!(fake_quant_linear(y, s, z, bits), y);
            let k = y / s + z as f64;
            prop_assert!((k - k.round()).abs() < 1e-6);
            let inside = (s * (0.0 - z as f64)..=s * (qmax(bits) - z as f64)).contains(&x);
            if inside {
                prop_assert!((y - x).abs() <= s / 2.0 * (1.0 + 1e-9));
            }
        }

        #[test]
        fn log2_idempotent_on_powers(x in 0.0f64..4.0, scale in 0.1f64..4.0, bits in 2u32..=8) {
            let y = fake_quant_log2(x, scale, bits);
            prop_assert_eq!(fake_quant_log2(y, scale, bits), y);
            let e = -(y / scale).log2();
            prop_assert!((e - e.round()).abs() < 1e-9 && e >= -1e-9 && e <= qmax(bits) + 1e-9);
        }
    }
}
