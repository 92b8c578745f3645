//! End-to-end experiment: data, full-precision model, calibration sets,
//! PTQ at every bit-width, evaluation and reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::{Calibration, RunConfig};
use crate::harness::dataset::{gen_toy_dataset, LabeledImageSet, CHANNELS, NUM_CLASSES};
use crate::harness::eval::evaluate;
use crate::harness::io::{encode_f64, encode_image_set, encode_pgm, rescale_to_u8, sha256_hex, write_ppm_dir};
use crate::harness::similarity::{class_similarity, ClassSimilarity};
use crate::ptq::{run_ptq, PtqReport};
use crate::rng;
use crate::synth::{item_targets, synthesize_batch, Method, SynthesisManifest};
use crate::tensor::Tensor;
use crate::vit::{load_checkpoint, save_checkpoint, train_toy_model, TrainReport, ViTModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub wbits: u32,
    pub abits: u32,
    pub accuracy: f64,
    pub ptq: PtqReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub method: String,
    pub classes: Vec<ClassSimilarity>,
}

/// Everything a run produces except wall-clock timing, which goes to a
/// separate file so that reruns compare byte-for-byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub run_id: String,
    pub config: RunConfig,
    pub fp_accuracy: f64,
    pub train: Option<TrainReport>,
    pub results: Vec<ResultRow>,
    pub similarity: Vec<SimilarityRow>,
    pub artifacts: Vec<ArtifactRecord>,
}

impl ExperimentReport {
    pub fn accuracy(&self, method: Calibration, wbits: u32, abits: u32) -> Option<f64> {
        self.results
            .iter()
            .find(|r| r.method == method.name() && r.wbits == wbits && r.abits == abits)
            .map(|r| r.accuracy)
    }
}

/// A calibration batch in model space plus its labels and raw pixels.
#[derive(Debug, Clone)]
pub struct CalibrationSet {
    pub method: Calibration,
    pub input: Tensor,
    pub labels: Vec<usize>,
    /// Raw pixel space, `[B, C, S, S]` flattened.
    pub pixels: Vec<f64>,
    pub manifest: Option<SynthesisManifest>,
}

/// Draws or synthesizes the calibration batch for `method`.
pub fn calibration_set(cfg: &RunConfig, method: Calibration, model: &ViTModel, train: &LabeledImageSet) -> Result<CalibrationSet> {
    let n = cfg.synthesis.batch_size;
    match method.method() {
        None => {
            if train.len() < n {
                return Err(Error::Invalid(format!("need {n} real calibration images, have {}", train.len())));
            }
            let mut r = rng::stream(cfg.seed, &[0xCA1B]);
            let mut idx = sample(&mut r, train.len(), n).into_vec();
            idx.sort_unstable();
            let sub = train.subset(&idx);
            Ok(CalibrationSet {
                method,
                input: train.batch(&idx)?,
                labels: sub.labels.clone(),
                pixels: sub.images.iter().map(|&p| p as f64 / 255.0).collect(),
                manifest: None,
            })
        }
        Some(m) => synthetic_calibration(cfg, m, model),
    }
}

pub fn synthetic_calibration(cfg: &RunConfig, method: Method, model: &ViTModel) -> Result<CalibrationSet> {
    let set = synthesize_batch(model, &cfg.synthesis, method)?;
    Ok(CalibrationSet {
        method: Calibration::from(method),
        input: set.model_input()?,
        labels: set.labels.clone(),
        pixels: set.pixels,
        manifest: Some(set.manifest),
    })
}

/// Up to `per_class` test images of every class, in dataset order.
pub fn similarity_subset(test: &LabeledImageSet, per_class: usize) -> LabeledImageSet {
    let mut seen = [0usize; NUM_CLASSES];
    let idx: Vec<usize> = (0..test.len())
        .filter(|&i| {
            let l = test.labels[i];
            seen[l] += 1;
            seen[l] <= per_class
        })
        .collect();
    test.subset(&idx)
}

fn stage<T>(name: &'static str, seed: u64, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage { stage: name, seed, source: Box::new(e) })
}

fn write(dir: &Path, rel: &str, bytes: &[u8]) -> Result<()> {
    let p = dir.join(rel);
    if let Some(parent) = p.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(p, bytes)?;
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, rel: &str, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write(dir, rel, s.as_bytes())
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).map_err(|e| Error::Invalid(e.to_string()))?.to_path_buf());
        }
    }
    Ok(())
}

/// Hashes of every file under `dir`, sorted by relative path.
pub fn artifact_records(dir: &Path, skip: &[&str]) -> Result<Vec<ArtifactRecord>> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut out = Vec::new();
    for rel in files {
        let name = rel.to_string_lossy().replace('\\', "/");
        if skip.contains(&name.as_str()) {
            continue;
        }
        let bytes = fs::read(dir.join(&rel))?;
        out.push(ArtifactRecord { path: name, sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 });
    }
    Ok(out)
}

/// Writes the raw batch, manifest, previews and (for SARDFQ) the priors of
/// item 0 under `dir`.
pub fn write_calibration_set(dir: &Path, cfg: &RunConfig, model: &ViTModel, set: &CalibrationSet) -> Result<()> {
    let b = set.labels.len();
    let side = model.config.image_size;
    let shape = [b, CHANNELS, side, side];
    write(dir, "images.f64", &encode_f64(&shape, &set.pixels)?)?;
    let mut labels = set.labels.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("\n");
    labels.push('\n');
    write(dir, "labels.txt", labels.as_bytes())?;
    if let Some(m) = &set.manifest {
        write_json(dir, "manifest.json", m)?;
    }
    if cfg.previews {
        let per = set.pixels.len() / b.max(1);
        let imgs: Vec<Vec<u8>> = set.pixels.chunks(per).map(rescale_to_u8).collect();
        write_ppm_dir(&dir.join("ppm"), "img", &imgs)?;
        if let Some(m @ Method::Sardfq) = set.method.method() {
            if cfg.synthesis.apa {
                let t = item_targets(&cfg.synthesis, m, &model.config, 0)?;
                for (v, view) in t.views.iter().enumerate() {
                    for ((l, h), p) in &view.priors {
                        let name = format!("priors/item000_view{v}_block{l}_head{h}.pgm");
                        write(dir, &name, &encode_pgm(&p.to_gray(), p.side, p.side)?)?;
                    }
                }
            }
        }
    }
    Ok(())
}

fn results_csv(report: &ExperimentReport) -> String {
    let mut s = String::from("method,wbits,abits,accuracy\n");
    s.push_str(&format!("fp32,32,32,{:.6}\n", report.fp_accuracy));
    for r in &report.results {
        s.push_str(&format!("{},{},{},{:.6}\n", r.method, r.wbits, r.abits, r.accuracy));
    }
    s
}

fn similarity_csv(rows: &[SimilarityRow]) -> String {
    let mut s = String::from("class,intra_real");
    for r in rows {
        s.push(',');
        s.push_str(&r.method);
    }
    s.push('\n');
    let Some(first) = rows.first() else { return s };
    for (c, base) in first.classes.iter().enumerate() {
        s.push_str(&format!("{},{:.6}", base.class, base.intra_real));
        for r in rows {
            match r.classes[c].synthetic {
                Some(v) => s.push_str(&format!(",{v:.6}")),
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}

/// Runs the whole experiment into `out_dir`.
pub fn run_pipeline(cfg: &RunConfig, out_dir: &Path) -> Result<ExperimentReport> {
    let cfg = cfg.clone().resolved();
    cfg.validate()?;
    let seed = cfg.seed;
    let run_id = sha256_hex(serde_json::to_string(&cfg)?.as_bytes())[..16].to_string();
    fs::create_dir_all(out_dir)?;
    info!("run {run_id} -> {}", out_dir.display());
    let mut timing: Vec<(String, f64)> = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timing: &mut Vec<(String, f64)>| {
        timing.push((name.to_string(), clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };

    let (train, test) = stage("data", seed, gen_toy_dataset(seed, cfg.data.train_n, cfg.data.test_n))?;
    write(out_dir, "data/train.bin", &encode_image_set(&train))?;
    write(out_dir, "data/test.bin", &encode_image_set(&test))?;
    lap("data", &mut timing);

    let (model, train_report) = match &cfg.checkpoint {
        Some(p) => (stage("load", seed, load_checkpoint(p))?, None),
        None => {
            let (m, r) = stage("train", seed, train_toy_model(cfg.model, &train, Some(&test), &cfg.train))?;
            (m, Some(r))
        }
    };
    save_checkpoint(&model, &out_dir.join("fp.ckpt"))?;
    if let Some(r) = &train_report {
        write_json(out_dir, "train_report.json", r)?;
    }
    let fp_accuracy = stage("eval", seed, evaluate(&model, &test))?;
    info!("full precision test accuracy {fp_accuracy:.4}");
    lap("train", &mut timing);

    let sim_real = similarity_subset(&test, cfg.similarity_per_class);
    let sim_idx: Vec<usize> = (0..sim_real.len()).collect();
    let sim_input = sim_real.batch(&sim_idx)?;

    let mut results = Vec::new();
    let mut similarity = Vec::new();
    for &method in &cfg.methods {
        let name = method.name();
        let set = stage("synthesize", seed, calibration_set(&cfg, method, &model, &train))?;
        write_calibration_set(&out_dir.join("calibration").join(name), &cfg, &model, &set)?;
        lap(&format!("calibration/{name}"), &mut timing);
        let classes = stage(
            "similarity",
            seed,
            class_similarity(&model, &set.input, &set.labels, &sim_input, &sim_real.labels),
        )?;
        similarity.push(SimilarityRow { method: name.into(), classes });
        for &(w, a) in &cfg.bits {
            let (q, ptq) = stage("ptq", seed, run_ptq(&model, &set.input, w, a, &cfg.ptq))?;
            let rel = format!("quant/{name}_w{w}a{a}");
            fs::create_dir_all(out_dir.join("quant"))?;
            q.save(&out_dir.join(format!("{rel}.ckpt")))?;
            write_json(out_dir, &format!("{rel}.ptq.json"), &ptq)?;
            let accuracy = stage("eval", seed, evaluate(&q, &test))?;
            info!("{name} W{w}A{a}: {accuracy:.4}");
            results.push(ResultRow { method: name.into(), wbits: w, abits: a, accuracy, ptq });
            lap(&format!("ptq/{name}_w{w}a{a}"), &mut timing);
        }
    }

    let mut report = ExperimentReport {
        run_id,
        config: cfg,
        fp_accuracy,
        train: train_report,
        results,
        similarity,
        artifacts: Vec::new(),
    };
    write(out_dir, "results.csv", results_csv(&report).as_bytes())?;
    write(out_dir, "similarity.csv", similarity_csv(&report.similarity).as_bytes())?;
    report.artifacts = artifact_records(out_dir, &["report.json", "timing.json"])?;
    write_json(out_dir, "report.json", &report)?;
    let timing: Vec<serde_json::Value> =
        timing.into_iter().map(|(stage, secs)| serde_json::json!({ "stage": stage, "seconds": secs })).collect();
    write_json(out_dir, "timing.json", &timing)?;
    Ok(report)
}
