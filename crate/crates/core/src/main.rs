use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use log::info;
use serde_json::json;

use dfqlab::harness::config::RunConfig;
use dfqlab::harness::dataset::{gen_toy_dataset, LabeledImageSet, NUM_CLASSES};
use dfqlab::harness::eval::predict;
use dfqlab::harness::io::{decode_f64, decode_image_set, encode_image_set};
use dfqlab::harness::pipeline::{run_pipeline, synthetic_calibration, write_calibration_set};
use dfqlab::ptq::run_ptq;
use dfqlab::quant::AnyModel;
use dfqlab::synth::{to_model_space, Method};
use dfqlab::tensor::Tensor;
use dfqlab::vit::{load_checkpoint, save_checkpoint, train_toy_model};

#[derive(Parser)]
#[command(name = "dfqlab", version, about = "Data-free quantization lab for small vision transformers")]
struct Cli {
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the toy dataset to `<out>/train.bin` and `<out>/test.bin`.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        train_n: usize,
        #[arg(long, default_value_t = 1000)]
        test_n: usize,
    },
    /// Train the full-precision model.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Directory written by gen-data; generated from the config if absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Produce a calibration batch.
    Synthesize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        method: Method,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate and reconstruct a quantized model.
    Quantize {
        #[arg(long)]
        ckpt: PathBuf,
        /// `images.f64` from synthesize or a dataset `.bin`.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        wbits: u32,
        #[arg(long)]
        abits: u32,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-1 accuracy of a checkpoint (full precision or quantized).
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset `.bin` or a gen-data directory (uses test.bin).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// The whole experiment.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> anyhow::Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    let cfg = match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg.resolved(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn read_set(path: &Path) -> anyhow::Result<LabeledImageSet> {
    let path = if path.is_dir() { path.join("test.bin") } else { path.to_path_buf() };
    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(decode_image_set(&bytes, &path)?)
}

/// Standardized calibration batch from either file kind.
fn read_images(path: &Path) -> anyhow::Result<Tensor> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(b"DFQF64A1") {
        let (shape, data) = decode_f64(&bytes, path)?;
        if shape.len() != 4 {
            bail!("{}: expected [B, C, H, W] images, got {shape:?}", path.display());
        }
        Ok(Tensor::new(shape, data.into_iter().map(to_model_space).collect())?)
    } else {
        let set = decode_image_set(&bytes, path)?;
        let idx: Vec<usize> = (0..set.len()).collect();
        Ok(set.batch(&idx)?)
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// `fp.ckpt` -> `fp.<ext>`.
fn sidecar(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    dfqlab::alloc::tune_allocator();
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { out, train_n, test_n } => {
            let seed = cli.seed.unwrap_or(0);
            let (train, test) = gen_toy_dataset(seed, train_n, test_n)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("train.bin"), encode_image_set(&train))?;
            fs::write(out.join("test.bin"), encode_image_set(&test))?;
            info!("wrote {train_n} train and {test_n} test images to {}", out.display());
        }
        Command::Train { config, out, data } => {
            let cfg = load_config(config.as_deref(), cli.seed)?;
            let (train, test) = match data {
                Some(d) => (read_set(&d.join("train.bin"))?, read_set(&d.join("test.bin"))?),
                None => gen_toy_dataset(cfg.seed, cfg.data.train_n, cfg.data.test_n)?,
            };
            let (model, report) = train_toy_model(cfg.model, &train, Some(&test), &cfg.train)?;
            if let Some(p) = out.parent() {
                fs::create_dir_all(p)?;
            }
            save_checkpoint(&model, &out)?;
            write_json(&sidecar(&out, "train.json"), &report)?;
            println!("test accuracy {:.4}", report.test_accuracy.unwrap_or(f64::NAN));
        }
        Command::Synthesize { ckpt, config, method, out } => {
            let cfg = load_config(config.as_deref(), cli.seed)?;
            let model = load_checkpoint(&ckpt)?;
            let set = synthetic_calibration(&cfg, method, &model)?;
            write_calibration_set(&out, &cfg, &model, &set)?;
            info!("wrote {} images to {}", set.labels.len(), out.display());
        }
        Command::Quantize { ckpt, images, wbits, abits, config, out } => {
            let cfg = load_config(config.as_deref(), cli.seed)?;
            let model = load_checkpoint(&ckpt)?;
            let x = read_images(&images)?;
            let (q, report) = run_ptq(&model, &x, wbits, abits, &cfg.ptq)?;
            if let Some(p) = out.parent() {
                fs::create_dir_all(p)?;
            }
            q.save(&out)?;
            write_json(&sidecar(&out, "ptq.json"), &report)?;
        }
        Command::Eval { ckpt, data, report } => {
            let model = AnyModel::load(&ckpt)?;
            let set = read_set(&data)?;
            if set.is_empty() {
                bail!("{}: no images", data.display());
            }
            let preds = predict(&model, &set)?;
            let mut hit = [0usize; NUM_CLASSES];
            let counts = set.class_counts();
            for (p, l) in preds.iter().zip(&set.labels) {
                if p == l {
                    hit[*l] += 1;
                }
            }
            let accuracy = hit.iter().sum::<usize>() as f64 / set.len() as f64;
            let per_class: Vec<Option<f64>> =
                (0..NUM_CLASSES).map(|c| (counts[c] > 0).then(|| hit[c] as f64 / counts[c] as f64)).collect();
            let quantized = matches!(model, AnyModel::Quantized(_));
            write_json(
                &report,
                &json!({ "checkpoint": ckpt, "quantized": quantized, "images": set.len(), "accuracy": accuracy, "per_class": per_class }),
            )?;
            println!("accuracy {accuracy:.4}");
        }
        Command::Run { config, out_dir } => {
            let cfg = load_config(config.as_deref(), cli.seed)?;
            let r = run_pipeline(&cfg, &out_dir)?;
            println!("run {}: fp {:.4}", r.run_id, r.fp_accuracy);
            for row in &r.results {
                println!("  {:<7} W{}A{}  {:.4}", row.method, row.wbits, row.abits, row.accuracy);
            }
        }
    }
    Ok(())
}
