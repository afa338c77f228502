//! Command-line surface: dataset synthesis, training, evaluation, gradient
//! checking, profiling, and feature dumps.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cinformer::attention::AttentionFlavor;
use cinformer::checkpoint::load_checkpoint;
use cinformer::config::ConfigFile;
use cinformer::dataset::{batch_tensors, generate_dataset, load_manifest, load_split};
use cinformer::gradcheck;
use cinformer::graph::Graph;
use cinformer::model::{forward, ModelDims};
use cinformer::nn::Bound;
use cinformer::pgm::{read_pgm, write_pgm, GrayImage};
use cinformer::profile::{profile, stage_attention_flops};
use cinformer::train::{evaluate, train_loop};
use cinformer::{Error, Result};

#[derive(Parser)]
#[command(
    name = "cinformer",
    about = "Surface-defect segmentation with a CNN-injected Top-K transformer",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic defect dataset.
    Synth {
        /// Output directory for images/, masks/, and manifest.json.
        #[arg(long)]
        out: PathBuf,
        /// Number of images.
        #[arg(long, default_value_t = 64)]
        count: usize,
        /// Square image size (multiple of 32).
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Defect contrast in (0, 1]; lower is harder.
        #[arg(long, default_value_t = 0.5)]
        contrast: f64,
        /// Generator seed.
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Train a model and write last.ckpt, best.ckpt, metrics.jsonl.
    Train {
        /// JSON config; omitted fields use documented defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (overrides data.dir from the config).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides train.seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from a checkpoint written with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; prints a JSON metric report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Manifest split to evaluate: "train" or "test".
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Finite-difference gradient check over every op and a micro model.
    Gradcheck {
        #[arg(long, default_value_t = gradcheck::DEFAULT_EPS)]
        eps: f64,
        #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Parameter/FLOP table for the four attention flavors.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write per-stage activation maps (and Top-K selection masks) as PGM.
    DumpFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Grayscale PGM matching the configured input size.
        #[arg(long)]
        image: PathBuf,
        /// Encoder stage 1-4.
        #[arg(long)]
        stage: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::io(p.display().to_string(), e))?;
            ConfigFile::from_json(&text)
        }
    }
}

fn cmd_synth(out: &Path, count: usize, size: usize, contrast: f64, seed: u64) -> Result<()> {
    generate_dataset(out, count, size, contrast, seed)?;
    println!("{}", out.join("manifest.json").display());
    Ok(())
}

fn cmd_train(
    config: Option<&Path>,
    data: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    resume: Option<&Path>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(d) = data {
        cfg.data.dir = d.display().to_string();
    }
    let data_dir = PathBuf::from(&cfg.data.dir);
    let outcome = train_loop(&cfg, &data_dir, out, resume)?;
    println!(
        "{}",
        serde_json::json!({
            "steps": outcome.final_step,
            "final_loss": outcome.last_loss,
            "best_miou": outcome.best_miou,
            "out": out.display().to_string(),
        })
    );
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, split: &str) -> Result<()> {
    let snap = load_checkpoint(checkpoint)?;
    let dims = ModelDims::from_config(&snap.config)?;
    let manifest = load_manifest(data)?;
    if manifest.size != dims.input_size {
        return Err(Error::Data(format!(
            "checkpoint expects {}x{} inputs but dataset is {}x{}",
            dims.input_size, dims.input_size, manifest.size, manifest.size
        )));
    }
    let ids = match split {
        "train" => &manifest.splits.train,
        "test" => &manifest.splits.test,
        other => {
            return Err(Error::Usage(format!(
                "unknown split '{other}' (expected 'train' or 'test')"
            )))
        }
    };
    let samples = load_split(data, ids)?;
    let report = evaluate(&snap.params, &dims, &samples, snap.config.train.batch)?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

fn cmd_gradcheck(eps: f64, tolerance: f64) -> Result<()> {
    let reports = gradcheck::run_suite(eps, tolerance)?;
    println!("{:<32} {:>12} {:>8} {:>6}", "op", "max rel err", "coords", "pass");
    let mut all_pass = true;
    for r in &reports {
        println!(
            "{:<32} {:>12.3e} {:>8} {:>6}",
            r.name,
            r.max_rel_err,
            r.coords_checked,
            if r.pass { "ok" } else { "FAIL" }
        );
        all_pass &= r.pass;
    }
    if !all_pass {
        return Err(Error::Numeric(
            "gradient check failed; see table above".into(),
        ));
    }
    Ok(())
}

fn cmd_bench(config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let dims = ModelDims::from_config(&cfg)?;
    let p = profile(&dims);
    let flavors = [
        ("dense-global", AttentionFlavor::DenseGlobal),
        ("window", AttentionFlavor::Window),
        ("topk-full-key", AttentionFlavor::TopkFullKey),
        ("topk-selected-key", AttentionFlavor::TopkSelectedKey),
    ];
    println!("{:<20} {:>16}", "attention flavor", "flops (4 stages)");
    let mut rows = Vec::new();
    for (name, flavor) in flavors {
        let flops: u64 = (0..4).map(|s| stage_attention_flops(&dims, s, flavor)).sum();
        println!("{name:<20} {flops:>16}");
        rows.push(serde_json::json!({ "flavor": name, "attention_flops": flops }));
    }
    println!();
    println!("{:<20} {:>12} {:>16}", "component", "params", "flops");
    for c in &p.components {
        println!("{:<20} {:>12} {:>16}", c.name, c.params, c.flops);
    }
    println!("{:<20} {:>12} {:>16}", "total", p.total_params, p.total_flops);
    println!(
        "{}",
        serde_json::json!({
            "attention_flavors": rows,
            "profile": p,
        })
    );
    Ok(())
}

/// Min-max normalize to [0,255]; an all-equal map becomes uniform 128.
fn normalize_to_pgm(values: &[f32], width: usize, height: usize) -> GrayImage {
    let lo = values.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let pixels = if hi > lo {
        values
            .iter()
            .map(|&v| (((v - lo) / (hi - lo)) * 255.0).round() as u8)
            .collect()
    } else {
        vec![128u8; values.len()]
    };
    GrayImage {
        width,
        height,
        pixels,
    }
}

fn cmd_dump_features(checkpoint: &Path, image: &Path, stage: usize, out: &Path) -> Result<()> {
    if !(1..=4).contains(&stage) {
        return Err(Error::Usage(format!("stage {stage} out of range 1-4")));
    }
    let snap = load_checkpoint(checkpoint)?;
    let dims = ModelDims::from_config(&snap.config)?;
    let img = read_pgm(image)?;
    if img.width != dims.input_size || img.height != dims.input_size {
        return Err(Error::Data(format!(
            "image is {}x{} but the checkpoint expects {}x{}",
            img.width, img.height, dims.input_size, dims.input_size
        )));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let sample = cinformer::dataset::Sample {
        id: "input".into(),
        image: img.clone(),
        mask: GrayImage::new(img.width, img.height),
    };
    let (images, _) = batch_tensors::<f32>(&[&sample])?;
    let mut g: Graph<f32> = Graph::new();
    let bound = Bound::bind(&mut g, &snap.params);
    let input = g.constant(images);
    let outputs = forward(&mut g, &bound, input, &dims)?;
    let tm = &outputs.encoder.stages[stage - 1];
    let values = g.value(tm.values);
    let (n, c) = (values.shape[1], values.shape[2]);
    let mut mean = vec![0.0f32; n];
    for (t, m) in mean.iter_mut().enumerate() {
        let row = &values.data[t * c..(t + 1) * c];
        *m = row.iter().sum::<f32>() / c as f32;
    }
    let map = normalize_to_pgm(&mean, tm.w, tm.h);
    let mean_path = out.join(format!("stage{stage}_mean.pgm"));
    write_pgm(&mean_path, &map)?;
    println!("{}", mean_path.display());
    if let Some(selections) = &outputs.encoder.selections[stage - 1] {
        let sel = &selections[0];
        let mut mask = GrayImage::new(tm.w, tm.h);
        for &t in &sel.token_indexes {
            mask.pixels[t] = 255;
        }
        let sel_path = out.join(format!("stage{stage}_selection.pgm"));
        write_pgm(&sel_path, &mask)?;
        println!("{}", sel_path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            count,
            size,
            contrast,
            seed,
        } => cmd_synth(&out, count, size, contrast, seed),
        Command::Train {
            config,
            data,
            out,
            seed,
            resume,
        } => cmd_train(
            config.as_deref(),
            data.as_deref(),
            &out,
            seed,
            resume.as_deref(),
        ),
        Command::Eval {
            checkpoint,
            data,
            split,
        } => cmd_eval(&checkpoint, &data, &split),
        Command::Gradcheck { eps, tolerance } => cmd_gradcheck(eps, tolerance),
        Command::Bench { config } => cmd_bench(config.as_deref()),
        Command::DumpFeatures {
            checkpoint,
            image,
            stage,
            out,
        } => cmd_dump_features(&checkpoint, &image, stage, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
