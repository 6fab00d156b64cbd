use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use xformer::attention::{write_attention_csv, AttentionKind};
use xformer::config::{DataConfig, DatasetSpec, ExperimentConfig, KeypointSource, ModelConfig};
use xformer::data::{load_samples, save_samples, DatasetType, PoseSample, SampleGenerator};
use xformer::model::{ModelInput, XFormerModel};
use xformer::params::ParamStore;
use xformer::train::{benchmark, evaluate, keypoint_input, run_training, Checkpoint};

#[derive(Parser)]
#[command(name = "xformer", version, about = "Two-branch body mesh regression on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Keypoints {
    Gt,
    Decoded,
}

impl From<Keypoints> for KeypointSource {
    fn from(k: Keypoints) -> Self {
        match k {
            Keypoints::Gt => KeypointSource::GroundTruth,
            Keypoints::Decoded => KeypointSource::Decoded,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the configured step count.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        quiet: bool,
    },
    /// Score a checkpoint on a generated or saved dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset spec (JSON) or a saved `.xfs` sample file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "decoded")]
        keypoints: Keypoints,
        /// Write the summary CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write per-sample metrics.
        #[arg(long)]
        per_sample: Option<PathBuf>,
    },
    /// Time full inference passes.
    Bench {
        #[arg(long, conflicts_with = "preset")]
        ckpt: Option<PathBuf>,
        /// small_toy, large_toy or paper_shape, with freshly initialized weights.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value_t = 50)]
        iters: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        json: bool,
    },
    /// Generate a sample stream and save it as `.xfs`.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Experiment config supplying model and rendering settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Dump one head-averaged attention map as CSV.
    ExportAttn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sample: usize,
        #[arg(long)]
        out: PathBuf,
        /// Record name; defaults to the first keypoint-over-image map.
        #[arg(long)]
        layer: Option<String>,
        /// Dataset spec or `.xfs` file; defaults to the checkpoint's eval split.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "decoded")]
        keypoints: Keypoints,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(ExperimentConfig::small_toy()),
    }
}

/// Reads `.xfs` files directly; anything else is treated as a dataset spec.
fn load_dataset(path: &Path, config: &ExperimentConfig) -> Result<Vec<PoseSample>> {
    if path.extension().is_some_and(|e| e == "xfs") {
        return load_samples(path).with_context(|| format!("reading samples {}", path.display()));
    }
    let spec = DatasetSpec::load(path).with_context(|| format!("loading dataset spec {}", path.display()))?;
    let generator = SampleGenerator::new(&config.model, &config.data)?;
    Ok(generator.make_dataset(&spec)?)
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, XFormerModel)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let model = XFormerModel::new(ck.config.model.clone())?;
    Ok((ck, model))
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn train(config: &Path, out: &Path, steps: Option<u64>, quiet: bool) -> Result<()> {
    let mut cfg = load_config(Some(config))?;
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    let total = cfg.train.steps;
    let summary = run_training(cfg, out, |step, r| {
        if !quiet && (step == 1 || step % 10 == 0 || step == total) {
            eprintln!("step {step:>6}/{total}  loss {:.6}", r.total);
        }
    })?;
    if let Some((step, report)) = summary.evals.last() {
        println!("eval at step {step}");
        print!("{}", report.summary());
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, keypoints: Keypoints, out: Option<&Path>, per_sample: Option<&Path>) -> Result<()> {
    let (ck, model) = load_checkpoint(ckpt)?;
    let samples = load_dataset(data, &ck.config)?;
    let report = evaluate(&model, &ck.params, &samples, keypoints.into())?;
    write_or_print(out, &report.to_csv())?;
    if let Some(p) = per_sample {
        std::fs::write(p, report.per_sample_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn bench(ckpt: Option<&Path>, preset: Option<&str>, iters: usize, warmup: usize, threads: usize, json: bool) -> Result<()> {
    let (model, params, data) = match (ckpt, preset) {
        (Some(p), _) => {
            let (ck, model) = load_checkpoint(p)?;
            (model, ck.params, ck.config.data)
        }
        (None, name) => {
            let cfg = ModelConfig::preset(name.unwrap_or("small_toy"))?;
            let model = XFormerModel::new(cfg)?;
            let params: ParamStore = model.init_params(model.config.seed)?;
            (model, params, DataConfig::default())
        }
    };
    let generator = SampleGenerator::new(&model.config, &data)?;
    let spec = DatasetSpec {
        image_3d: 1,
        ..DatasetSpec::default()
    };
    let sample = generator.sample(&spec, 0, DatasetType::Image3d, 0)?;
    let input = ModelInput {
        image: sample.image.as_ref(),
        keypoints: None,
    };
    let report = benchmark(&model, &params, input, iters, warmup, threads)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn gen_data(spec: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let spec = DatasetSpec::load(spec).with_context(|| format!("loading dataset spec {}", spec.display()))?;
    let generator = SampleGenerator::new(&cfg.model, &cfg.data)?;
    let samples = generator.make_dataset(&spec)?;
    save_samples(out, &samples).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn export_attn(
    ckpt: &Path,
    index: usize,
    out: &Path,
    layer: Option<&str>,
    data: Option<&Path>,
    keypoints: Keypoints,
) -> Result<()> {
    let (ck, model) = load_checkpoint(ckpt)?;
    let samples = match data {
        Some(p) => load_dataset(p, &ck.config)?,
        None => SampleGenerator::new(&ck.config.model, &ck.config.data)?.make_dataset(&ck.config.data.eval)?,
    };
    let Some(sample) = samples.get(index) else {
        bail!("sample {index} out of range ({} samples)", samples.len());
    };
    let input = ModelInput {
        image: sample.image.as_ref(),
        keypoints: keypoint_input(sample, keypoints.into()),
    };
    let g = xformer::tensor::Graph::new();
    let b = ck.params.bind_frozen(&g);
    let output = model.forward(&b, input)?;
    let record = match layer {
        Some(name) => output.attention.iter().find(|r| r.name == name),
        None => output.attention.iter().find(|r| r.kind == AttentionKind::KeypointOverImage),
    };
    let Some(record) = record else {
        let names: Vec<&str> = output.attention.iter().map(|r| r.name.as_str()).collect();
        bail!("no matching attention map; available: {}", names.join(", "));
    };
    let (queries, keys) = output.roles_for(record.kind);
    let mut w = BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?);
    write_attention_csv(&mut w, &record.weights, queries, keys)?;
    w.flush()?;
    println!("wrote {} to {}", record.name, out.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, out, steps, quiet } => train(&config, &out, steps, quiet),
        Command::Eval {
            ckpt,
            data,
            keypoints,
            out,
            per_sample,
        } => eval(&ckpt, &data, keypoints, out.as_deref(), per_sample.as_deref()),
        Command::Bench {
            ckpt,
            preset,
            iters,
            warmup,
            threads,
            json,
        } => bench(ckpt.as_deref(), preset.as_deref(), iters, warmup, threads, json),
        Command::GenData { spec, out, config } => gen_data(&spec, &out, config.as_deref()),
        Command::ExportAttn {
            ckpt,
            sample,
            out,
            layer,
            data,
            keypoints,
        } => export_attn(&ckpt, sample, &out, layer.as_deref(), data.as_deref(), keypoints),
    }
}
