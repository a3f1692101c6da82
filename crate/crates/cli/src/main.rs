//! `zwm`: train invariant feature extractors, register and extract
//! zero-watermarks, and run evaluation sweeps.

mod eval;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use zwm_core::data::{synth_dataset, CLASS_NAMES};
use zwm_core::distortions::{apply_distortion, Distortion, DistortionPhase, DistortionSpec};
use zwm_core::image::Image;
use zwm_core::store::{load_checkpoint, Registry};
use zwm_core::training::{fit, trainer_for, TrainingConfig};
use zwm_core::zerowatermark::{extract, register, FrozenExtractor, RegisterOptions, WatermarkMessage, DEFAULT_BITS};

#[derive(Parser)]
#[command(name = "zwm", version, about = "Zero-watermarking on distortion-invariant features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the feature extractor, discriminator and reconstructor.
    TrainFeatures(TrainArgs),
    /// Train with the reconstructor or the adversarial branch switched off.
    Ablate {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        no_reconstructor: bool,
        #[arg(long)]
        no_adversarial: bool,
    },
    /// Bind a watermark to an image and store the signature.
    Register {
        #[arg(long)]
        image: PathBuf,
        /// Hex payload, or a file containing it.
        #[arg(long)]
        bits: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "registry")]
        registry: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BITS)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Recover the watermark of a registered image.
    Extract {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        record: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "registry")]
        registry: PathBuf,
    },
    /// Invariance, collapse, probe and (optionally) watermark-robustness reports.
    Evaluate(eval::EvalArgs),
    /// Apply one distortion to an image file.
    Distort(DistortArgs),
    /// Write a labelled procedural dataset as PNG files.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training configuration; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<u32>,
}

#[derive(Args)]
struct DistortArgs {
    /// Distortion kind, e.g. `jpeg`, `rotation`, `gaussian_noise`.
    #[arg(long)]
    kind: String,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    quality: Option<u32>,
    #[arg(long)]
    colors: Option<u32>,
    #[arg(long)]
    size: Option<u32>,
    #[arg(long, allow_hyphen_values = true)]
    degrees: Option<f64>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    area: Option<f64>,
    #[arg(long)]
    factor: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    shift: Option<f64>,
    #[arg(long)]
    density: Option<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        // clap exits 2 on usage errors and 0 for --help / --version
        Err(e) => e.exit(),
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::TrainFeatures(a) => train(a, |_| {}),
        Command::Ablate { train: a, no_reconstructor, no_adversarial } => {
            if !no_reconstructor && !no_adversarial {
                bail!("ablate needs --no-reconstructor and/or --no-adversarial");
            }
            train(a, |cfg| {
                cfg.use_reconstructor &= !no_reconstructor;
                cfg.use_adversarial &= !no_adversarial;
            })
        }
        Command::Register { image, bits, ckpt, registry, k, seed } => {
            let fe = load_extractor(&ckpt)?;
            let img = Image::load(&image)?;
            let msg = parse_bits(&bits, k)?;
            let opts = RegisterOptions { seed, ..Default::default() };
            let (record, trace) = register(&fe, &img, &msg, &opts)?;
            let id = Registry::open(&registry)?.put(&record)?;
            log::info!("registered in {} epochs, min margin {:.3}", trace.epochs, trace.min_margin);
            println!("{id}");
            Ok(())
        }
        Command::Extract { image, record, ckpt, registry } => {
            let fe = load_extractor(&ckpt)?;
            let rec = Registry::open(&registry)?.get(&record)?;
            let out = extract(&fe, &Image::load(&image)?, &rec)?;
            println!("{}", out.message.to_hex());
            println!("{}", out.probs.iter().map(|p| format!("{p:.4}")).collect::<Vec<_>>().join(" "));
            Ok(())
        }
        Command::Evaluate(a) => eval::run(a),
        Command::Distort(a) => distort(a),
        Command::SynthData { out, n, seed } => synth(&out, n, seed),
    }
}

fn train(a: TrainArgs, adjust: impl FnOnce(&mut TrainingConfig)) -> Result<()> {
    let mut cfg: TrainingConfig = match &a.config {
        Some(p) => {
            serde_json::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                .with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainingConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    adjust(&mut cfg);
    let data = zwm_core::data::load_dir(&a.data)?;
    log::info!("{} training images from {}", data.len(), a.data.display());
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    std::fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let mut trainer = trainer_for(cfg, &a.out)?;
    let report = fit(&mut trainer, &data, &a.out)?;
    for c in &report.checkpoints {
        println!("{}", c.display());
    }
    Ok(())
}

/// A checkpoint directory, or a training output directory (latest checkpoint).
fn load_extractor(path: &Path) -> Result<FrozenExtractor> {
    let dir = if path.join("manifest.json").exists() {
        path.to_path_buf()
    } else {
        zwm_core::training::latest_checkpoint(path)
            .with_context(|| format!("no checkpoint found under {}", path.display()))?
    };
    Ok(FrozenExtractor::new(load_checkpoint(&dir)?.nets))
}

fn parse_bits(arg: &str, k: usize) -> Result<WatermarkMessage> {
    let p = Path::new(arg);
    let text = if p.is_file() { std::fs::read_to_string(p)? } else { arg.to_string() };
    Ok(WatermarkMessage::from_hex(&text, k)?)
}

fn distort(a: DistortArgs) -> Result<()> {
    let mut params = serde_json::Map::new();
    let ints = [("quality", a.quality), ("colors", a.colors), ("size", a.size)];
    for (name, v) in ints {
        if let Some(v) = v {
            params.insert(name.into(), v.into());
        }
    }
    let floats = [
        ("degrees", a.degrees),
        ("fraction", a.fraction),
        ("sigma", a.sigma),
        ("threshold", a.threshold),
        ("area", a.area),
        ("factor", a.factor),
        ("shift", a.shift),
        ("density", a.density),
    ];
    for (name, v) in floats {
        if let Some(v) = v {
            params.insert(name.into(), v.into());
        }
    }
    let value = serde_json::json!({ "kind": a.kind, "params": params });
    let distortion: Distortion =
        serde_json::from_value(value).with_context(|| format!("invalid parameters for distortion {:?}", a.kind))?;
    let spec = DistortionSpec::new(distortion, a.seed);
    spec.validate(DistortionPhase::Testing)?;
    let img = Image::load(&a.input)?;
    apply_distortion(&img, &spec)?.save_png(&a.out)?;
    Ok(())
}

fn synth(out: &Path, n: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut labels = String::from("file,label\n");
    for (i, item) in synth_dataset(n, seed).into_iter().enumerate() {
        let name = format!("{i:05}_{}.png", CLASS_NAMES[item.label]);
        item.image.save_png(&out.join(&name))?;
        labels.push_str(&format!("{name},{}\n", item.label));
    }
    std::fs::write(out.join(eval::LABELS_FILE), labels)?;
    println!("{n} images written to {}", out.display());
    Ok(())
}
