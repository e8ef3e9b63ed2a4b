//! `freqseg`: data generation, wavelet decomposition previews, training,
//! inference and evaluation from one binary.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use freqseg::data::{self, SynthSpec};
use freqseg::model::XNetV2Model;
use freqseg::tensor::Tensor;
use freqseg::trainer::{self, TrainConfig};
use freqseg::wavelet::{self, WaveletBasis};
use freqseg::{nten, Result};

#[derive(Parser)]
#[command(name = "freqseg", version, about = "Frequency-aware semi-supervised segmentation")]
struct Cli {
    /// Worker threads for tensor ops and evaluation
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic PGM dataset
    GenData(GenDataArgs),
    /// Split an image into low- and high-frequency reconstructions
    Decompose(DecomposeArgs),
    /// Build the complementary fusion images x^L and x^H
    Fuse(FuseArgs),
    /// Train a model from a config file
    Train(TrainArgs),
    /// Segment an image with a trained checkpoint
    Infer(InferArgs),
    /// Score a checkpoint on the test split
    Eval(EvalArgs),
    /// Print the layer and parameter summary of a model
    Info(InfoArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Training images
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// Test images
    #[arg(long, default_value_t = 50)]
    n_test: usize,
    /// Square image size, divisible by 16
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// High-frequency content knob in [0, 1]
    #[arg(long, default_value_t = 0.5)]
    texture: f32,
    #[arg(long, default_value_t = 0.02)]
    noise: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecomposeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "haar")]
    basis: String,
    #[arg(long, default_value_t = 1)]
    levels: usize,
    /// Output for the low-frequency part (.pgm preview or .nten)
    #[arg(long)]
    out_lf: PathBuf,
    /// Output for the high-frequency part (.pgm preview or .nten)
    #[arg(long)]
    out_hf: PathBuf,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "haar")]
    basis: String,
    #[arg(long, default_value_t = 1)]
    levels: usize,
    #[arg(long)]
    alpha: f32,
    #[arg(long)]
    beta: f32,
    #[arg(long)]
    out_lf: PathBuf,
    #[arg(long)]
    out_hf: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory (overrides config)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (overrides config)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    lambda_max: Option<f32>,
    #[arg(long)]
    labeled_fraction: Option<f32>,
}

#[derive(Args)]
struct InferArgs {
    /// Checkpoint directory
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    /// Label map output (.pgm preview or .nten)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Metrics CSV output
    #[arg(long)]
    out: PathBuf,
    /// Pixel spacing multiplier for surface distances
    #[arg(long, default_value_t = 1.0)]
    spacing: f64,
}

#[derive(Args)]
struct InfoArgs {
    /// Checkpoint directory to describe
    #[arg(long, conflicts_with = "config")]
    ckpt: Option<PathBuf>,
    /// Config file to describe without weights
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
    {
        eprintln!("error: {}", e);
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Decompose(a) => decompose(a),
        Command::Fuse(a) => fuse(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Info(a) => info(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec = SynthSpec {
        n_train: a.n,
        n_test: a.n_test,
        h: a.size,
        w: a.size,
        texture_amplitude: a.texture,
        noise_sigma: a.noise,
        seed: a.seed,
    };
    let manifest = data::generate_synthetic(&spec, &a.out)?;
    eprintln!(
        "wrote {} train + {} test images to {}",
        a.n,
        a.n_test,
        manifest.parent().unwrap().display()
    );
    Ok(())
}

fn read_image(path: &Path) -> Result<Tensor> {
    let (w, h, pixels) = data::read_pgm(path)?;
    let img: Vec<f32> = pixels.iter().map(|&v| v as f32 / 255.0).collect();
    Ok(Tensor::from_vec(&[1, h, w], img))
}

/// `.pgm` gets a min-max scaled 8-bit preview, `.nten` the raw values.
fn write_plane(path: &Path, t: &Tensor) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => {
            let s = t.shape();
            let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
            let d = t.data();
            let lo = d.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = d.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let span = if hi > lo { hi - lo } else { 1.0 };
            let pixels: Vec<u8> = d
                .iter()
                .map(|&v| (((v - lo) / span) * 255.0).round() as u8)
                .collect();
            data::write_pgm(path, w, h, &pixels)
        }
        _ => nten::write_tensor(path, t),
    }
}

fn decompose(a: DecomposeArgs) -> Result<()> {
    let img = read_image(&a.input)?;
    let basis = WaveletBasis::by_name(&a.basis)?;
    let (lf, hf) = wavelet::frequency_split(&img, &basis, a.levels)?;
    write_plane(&a.out_lf, &lf)?;
    write_plane(&a.out_hf, &hf)?;
    Ok(())
}

fn fuse(a: FuseArgs) -> Result<()> {
    let img = read_image(&a.input)?;
    let basis = WaveletBasis::by_name(&a.basis)?;
    let (lf, hf) = wavelet::frequency_split(&img, &basis, a.levels)?;
    let (xl, xh) = wavelet::complementary_fuse(&lf, &hf, a.alpha, a.beta)?;
    write_plane(&a.out_lf, &xl)?;
    write_plane(&a.out_hf, &xh)?;
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::from_file(&a.config)?;
    if let Some(d) = a.data {
        cfg.data_dir = d.display().to_string();
    }
    if let Some(o) = a.out {
        cfg.out_dir = o.display().to_string();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(m) = a.mode {
        cfg.mode = trainer::TrainMode::by_name(&m)?;
    }
    if let Some(l) = a.lambda_max {
        cfg.lambda_max = l;
    }
    if let Some(f) = a.labeled_fraction {
        cfg.labeled_fraction = f;
    }
    if cfg.data_dir.is_empty() || cfg.out_dir.is_empty() {
        return Err(freqseg::Error::Config(
            "data_dir and out_dir must be set (config or flags)".into(),
        ));
    }
    let mut records = data::load_dataset(Path::new(&cfg.data_dir))?;
    data::split_dataset(&mut records, cfg.labeled_fraction, cfg.seed)?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    let outcome = trainer::train(&cfg, &records, &out_dir)?;
    eprintln!(
        "finished {} epochs; best val dice {:.4} at epoch {}",
        cfg.epochs, outcome.best_val_dice, outcome.best_epoch
    );
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let (model, cfg) = trainer::load_checkpoint(&a.ckpt)?;
    let img = read_image(&a.input)?;
    let s = img.shape().to_vec();
    let x = img.reshape(&[1, 1, s[1], s[2]])?;
    let (shape, labels) = model.infer(&x)?;
    match a.out.extension().and_then(|e| e.to_str()) {
        Some("pgm") => {
            let scale = 255 / (cfg.num_classes - 1).max(1) as u32;
            let pixels: Vec<u8> = labels.iter().map(|&v| (v as u32 * scale) as u8).collect();
            data::write_pgm(&a.out, shape[2], shape[1], &pixels)?;
        }
        _ => {
            let vals: Vec<i64> = labels.iter().map(|&v| v as i64).collect();
            nten::write(&a.out, &nten::NtenArray::I64(shape[1..].to_vec(), vals))?;
        }
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (model, cfg) = trainer::load_checkpoint(&a.ckpt)?;
    let records = data::load_dataset(&a.data)?;
    let test: Vec<&data::SampleRecord> = records
        .iter()
        .filter(|r| r.split == data::Split::Test)
        .collect();
    if test.is_empty() {
        return Err(freqseg::Error::Config("dataset has no test records".into()));
    }
    let report = trainer::evaluate_model(&model, &test, cfg.batch_size, a.spacing)?;
    std::fs::write(&a.out, trainer::metrics_csv(&report))?;
    let mean = report.aggregate();
    eprintln!(
        "mean jaccard {:.2} dice {:.2} asd {:?} hd95 {:?}",
        mean.jaccard, mean.dice, mean.asd, mean.hd95
    );
    Ok(())
}

fn info(a: InfoArgs) -> Result<()> {
    let (model, cfg) = match (&a.ckpt, &a.config) {
        (Some(dir), _) => trainer::load_checkpoint(dir)?,
        (None, Some(cfg_path)) => {
            let cfg = TrainConfig::from_file(cfg_path)?;
            (XNetV2Model::new(cfg.model_config()?)?, cfg)
        }
        (None, None) => {
            let cfg = TrainConfig::default();
            (XNetV2Model::new(cfg.model_config()?)?, cfg)
        }
    };
    println!("encoder channels: {:?}", cfg.encoder_channels);
    println!("num classes: {}", cfg.num_classes);
    println!("input mode: {}", cfg.input_mode.name());
    let (lm, hm) = model.fusion_stages();
    println!("L&M fusion at encoder stages: {:?}", lm);
    println!("H&M fusion at encoder stages: {:?}", hm);
    println!();
    println!("{:<28} {:>12} {:>10}", "parameter", "shape", "count");
    for (name, p) in model.named_parameters() {
        println!("{:<28} {:>12} {:>10}", name, format!("{:?}", p.shape()), p.len());
    }
    println!();
    println!("sub-network M parameters: {}", model.net_m.num_parameters());
    println!("sub-network L parameters: {}", model.net_l.num_parameters());
    println!("sub-network H parameters: {}", model.net_h.num_parameters());
    println!("total parameters: {}", model.num_parameters());
    Ok(())
}
