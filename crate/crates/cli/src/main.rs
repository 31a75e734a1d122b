use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use hdc_core::checkpoint;
use hdc_core::corpus::write_corpus;
use hdc_core::eval::{eval_corpus, evaluate_one, EvalOptions};
use hdc_core::pipeline::{run_stage, Dataset, Stage};
use hdc_core::{decode_image, encode_image, Bitstream, CodecConfig, Error, HdcModel, Image, MaskSchedule};

#[derive(Parser)]
#[command(name = "hdc", version, about = "Dual-stream ultra-low-bitrate image codec")]
struct Cli {
    /// Log progress to stderr (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one stage (or `all`), reading the previous stage's checkpoint from --out.
    Train(TrainArgs),
    /// Compress an image to a bitstream.
    Encode(EncodeArgs),
    /// Reconstruct an image from a bitstream.
    Decode(DecodeArgs),
    /// Encode, decode and score one image.
    Roundtrip(RoundtripArgs),
    /// Score every image in a directory under one or more schedules.
    Eval(EvalArgs),
    /// Write a synthetic training/evaluation corpus.
    GenCorpus(GenCorpusArgs),
    /// Print a configuration file.
    Config {
        /// The small single-core configuration instead of the full-size one.
        #[arg(long)]
        toy: bool,
    },
}

#[derive(Args)]
struct ModelArg {
    /// Checkpoint file, or a training directory (its latest stage is used).
    #[arg(short, long)]
    model: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Stage name or number 1-5, or `all`.
    #[arg(long)]
    stage: String,
    /// TOML configuration; defaults to the full-size codec.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of training images; synthetic images when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides the training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EncodeArgs {
    input: PathBuf,
    #[command(flatten)]
    model: ModelArg,
    #[arg(long, default_value = "NO_MASK")]
    schedule: MaskSchedule,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    input: PathBuf,
    #[command(flatten)]
    model: ModelArg,
    /// Seed of the decoder-side diffusion sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct RoundtripArgs {
    input: PathBuf,
    #[command(flatten)]
    model: ModelArg,
    #[arg(long, default_value = "NO_MASK")]
    schedule: MaskSchedule,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the reconstruction here.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Report bpp including the stream header.
    #[arg(long)]
    include_header_bpp: bool,
}

#[derive(Args)]
struct EvalArgs {
    dir: PathBuf,
    #[command(flatten)]
    model: ModelArg,
    /// Repeatable; all four schedules when absent.
    #[arg(long)]
    schedule: Vec<MaskSchedule>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where report.tsv and the plots go.
    #[arg(long)]
    out: PathBuf,
    /// Plot and summarize bpp including the stream header.
    #[arg(long)]
    include_header_bpp: bool,
}

#[derive(Args)]
struct GenCorpusArgs {
    out: PathBuf,
    #[arg(long, default_value_t = 24)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_MODEL: u8 = 3;

/// Usage errors that clap cannot catch (e.g. a bad stage name).
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return EXIT_USAGE;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => EXIT_USAGE,
        Some(
            Error::Shape(_)
            | Error::Range { .. }
            | Error::CorruptStream(_)
            | Error::Payload(_)
            | Error::Io(_)
            | Error::Image(_),
        ) => EXIT_DATA,
        Some(_) => EXIT_MODEL,
        None if err.downcast_ref::<std::io::Error>().is_some() => EXIT_DATA,
        None => EXIT_MODEL,
    }
}

fn load_model(path: &Path) -> anyhow::Result<HdcModel> {
    let file = if path.is_dir() {
        Stage::ALL
            .iter()
            .rev()
            .map(|&s| checkpoint::stage_file(path, s))
            .find(|p| p.exists())
            .ok_or_else(|| Error::Checkpoint(format!("no stage checkpoint in {}", path.display())))?
    } else {
        path.to_path_buf()
    };
    info!("loading {}", file.display());
    Ok(checkpoint::load(&file)?)
}

fn load_image(path: &Path, model: &HdcModel) -> anyhow::Result<Image> {
    let img = Image::load(path)?;
    let n = model.cfg.vq.patch_size;
    let cropped = img.crop_to_multiple(n)?;
    if cropped.dims() != img.dims() {
        warn!(
            "{}: cropped {:?} to {:?} (multiple of {n})",
            path.display(),
            img.dims(),
            cropped.dims()
        );
    }
    Ok(cropped)
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => CodecConfig::load(p)?,
        None => CodecConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    let stages: Vec<Stage> = if a.stage.eq_ignore_ascii_case("all") {
        Stage::ALL.to_vec()
    } else {
        vec![a.stage.parse().map_err(|_| Usage(format!("unknown stage '{}'", a.stage)))?]
    };
    let data = match &a.data {
        Some(dir) => {
            let (images, skipped) = hdc_core::eval::load_dir(dir, 1)?;
            if !skipped.is_empty() {
                warn!("{} unreadable files skipped", skipped.len());
            }
            if images.is_empty() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("no training images in {}", dir.display()),
                ))
                .into());
            }
            Dataset::Images(images.into_iter().map(|(_, i)| i).collect())
        }
        None => Dataset::Synthetic { seed: cfg.train.seed },
    };
    for stage in stages {
        let r = run_stage(&a.out, stage, &cfg, &data, a.steps)?;
        println!(
            "{stage}: {} steps, loss {:.5} -> {:.5}, saved {}",
            r.losses.len(),
            r.smoothed_start(),
            r.smoothed_end(),
            checkpoint::stage_file(&a.out, stage).display()
        );
    }
    Ok(())
}

fn encode(a: EncodeArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model.model)?;
    let x = load_image(&a.input, &model)?;
    let bs = encode_image(&x, &model, a.schedule)?;
    let bytes = bs.to_bytes()?;
    std::fs::write(&a.out, &bytes).with_context(|| format!("writing {}", a.out.display()))?;
    let (h, w) = x.dims();
    println!(
        "{}: {} bytes, {:.5} bpp ({} kept ids)",
        a.out.display(),
        bytes.len(),
        bytes.len() as f64 * 8.0 / (h * w) as f64,
        bs.masked.kept_ids.len()
    );
    Ok(())
}

fn decode(a: DecodeArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model.model)?;
    let bytes = std::fs::read(&a.input).map_err(Error::Io)?;
    let img = decode_image(&Bitstream::from_bytes(&bytes)?, &model, a.seed)?;
    img.save(&a.out)?;
    println!("{}: {}x{}", a.out.display(), img.width, img.height);
    Ok(())
}

fn roundtrip(a: RoundtripArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model.model)?;
    let x = load_image(&a.input, &model)?;
    let id = a.input.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let r = evaluate_one(&id, &x, &model, a.schedule, a.seed)?;
    if let Some(out) = &a.out {
        let bs = encode_image(&x, &model, a.schedule)?;
        decode_image(&bs, &model, a.seed)?.save(out)?;
    }
    println!(
        "{id}\t{}\tbpp {:.5}\tpsnr {:.3} dB\tperceptual {:.5}\t{:.0} ms",
        r.schedule,
        r.rate(a.include_header_bpp),
        r.psnr_db,
        r.perceptual,
        r.wall_time_ms
    );
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model.model)?;
    let schedules = if a.schedule.is_empty() {
        vec![
            MaskSchedule::NoMask,
            MaskSchedule::Keep1Of2,
            MaskSchedule::Keep1Of4,
            MaskSchedule::FullMask,
        ]
    } else {
        a.schedule.clone()
    };
    let opts = EvalOptions {
        seed: a.seed,
        include_header: a.include_header_bpp,
    };
    let report = eval_corpus(&a.dir, &model, &schedules, &opts, Some(&a.out))?;
    for (file, why) in &report.skipped {
        warn!("skipped {file}: {why}");
    }
    if report.is_empty() {
        warn!("no images evaluated in {}", a.dir.display());
        return Ok(());
    }
    println!("schedule\timages\tbpp\tpsnr_db\tperceptual");
    for s in &report.summaries {
        let bpp = if a.include_header_bpp { s.mean_bpp } else { s.mean_payload_bpp };
        println!(
            "{}\t{}\t{:.5}\t{:.3}\t{:.5}",
            s.schedule, s.count, bpp, s.mean_psnr_db, s.mean_perceptual
        );
    }
    println!("wrote {}", a.out.join("report.tsv").display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Roundtrip(a) => roundtrip(a),
        Command::Eval(a) => eval(a),
        Command::GenCorpus(a) => {
            let paths = write_corpus(&a.out, a.count, a.size, a.seed)?;
            println!("wrote {} images to {}", paths.len(), a.out.display());
            Ok(())
        }
        Command::Config { toy } => {
            let cfg = if toy { CodecConfig::toy() } else { CodecConfig::default() };
            print!("{}", cfg.to_toml_string()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
