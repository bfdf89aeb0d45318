use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dmffn::checkpoint::Checkpoint;
use dmffn::config::RunConfig;
use dmffn::data::{degrade, list_pngs, make_pairs, FloatImage, ImageBuffer, PairOptions};
use dmffn::gradsuite;
use dmffn::metrics::{evaluate, BicubicUpscaler, Upscaler};
use dmffn::train::{format_loss_log, train, Adam};
use dmffn::{build_model, Element, Model};

#[derive(Parser)]
#[command(
    name = "dmffn",
    version,
    about = "Lightweight dual-path image super-resolution"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the PNGs in --hr-dir; writes a checkpoint and loss log to --out.
    Train(TrainArgs),
    /// Score a checkpoint (or plain bicubic without one) on the PNGs in --hr-dir.
    Eval(EvalArgs),
    /// Upscale one PNG or a directory of PNGs.
    Infer(InferArgs),
    /// Compare analytic gradients with finite differences for every op and block.
    Gradcheck(GradcheckArgs),
    /// Print the parameter count of a configuration.
    Params(ModelArgs),
    /// Write bicubic-downsampled copies of the PNGs in --hr-dir.
    Downsample(DownsampleArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Args)]
struct ModelArgs {
    /// `key = value` file with model and training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_scale)]
    scale: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    hr_dir: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Resume from this checkpoint instead of a fresh model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Total steps, overriding the config.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    hr_dir: PathBuf,
    /// Needed without --checkpoint; must agree with it otherwise.
    #[arg(long, value_parser = parse_scale)]
    scale: Option<usize>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Trained weights; without them a freshly initialised model is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Low-resolution PNG or directory of PNGs.
    #[arg(long)]
    lr: PathBuf,
    /// Output PNG, or directory when --lr is a directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "f64")]
    precision: Precision,
    /// Also write the table here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct DownsampleArgs {
    #[arg(long)]
    hr_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_scale)]
    scale: usize,
}

fn parse_scale(s: &str) -> std::result::Result<usize, String> {
    match s {
        "2" | "3" | "4" => Ok(s.parse().expect("digit")),
        _ => Err(format!("scale must be 2, 3 or 4, got '{s}'")),
    }
}

fn load_config(args: &ModelArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.scale {
        cfg.model.scale = s;
    }
    if let Some(seed) = args.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn load_model<T: Element>(path: &Path) -> Result<(Model<T>, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let model = ckpt.to_model()?;
    Ok((model, ckpt))
}

fn run_train<T: Element>(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.model)?;
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
    }
    let (mut model, mut adam) = match &args.checkpoint {
        Some(p) => {
            let (model, ckpt): (Model<T>, _) = load_model(p)?;
            if args.model.scale.is_some_and(|s| s != model.config.scale) {
                bail!(
                    "--scale {} disagrees with the checkpoint's scale {}",
                    args.model.scale.unwrap_or(0),
                    model.config.scale
                );
            }
            let adam = match &ckpt.optimizer {
                Some(state) => Adam::from_state(state, &cfg.train),
                None => Adam::from_config(&model.params, &cfg.train),
            };
            (model, adam)
        }
        None => {
            let model = build_model::<T>(&cfg.model)?;
            let adam = Adam::from_config(&model.params, &cfg.train);
            (model, adam)
        }
    };
    let t = &cfg.train;
    let opts = PairOptions {
        scale: model.config.scale,
        patch: t.patch,
        stride: t.stride,
        augment: t.augment,
        seed: t.seed,
    };
    let mut stream = make_pairs(&args.hr_dir, opts)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let ckpt_path = args.out.join("model.ckpt");
    let log_path = args.out.join("loss.log");
    let first_step = adam.step as usize + 1;
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(args.checkpoint.is_some())
        .truncate(args.checkpoint.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    log::info!(
        "training {} parameters on {} patches per epoch, steps {first_step}..={}",
        model.param_count(),
        stream.epoch_len(),
        t.steps
    );

    let start = Instant::now();
    let history = train(&mut model, &mut adam, &mut stream, t, |info, m, a| {
        log.write_all(format_loss_log(info.step, &[info.loss]).as_bytes())
            .map_err(|e| dmffn::Error::Data(format!("writing {}: {e}", log_path.display())))?;
        if info.step % 50 == 0 {
            log::info!(
                "step {} loss {:.5} lr {:.2e} ({:.0}s)",
                info.step,
                info.loss,
                info.lr,
                start.elapsed().as_secs_f64()
            );
        }
        if info.step % t.decay_every == 0 {
            Checkpoint::from_model(m, Some(a.to_state())).save(&ckpt_path)?;
        }
        Ok(())
    })?;
    Checkpoint::from_model(&model, Some(adam.to_state())).save(&ckpt_path)?;
    if let Some(last) = history.last() {
        log::info!("finished at step {} with loss {last:.5}", adam.step);
    }
    println!("{}", ckpt_path.display());
    Ok(())
}

fn run_eval<T: Element>(args: &EvalArgs) -> Result<()> {
    let report = match &args.checkpoint {
        Some(p) => {
            let (model, _): (Model<T>, _) = load_model(p)?;
            if args.scale.is_some_and(|s| s != model.config.scale) {
                bail!(
                    "--scale disagrees with the checkpoint's scale {}",
                    model.config.scale
                );
            }
            evaluate(&model, &args.hr_dir)?
        }
        None => {
            let Some(scale) = args.scale else {
                bail!("eval needs --checkpoint or --scale");
            };
            evaluate(&BicubicUpscaler { scale }, &args.hr_dir)?
        }
    };
    let csv = report.to_csv();
    match &args.report {
        Some(p) => fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    log::info!(
        "mean PSNR {:.3} dB, SSIM {:.4}",
        report.mean_psnr,
        report.mean_ssim
    );
    Ok(())
}

fn upscale_file(model: &dyn Upscaler, src: &Path, dst: &Path) -> Result<()> {
    let lr = ImageBuffer::read(src)?.to_float().to_rgb();
    let sr = model.upscale(&lr)?;
    sr.to_buffer().write(dst)?;
    Ok(())
}

fn run_infer<T: Element>(args: &InferArgs) -> Result<()> {
    let model: Model<T> = match &args.checkpoint {
        Some(p) => {
            let (model, _) = load_model(p)?;
            if args.model.scale.is_some_and(|s| s != model.config.scale) {
                bail!(
                    "--scale disagrees with the checkpoint's scale {}",
                    model.config.scale
                );
            }
            model
        }
        None => {
            log::warn!("no --checkpoint given; using untrained weights");
            build_model(&load_config(&args.model)?.model)?
        }
    };
    if args.lr.is_dir() {
        fs::create_dir_all(&args.out)
            .with_context(|| format!("creating {}", args.out.display()))?;
        for src in list_pngs(&args.lr)? {
            let name = src.file_name().expect("listed file");
            upscale_file(&model, &src, &args.out.join(name))?;
        }
    } else {
        upscale_file(&model, &args.lr, &args.out)?;
    }
    Ok(())
}

/// Bound for 32-bit backward passes checked against 64-bit differences.
const F32_TOLERANCE: f64 = 1e-2;

/// Returns whether every check passed.
fn run_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let reports = match args.precision {
        Precision::F64 => gradsuite::run_suite::<f64>(1e-4, 1e-4)?,
        Precision::F32 => gradsuite::run_suite_against_f64::<f32>(1e-4, F32_TOLERANCE)?,
    };
    let mut table = format!(
        "{:<28} {:>12} {:>10} result\n",
        "op", "rel_error", "tolerance"
    );
    for r in &reports {
        table.push_str(&format!("{r}\n"));
    }
    print!("{table}");
    if let Some(p) = &args.report {
        fs::write(p, &table).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(reports.iter().all(|r| r.passed))
}

fn run_downsample(args: &DownsampleArgs) -> Result<()> {
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    for src in list_pngs(&args.hr_dir)? {
        let hr: FloatImage = ImageBuffer::read(&src)?.to_float().to_rgb();
        let (_, lr) = degrade(&hr, args.scale)?;
        lr.to_buffer()
            .write(&args.out.join(src.file_name().expect("listed file")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    use Precision::*;
    match cli.command {
        Command::Train(a) => match a.precision {
            F32 => run_train::<f32>(&a),
            F64 => run_train::<f64>(&a),
        }?,
        Command::Eval(a) => match a.precision {
            F32 => run_eval::<f32>(&a),
            F64 => run_eval::<f64>(&a),
        }?,
        Command::Infer(a) => match a.precision {
            F32 => run_infer::<f32>(&a),
            F64 => run_infer::<f64>(&a),
        }?,
        Command::Gradcheck(a) => return run_gradcheck(&a),
        Command::Params(a) => {
            let cfg = load_config(&a)?;
            println!("{}", build_model::<f32>(&cfg.model)?.param_count());
        }
        Command::Downsample(a) => run_downsample(&a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
