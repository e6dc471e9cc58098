use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use lqe_core::io::{read_latent_file, write_latent_file};
use lqe_core::{
    noisy_score_correlation, score_curve, summarize, DdimSampler, Denoiser, DriftDenoiser, Engine, Error, Mode,
    PerfectTargetDenoiser, SchedulerConfig, TargetFamily, TargetSequence,
};
use rayon::prelude::*;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  usage error (bad flags or arguments)
  3  invalid configuration or parameter
  4  file could not be read or written
  5  malformed latent or trace file
  6  generation or scoring failed (a partial trace is still written)

Set LQE_LOG (e.g. LQE_LOG=info) to control log verbosity.";

#[derive(Parser)]
#[command(name = "lqe", version, about = "Latent-queue scheduler for frame-level autoregressive video diffusion")]
#[command(after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate frames with a toy denoiser and write latents, trace and metrics.
    #[command(after_help = EXIT_CODES)]
    Generate(GenerateArgs),
    /// Print the sliding consistency score curve of a latent file as CSV.
    #[command(after_help = EXIT_CODES)]
    Score(ScoreArgs),
    /// Correlate clean and noised score curves at several noise levels.
    #[command(after_help = EXIT_CODES)]
    Correlate(CorrelateArgs),
}

#[derive(Parser)]
struct ConfigArgs {
    /// TOML config; may name a `preset` and override any of its keys.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset used when no config file is given.
    #[arg(long, default_value = "videocrafter2-like")]
    preset: String,
}

impl ConfigArgs {
    fn load(&self) -> Result<SchedulerConfig, Error> {
        match &self.config {
            Some(path) => SchedulerConfig::from_file(path),
            None => SchedulerConfig::preset(&self.preset),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DenoiserKind {
    Perfect,
    Drift,
}

#[derive(Parser)]
struct GenerateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output prefix; writes PREFIX.migl, PREFIX.trace.jsonl,
    /// PREFIX.metrics.json and PREFIX.targets.migl.
    #[arg(long)]
    out: PathBuf,
    /// fifo, tta, tta+dce or stage2-only.
    #[arg(long)]
    mode: Option<Mode>,
    /// Seed override. Repeat to run several seeds; outputs then get a -s<seed> suffix.
    #[arg(long)]
    seed: Vec<u64>,
    /// Number of frames to generate (N).
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long, value_enum, default_value = "perfect")]
    denoiser: DenoiserKind,
    /// Per-frame drift probability for the drift denoiser.
    #[arg(long, default_value_t = 0.05)]
    drift_prob: f64,
    /// Drift offset as a multiple of the mean target frame norm.
    #[arg(long, default_value_t = 5.0)]
    drift_scale: f64,
    /// 1-based frame index where the target sequence jumps. Repeatable.
    #[arg(long)]
    jump: Vec<usize>,
    /// Worker threads for independent seeds (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Parser)]
struct ScoreArgs {
    /// MIGL latent file.
    #[arg(long)]
    latents: PathBuf,
    #[arg(long, default_value_t = 4)]
    f_eval: usize,
    #[arg(long, default_value_t = 8)]
    f_ref: usize,
    /// Write CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Parser)]
struct CorrelateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// MIGL file of clean frames; without it every trial draws a fresh
    /// sequence with one jump.
    #[arg(long)]
    targets: Option<PathBuf>,
    /// Noise levels, comma separated. Defaults to 0.2, 0.5 and 0.8 of T.
    #[arg(long, value_delimiter = ',')]
    levels: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    trials: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Length of generated sequences when no targets file is given.
    #[arg(long, default_value_t = 64)]
    frames: usize,
    /// Write CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parameter(_) => 3,
        Error::Io { .. } | Error::Stream(_) => 4,
        Error::Format { .. } | Error::Integrity(_) => 5,
        _ => 6,
    }
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_text(path: Option<&Path>, text: &str) -> Result<(), Error> {
    match path {
        Some(p) => fs::write(p, text).map_err(|source| Error::Io {
            path: p.to_path_buf(),
            source,
        }),
        None => io::stdout().lock().write_all(text.as_bytes()).map_err(Error::Stream),
    }
}

fn run_one(cfg: &SchedulerConfig, args: &GenerateArgs, prefix: &Path) -> Result<(), Error> {
    let family = TargetFamily {
        l: cfg.l,
        d: cfg.d,
        ..TargetFamily::default()
    };
    let n_targets = cfg.required_target_frames().max(20);
    let targets = Arc::new(TargetSequence::synthetic(&family, n_targets, &args.jump, cfg.seed)?);
    let schedule = cfg.schedule()?;
    let denoiser: Box<dyn Denoiser> = match args.denoiser {
        DenoiserKind::Perfect => Box::new(PerfectTargetDenoiser::new(targets.clone(), schedule, cfg.f0)),
        DenoiserKind::Drift => Box::new(DriftDenoiser::new(
            targets.clone(),
            schedule,
            cfg.f0,
            args.drift_prob,
            args.drift_scale * targets.mean_frame_norm(),
            cfg.seed,
        )?),
    };

    let trace_path = with_suffix(prefix, ".trace.jsonl");
    let mut engine = Engine::new(cfg.clone(), denoiser.as_ref())?;
    let frames = match engine.run() {
        Ok(frames) => frames,
        Err(e) => {
            engine.trace().write_file(&trace_path)?;
            return Err(e);
        }
    };
    write_latent_file(&with_suffix(prefix, ".migl"), &frames, cfg.l, cfg.d)?;
    write_latent_file(
        &with_suffix(prefix, ".targets.migl"),
        &targets.frames()[..frames.len()],
        cfg.l,
        cfg.d,
    )?;
    let trace = engine.into_trace();
    trace.write_file(&trace_path)?;
    let metrics = summarize(&trace)?;
    write_text(Some(&with_suffix(prefix, ".metrics.json")), &(metrics.to_json() + "\n"))?;
    info!(
        "{}: {} frames, {} denoiser calls, n_eval {}, n_corr {}",
        prefix.display(),
        metrics.frames,
        metrics.total_calls,
        metrics.n_eval,
        metrics.n_corr
    );
    Ok(())
}

fn cmd_generate(args: &GenerateArgs) -> Result<(), Error> {
    let mut base = args.config.load()?;
    if let Some(mode) = args.mode {
        base.mode = mode;
    }
    if let Some(n) = args.frames {
        base.n = n;
    }
    base.validate()?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    let seeds = if args.seed.is_empty() { vec![base.seed] } else { args.seed.clone() };
    if seeds.len() == 1 {
        let cfg = SchedulerConfig {
            seed: seeds[0],
            ..base
        };
        return run_one(&cfg, args, &args.out);
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = args.jobs {
        builder = builder.num_threads(jobs);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Parameter(format!("cannot start {:?} worker threads: {e}", args.jobs)))?;
    pool.install(|| {
        seeds.par_iter().try_for_each(|&seed| {
            let cfg = SchedulerConfig {
                seed,
                ..base.clone()
            };
            run_one(&cfg, args, &with_suffix(&args.out, &format!("-s{seed}")))
        })
    })
}

fn cmd_score(args: &ScoreArgs) -> Result<(), Error> {
    let file = read_latent_file(&args.latents)?;
    let curve = score_curve(&file.frames, file.l, file.d, args.f_eval, args.f_ref)?;
    if curve.is_empty() {
        warn!(
            "{} holds {} frames, fewer than f_eval + f_ref = {}; no scores",
            args.latents.display(),
            file.frames.len(),
            args.f_eval + args.f_ref
        );
    }
    let mut csv = String::from("position,score\n");
    for p in curve {
        csv.push_str(&format!("{},{}\n", p.position, p.score));
    }
    write_text(args.out.as_deref(), &csv)
}

fn cmd_correlate(args: &CorrelateArgs) -> Result<(), Error> {
    let cfg = args.config.load()?;
    let sampler = DdimSampler::new(cfg.schedule()?);
    let levels = if args.levels.is_empty() {
        [0.2, 0.5, 0.8]
            .iter()
            .map(|f| (f * cfg.t as f64).round() as usize)
            .collect()
    } else {
        args.levels.clone()
    };
    if let Some(&bad) = levels.iter().find(|&&l| l > cfg.t) {
        return Err(Error::Parameter(format!("level {bad} exceeds T = {}", cfg.t)));
    }
    let fixed = match &args.targets {
        Some(path) => {
            let file = read_latent_file(path)?;
            Some(TargetSequence::from_frames(file.frames, file.l, file.d)?)
        }
        None => None,
    };
    let family = TargetFamily {
        l: cfg.l,
        d: cfg.d,
        ..TargetFamily::default()
    };
    let rows = (0..args.trials)
        .into_par_iter()
        .map(|trial| {
            let generated;
            let seq = match &fixed {
                Some(seq) => seq,
                None => {
                    generated = TargetSequence::jump_trial(&family, args.frames, args.seed, u64::from(trial))?;
                    &generated
                }
            };
            noisy_score_correlation(seq, &levels, &sampler, args.seed, trial, cfg.f_eval, cfg.f_ref)
                .map(|rs| (trial, rs))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let mut csv = String::from("level,trial,r\n");
    for (k, &level) in levels.iter().enumerate() {
        for (trial, rs) in &rows {
            csv.push_str(&format!("{level},{trial},{}\n", rs[k].1));
        }
    }
    write_text(args.out.as_deref(), &csv)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LQE_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Score(args) => cmd_score(args),
        Command::Correlate(args) => cmd_correlate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string();
            eprintln!("error: {msg}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                let cause = s.to_string();
                if !msg.contains(&cause) {
                    eprintln!("  caused by: {cause}");
                }
                source = s.source();
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
