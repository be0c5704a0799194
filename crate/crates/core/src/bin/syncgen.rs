//! Command line front end: one subcommand per pipeline stage.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use syncgen::pipeline::{self, Overrides, RunConfig};
use syncgen::Result;

#[derive(Parser)]
#[command(name = "syncgen", version, about = "Video-conditioned audio token generation on a synthetic world")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces the run seed and every stage seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite a non-empty dataset directory.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true)]
    gamma: Option<f64>,
    #[arg(long, global = true)]
    threshold: Option<f64>,
    #[arg(long = "n-gen", global = true)]
    n_gen: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the training and test clips plus their manifests.
    Synth,
    /// Fit the residual codebooks.
    CodecFit {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train a model, optionally continuing the run's checkpoint.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
    },
    /// Generate audio for the clips of a manifest.
    Generate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Clips to generate for; 0 means all.
        #[arg(long, default_value_t = 0)]
        limit: usize,
    },
    /// Filter a manifest by audio-visual similarity.
    Curate {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score generations against the test clips.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Conditioning, guidance-scale and curation-threshold sweeps.
    Ablate {
        /// Sweep endpoints only, with a quarter of the budget.
        #[arg(long)]
        reduced: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.common.config.as_deref())?;
    cfg.apply(&Overrides {
        seed: cli.common.seed,
        out: cli.common.out.clone(),
        gamma: cli.common.gamma,
        threshold: cli.common.threshold,
        n_gen: cli.common.n_gen,
    });
    cfg.validate()?;
    let dirs = cfg.dirs();
    match cli.cmd {
        Cmd::Synth => {
            let out = pipeline::cmd_synth(&cfg, cli.common.force)?;
            println!("{}", out.train_manifest.display());
        }
        Cmd::CodecFit { manifest } => {
            let m = manifest.unwrap_or_else(|| dirs.train_manifest());
            pipeline::cmd_codec_fit(&cfg, &m)?;
            println!("{}", dirs.codebooks().display());
        }
        Cmd::Train { manifest, resume } => {
            let m = manifest.unwrap_or_else(|| dirs.train_manifest());
            let out = pipeline::cmd_train(&cfg, &m, resume)?;
            if let Some(l) = out.final_loss {
                println!("final loss {l:.6}");
            }
            println!("{}", out.checkpoint.display());
        }
        Cmd::Generate {
            checkpoint,
            manifest,
            limit,
        } => {
            let c = checkpoint.unwrap_or_else(|| dirs.checkpoint());
            let m = manifest.unwrap_or_else(|| dirs.test_manifest());
            for w in pipeline::cmd_generate(&cfg, &c, &m, limit)? {
                println!("{}", w.display());
            }
        }
        Cmd::Curate { manifest } => {
            let m = manifest.unwrap_or_else(|| dirs.train_manifest());
            print!("{}", pipeline::cmd_curate(&cfg, &m)?.to_csv());
        }
        Cmd::Eval { checkpoint, manifest } => {
            let c = checkpoint.unwrap_or_else(|| dirs.checkpoint());
            let m = manifest.unwrap_or_else(|| dirs.test_manifest());
            print!("{}", pipeline::cmd_eval(&cfg, &c, &m)?.aggregate_csv());
        }
        Cmd::Ablate { reduced } => {
            cfg.ablate.reduced |= reduced;
            let out = pipeline::cmd_ablate(&cfg)?;
            for p in [out.conditioning, out.cfg_scale, out.curation] {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
