use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fgslam::cli::{cmd_eval, cmd_run, cmd_simulate, RunConfig};

#[derive(Parser)]
#[command(name = "fgslam", version, about = "Dense monocular SLAM on synthetic sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sequence.
    Simulate {
        #[command(flatten)]
        opts: Opts,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the pipeline on a sequence directory.
    Run {
        sequence: PathBuf,
        #[command(flatten)]
        opts: Opts,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a run directory with its sequence and print the metrics.
    Eval {
        run: PathBuf,
        sequence: PathBuf,
        #[command(flatten)]
        opts: Opts,
        /// Where to write the metrics report; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Opts {
    /// `key = value` file applied on top of the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Force single-threaded execution.
    #[arg(long)]
    deterministic: bool,
    /// Disable global loop closure.
    #[arg(long)]
    disable_loop_closure: bool,
    #[arg(long)]
    disable_local_loop: bool,
    /// Disable the reprojection factor in tracking.
    #[arg(long)]
    disable_rp: bool,
    /// Disable the feature-metric factor in tracking and mapping.
    #[arg(long)]
    disable_fm: bool,
}

impl Opts {
    fn config(&self) -> fgslam::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
        if self.deterministic {
            cfg.deterministic = true;
        }
        if self.disable_loop_closure {
            cfg.slam.global_loop = false;
        }
        if self.disable_local_loop {
            cfg.slam.local_loop = false;
        }
        if self.disable_rp {
            cfg.slam.tracking.use_rp = false;
        }
        if self.disable_fm {
            cfg.slam.tracking.use_fm = false;
            cfg.slam.mapping.use_fm = false;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> fgslam::Result<()> {
    match cli.command {
        Command::Simulate { opts, out } => {
            cmd_simulate(&opts.config()?, &out)?;
            println!("wrote sequence to {}", out.display());
        }
        Command::Run { sequence, opts, out } => {
            let s = cmd_run(&sequence, &opts.config()?, &out)?;
            println!(
                "{} frames, {} keyframes, {} local and {} global loops, {} lost in {:.1} s",
                s.stats.frames, s.stats.keyframes, s.stats.local_loops, s.stats.global_loops, s.stats.lost, s.seconds
            );
        }
        Command::Eval {
            run,
            sequence,
            opts,
            out,
        } => {
            let report = cmd_eval(&run, &sequence, &opts.config()?)?;
            if let Some(out) = out {
                write_report(&out, &report.to_text())?;
            }
            print!("{}", report.to_table());
        }
    }
    Ok(())
}

fn write_report(path: &Path, text: &str) -> fgslam::Result<()> {
    std::fs::write(path, text).map_err(|e| fgslam::Error::Config(format!("cannot write {}: {e}", path.display())))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
