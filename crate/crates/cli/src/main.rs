use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use difsolve_core::adjoint::{check_gradients, GradCheckSpec};
use difsolve_core::harness::{
    evaluate_checkpoint, generate_teacher, run_sweep, selftest, train_to_disk, Checkpoint, ExperimentConfig,
    TrainMode, WORKERS_ENV,
};

/// Learned few-step solvers for diffusion ODEs on analytic score models.
#[derive(Parser)]
#[command(name = "difsolve", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML); defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs, or evaluate despite a config-hash mismatch.
    #[arg(long)]
    force: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output.clone_from(o);
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Draw noise, solve it with the teacher, and write the dataset.
    GenerateTeacher(Common),
    /// Train a solver on the dataset and write a checkpoint and history CSV.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "s4s")]
        mode: TrainMode,
    },
    /// Compare a checkpoint with its untrained preset on fresh noise.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "s4s")]
        mode: TrainMode,
        /// Checkpoint to evaluate; defaults to the one `train` writes for `--mode`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the schedule × solver × NFE × mode grid from the config's sweep table.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, env = WORKERS_ENV)]
        workers: Option<usize>,
    },
    /// Compare adjoint gradients with finite differences on random problems.
    CheckGrad {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Run the built-in invariant checks.
    Selftest,
    /// Print the default config as TOML.
    DefaultConfig,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Exit code of a training run that stopped on a non-finite loss.
const DIVERGED: u8 = 3;

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenerateTeacher(common) => {
            let cfg = common.load()?;
            let s = generate_teacher(&cfg, common.force)?;
            println!("dataset   {}", cfg.dataset_path().display());
            println!("records   {} ({} train, {} validation)", s.train + s.validation, s.train, s.validation);
            println!("dim       {}", s.dim);
            println!("teacher   {:?}", s.teacher);
            println!("sha256    {}", s.checksum);
        }
        Command::Train { common, mode } => {
            if mode == TrainMode::Baseline {
                bail!("`baseline` is not a training mode");
            }
            let cfg = common.load()?;
            let art = train_to_disk(&cfg, mode, common.force)?;
            let st = &art.output.stats;
            println!("checkpoint  {}", cfg.checkpoint_path(mode).display());
            println!("history     {}", cfg.history_path(mode).display());
            println!("iterations  {}", st.iterations);
            println!("radius      {:.6}", st.radius);
            println!("validation  {:.6e} -> {:.6e}", st.initial_validation_loss, st.final_validation_loss);
            println!("projection  {} checks, {} violations", st.projection_checks, st.projection_violations);
            if let Some(d) = &art.output.diverged {
                eprintln!("training diverged at iteration {}: {}", d.iteration, d.detail);
                return Ok(ExitCode::from(DIVERGED));
            }
        }
        Command::Evaluate { common, mode, checkpoint } => {
            let cfg = common.load()?;
            let path = checkpoint.unwrap_or_else(|| cfg.checkpoint_path(mode));
            let ck = Checkpoint::load(&path)?;
            let table = evaluate_checkpoint(&cfg, &ck, common.force)?;
            std::fs::create_dir_all(&cfg.output).with_context(|| format!("creating {}", cfg.output.display()))?;
            let csv = cfg.output.join(format!("evaluation-{}.csv", ck.mode));
            table.write_csv(&csv)?;
            print!("{}", table.render());
            println!("wrote {}", csv.display());
        }
        Command::Sweep { common, workers } => {
            let cfg = common.load()?;
            let workers = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            if workers == 0 {
                bail!("{WORKERS_ENV} must be positive");
            }
            let report = run_sweep(&cfg, workers)?;
            print!("{}", report.table.render());
            println!(
                "{} cells computed, {} reused; wrote {}",
                report.computed,
                report.skipped,
                report.table_path.display()
            );
        }
        Command::CheckGrad { seed, instances, tolerance } => {
            let spec = GradCheckSpec { seed, instances, ..GradCheckSpec::default() };
            let r = check_gradients(&spec, tolerance)?;
            let m = r.max_rel;
            println!("instances  {}", r.instances);
            println!("max rel    coeffs {:.3e}  time {:.3e}  x_T {:.3e}", m.coeffs, m.time, m.x0);
            for f in &r.failures {
                println!("FAIL {f}");
            }
            if !r.passed() {
                println!("{} of {} instances above {tolerance:e}", r.failures.len(), r.instances);
                return Ok(ExitCode::FAILURE);
            }
            println!("all within {tolerance:e}");
        }
        Command::Selftest => {
            let results = selftest();
            for r in &results {
                println!("{} {:<22} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            if results.iter().any(|r| !r.passed) {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::DefaultConfig => print!("{}", ExperimentConfig::default().to_toml()?),
    }
    Ok(ExitCode::SUCCESS)
}
