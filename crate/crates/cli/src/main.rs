use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use edu_core::pipeline::{self, Layout, RunConfig, TrainOptions};
use edu_core::Error;

#[derive(Parser)]
#[command(name = "edu", version, about = "Compressed-history student modeling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON); built-in desk defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory shared by all pipeline steps.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Candidate-list sizes, e.g. `5,10,25,50`.
    #[arg(long)]
    k: Option<String>,
    /// `recommend`, `trace`, `timecost`, `answer`, a comma list, or `all`.
    #[arg(long)]
    task: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved run configuration as JSON.
    Config(Common),
    /// Generate a synthetic cohort and its ground-truth file.
    Simulate(Common),
    /// Build train/test task files and scan them for leakage.
    BuildTasks(Common),
    /// Train a model on the train-side tasks.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the last checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many total steps (the schedule still spans the full run).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate the trained model on the test-side tasks.
    Eval(Common),
    /// Activation and parameter memory estimates.
    Vram {
        /// Shape file (JSON) instead of the built-in reference models.
        #[arg(long)]
        shapes: Option<PathBuf>,
        /// Check the reference grid against the reference figures; exit 2 on mismatch.
        #[arg(long)]
        golden: bool,
        #[arg(long)]
        csv: bool,
    },
    /// Train and evaluate one model per compression-token count.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Compression-token counts, e.g. `1,2,3`.
        #[arg(long)]
        m: Option<String>,
    },
}

fn resolve(c: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(k) = &c.k {
        cfg.ks = pipeline::parse_list(k)?;
    }
    if let Some(t) = &c.task {
        cfg.tasks = pipeline::parse_task_selection(t)?;
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

fn progress(step: usize, total: usize, loss: f64) {
    if step.is_multiple_of(50) || step + 1 == total {
        eprintln!("step {step:>5}/{total}  loss {loss:.4}");
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Config(c) => {
            println!("{}", serde_json::to_string_pretty(&resolve(&c)?)?);
        }
        Command::Simulate(c) => {
            let cfg = resolve(&c)?;
            let stats = pipeline::cmd_simulate(&cfg, &Layout::new(&c.out))?;
            print!("{}", stats.render());
        }
        Command::BuildTasks(c) => {
            let cfg = resolve(&c)?;
            let s = pipeline::cmd_build_tasks(&cfg, &Layout::new(&c.out))?;
            for (side, counts) in [("train", &s.train), ("test", &s.test)] {
                for (file, n) in counts {
                    println!("{side:<5} {file:<20} {n}");
                }
            }
            println!(
                "leakage: {} instances checked, {} violations",
                s.leakage.instances_checked, s.leakage.violations
            );
        }
        Command::Train {
            common,
            resume,
            stop_after,
        } => {
            let cfg = resolve(&common)?;
            let total = cfg.train.steps;
            let s = pipeline::cmd_train(
                &cfg,
                &Layout::new(&common.out),
                TrainOptions { resume, stop_after },
                |l| progress(l.step, total, l.loss),
            )?;
            println!(
                "trained {} steps ({} parameters, vocabulary {}); final loss {}",
                s.steps_done,
                s.parameters,
                s.vocab_size,
                s.last_loss.map_or("-".into(), |l| format!("{l:.4}"))
            );
        }
        Command::Eval(c) => {
            let cfg = resolve(&c)?;
            let report = pipeline::cmd_eval(&cfg, &Layout::new(&c.out))?;
            print!("{}", report.render());
        }
        Command::Vram { shapes, golden, csv } => {
            let out = pipeline::cmd_vram(shapes.as_deref(), golden, csv)?;
            print!("{}", out.text);
            if !out.passed {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Sweep { common, m } => {
            let mut cfg = resolve(&common)?;
            if let Some(m) = m {
                cfg.sweep_m = pipeline::parse_list(&m)?;
            }
            let total = cfg.train.steps;
            let rows = pipeline::cmd_sweep(&cfg, &Layout::new(&common.out), |m, l| {
                if l.step % 50 == 0 || l.step + 1 == total {
                    eprintln!("m={m} step {:>5}/{total}  loss {:.4}", l.step, l.loss);
                }
            })?;
            print!("{}", pipeline::render_sweep(&rows));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
