use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use lpnlab::experiment::{self, parse_config};
use lpnlab::models::Classifier;
use lpnlab::render::{self, Bounds};
use lpnlab::{gradcheck, Error};

#[derive(Parser)]
#[command(name = "lpnlab", version, about = "lp-constrained softmax experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write CSVs, images and a manifest.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; must be empty or absent.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; LPNLAB_THREADS takes precedence.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Check every analytic gradient against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        seeds: u64,
    },
    /// Render a 2-D checkpoint's decision regions as a PGM image.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = render::DEFAULT_RESOLUTION)]
        resolution: usize,
    },
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Config(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out, seed, jobs } => {
            let mut cfg = match parse_config(&config) {
                Ok(c) => c,
                Err(e) => return fail(e.into()),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let jobs = experiment::resolve_jobs(jobs);
            match experiment::run(&cfg, &out, jobs) {
                Ok(m) => {
                    for s in &m.summary {
                        println!("{:<40} {:.6}  [{:.6}, {:.6}]", s.metric, s.mean, s.ci_low, s.ci_high);
                    }
                    println!("{} artifacts in {}", m.artifacts.len(), out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Gradcheck { seeds } => {
            let start = Instant::now();
            let results = match gradcheck::full_suite(seeds) {
                Ok(r) => r,
                Err(e) => return fail(e),
            };
            let mut ok = true;
            for r in &results {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                ok &= r.passed();
                println!("{verdict:<4} {:<32} cases={:<4} worst={:.3e}", r.name, r.cases, r.worst);
            }
            println!("{} checks in {:.2?}", results.len(), start.elapsed());
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Command::Render {
            checkpoint,
            out,
            resolution,
        } => {
            let result = Classifier::load(&checkpoint).and_then(|c| {
                let grid = render::decision_grid(&c, c.spec().num_classes, Bounds::default(), resolution)?;
                render::write_pgm(&grid, &out)
            });
            match result {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(e),
            }
        }
    }
}
