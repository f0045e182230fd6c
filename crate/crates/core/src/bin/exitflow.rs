use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use exitflow::config::{InitSpec, PipelineConfig};
use exitflow::pipeline::{self, EvalSpec, Run, Variant};
use exitflow::{Error, Result};

#[derive(Parser)]
#[command(name = "exitflow", version, about = "Learn SDE flow maps with exits from bounded domains")]
struct Cli {
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` and $EXITFLOW_OUT.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// full | all-trajectories | only-confined
    #[arg(long, default_value = "full")]
    variant: String,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the ground-truth ensemble.
    SimulateTruth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        /// Fixed start, comma separated.
        #[arg(long)]
        x0: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate (or read) training trajectories and segment them.
    BuildDataset {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        data_in: Option<PathBuf>,
        #[arg(long)]
        data_out: Option<PathBuf>,
    },
    /// Train the exit-probability model.
    TrainExit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Label confined transitions with the reverse ODE.
    Label {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        knn: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the one-step generator on labeled triples.
    TrainGenerator {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Generate surrogate trajectories.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        exit_model: Option<PathBuf>,
        #[arg(long)]
        gen_model: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        x0: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute one table, curve or grid from existing artifacts.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// table1 | kl-decay | exit-grid | exit-rate-curve | distributions | runaway | timing
        #[arg(long)]
        spec: String,
    },
    /// Run every stage and the benchmark's evaluations.
    Repro {
        /// brownian1d | cellular2d | runaway3d
        benchmark: String,
        /// Use this configuration instead of the checked-in one.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn parse_x0(s: &str) -> Result<InitSpec> {
    let x = s
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| Error::config(format!("--x0 {s:?}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(InitSpec::Fixed { x })
}

fn open(common: &Common, edit: impl FnOnce(&mut PipelineConfig) -> Result<()>) -> Result<Run> {
    let mut cfg = PipelineConfig::load(&common.config)?;
    edit(&mut cfg)?;
    let cfg = cfg.finish()?;
    let run = Run::new(cfg, Variant::parse(&common.variant)?);
    Ok(match &common.out_dir {
        Some(d) => run.with_dir(d.clone()),
        None => run,
    })
}

fn report(p: &Path) {
    println!("{}", p.display());
}

fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::SimulateTruth { common, n, x0, out } => {
            let run = open(&common, |c| {
                if let Some(n) = n {
                    c.simulation.n_truth = n;
                }
                if let Some(x) = &x0 {
                    c.simulation.truth_init = parse_x0(x)?;
                }
                Ok(())
            })?;
            report(&run.simulate_truth(out.as_deref())?);
        }
        Command::BuildDataset { common, n, data_in, data_out } => {
            let run = open(&common, |c| {
                if let Some(n) = n {
                    c.simulation.n_train = n;
                }
                Ok(())
            })?;
            report(&run.build_dataset(data_in.as_deref(), data_out.as_deref())?);
        }
        Command::TrainExit { common, data, out, epochs } => {
            let run = open(&common, |c| {
                if let Some(e) = epochs {
                    c.exit.train.epochs = e;
                }
                Ok(())
            })?;
            report(&run.train_exit(data.as_deref(), out.as_deref())?);
        }
        Command::Label { common, data, out, knn, steps } => {
            let run = open(&common, |c| {
                if let Some(k) = knn {
                    c.label.k_nn = k;
                }
                if let Some(k) = steps {
                    c.label.k_steps = k;
                }
                Ok(())
            })?;
            report(&run.label(data.as_deref(), out.as_deref())?);
        }
        Command::TrainGenerator { common, data, out, epochs } => {
            let run = open(&common, |c| {
                if let Some(e) = epochs {
                    c.generator.train.epochs = e;
                }
                Ok(())
            })?;
            report(&run.train_generator(data.as_deref(), out.as_deref())?);
        }
        Command::Generate {
            common,
            exit_model,
            gen_model,
            n,
            x0,
            out,
        } => {
            let run = open(&common, |c| {
                if let Some(n) = n {
                    c.sampler.n = n;
                }
                if let Some(x) = &x0 {
                    c.sampler.init = Some(parse_x0(x)?);
                }
                Ok(())
            })?;
            report(&run.generate(exit_model.as_deref(), gen_model.as_deref(), out.as_deref())?);
        }
        Command::Evaluate { common, spec } => {
            let run = open(&common, |_| Ok(()))?;
            let out = run.evaluate(EvalSpec::parse(&spec)?)?;
            for f in &out.files {
                report(f);
            }
            println!("{}", serde_json::to_string_pretty(&out.summary).expect("summary serializes"));
        }
        Command::Repro {
            benchmark,
            config,
            scale,
            out_dir,
        } => {
            let cfg = match config {
                Some(p) => PipelineConfig::load(&p)?,
                None => pipeline::builtin_config(&benchmark)?,
            };
            if cfg.problem.name() != benchmark {
                return Err(Error::config(format!("configuration is for {}, not {benchmark}", cfg.problem.name())));
            }
            let cfg = cfg.scaled(scale)?;
            let dir = out_dir.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| cfg.output_dir());
            for f in pipeline::repro(cfg, &dir)? {
                report(&f);
            }
            report(&dir.join("repro.manifest.json"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
