use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ctta::config::{resolve_output, RunConfig, OUTPUT_ROOT_ENV};
use ctta::metrics::{self, render_table};
use ctta::runner::{self, RunOptions, SweepCell, SOURCE_FILE};

/// Online continual test-time adaptation on synthetic drifting streams.
#[derive(Parser)]
#[command(name = "ctta", version, after_help = format!("Relative output directories are placed under ${OUTPUT_ROOT_ENV} when it is set."))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source model and save it with its intrinsic graphs.
    Pretrain(Common),
    /// Adapt along the configured stream and write metrics.
    Run(RunArgs),
    /// Compare methods over a shared set of seeds.
    Ablate(AblateArgs),
    /// Vary lambda_crp, alpha and buffer capacity one at a time.
    Sweep(SweepArgs),
    /// Re-fold persisted step records into tables.
    Report {
        /// A run directory, or any directory containing run directories.
        dir: PathBuf,
    },
    /// Print the default configuration as TOML.
    DefaultConfig,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; defaults apply to anything it leaves out.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory (overrides run.output_dir).
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lambda_crp: Option<f64>,
    #[arg(long)]
    capacity: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    ema_momentum: Option<f64>,
    /// Stream mode: abrupt, gradual or cyclic.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    cycles: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    overrides: Overrides,
    /// Steps between checkpoints (0: only at the end).
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Write intrinsic and final buffer edge matrices.
    #[arg(long)]
    dump_edges: bool,
    /// Source checkpoint from `pretrain`; trained on the fly when absent.
    #[arg(long)]
    source: Option<PathBuf>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Checkpoint and stop after this many batches.
    #[arg(long)]
    stop_after: Option<u64>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    overrides: Overrides,
    /// Comma-separated methods (default: experiment.methods).
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Comma-separated seeds (default: experiment.seeds).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    alpha_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    capacity_grid: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut c = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        c.run.output_dir = out.clone();
    }
    if let Some(s) = common.seed {
        c.seed = s;
    }
    Ok(c)
}

fn apply(c: &mut RunConfig, o: &Overrides) {
    let a = &mut c.adaptation;
    if let Some(m) = &o.method {
        a.method = m.clone();
    }
    a.alpha = o.alpha.unwrap_or(a.alpha);
    a.lambda_crp = o.lambda_crp.unwrap_or(a.lambda_crp);
    a.capacity = o.capacity.unwrap_or(a.capacity);
    a.lr = o.lr.unwrap_or(a.lr);
    a.ema_momentum = o.ema_momentum.unwrap_or(a.ema_momentum);
    if let Some(m) = &o.mode {
        c.stream.mode = m.clone();
    }
    c.stream.cycles = o.cycles.unwrap_or(c.stream.cycles);
}

fn print_rows(dir: &Path) -> Result<()> {
    let text = std::fs::read_to_string(dir.join(metrics::SUMMARY_TXT))?;
    print!("{text}");
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(common) => {
            let config = load(&common)?;
            config.validate()?;
            let out = config.output_dir();
            std::fs::create_dir_all(&out)?;
            let bundle = runner::pretrain_source(&config)?;
            let path = out.join(SOURCE_FILE);
            bundle.artifact.save(&path)?;
            println!(
                "source model: held-out accuracy {:.4} after {} epochs -> {}",
                bundle.artifact.model.heldout_accuracy,
                bundle.artifact.model.epochs,
                path.display()
            );
        }
        Command::Run(args) => {
            let mut config = load(&args.common)?;
            apply(&mut config, &args.overrides);
            config.run.checkpoint_every = args.checkpoint_every.unwrap_or(config.run.checkpoint_every);
            config.run.dump_edges |= args.dump_edges;
            config.validate()?;
            let opts = RunOptions {
                resume: args.resume,
                stop_after: args.stop_after,
                extra_meta: Vec::new(),
            };
            let outcome = runner::run(&config, args.source.as_deref(), &opts)?;
            let out = config.output_dir();
            match outcome.summary {
                Some(_) => print_rows(&out)?,
                None => println!(
                    "stopped after {} batches; resume with --resume (output in {})",
                    outcome.records.len(),
                    out.display()
                ),
            }
        }
        Command::Ablate(args) => {
            let mut config = load(&args.common)?;
            apply(&mut config, &args.overrides);
            let methods = args.methods.unwrap_or_else(|| config.experiment.methods.clone());
            let seeds = args.seeds.unwrap_or_else(|| config.experiment.seeds.clone());
            let out = config.output_dir();
            runner::ablate(&config, &methods, &seeds, &out)?;
            print!("{}", std::fs::read_to_string(out.join(runner::ABLATION_TXT))?);
        }
        Command::Sweep(args) => {
            let mut config = load(&args.common)?;
            apply(&mut config, &args.overrides);
            let e = &mut config.experiment;
            if let Some(g) = args.lambda_grid {
                e.lambda_grid = g;
            }
            if let Some(g) = args.alpha_grid {
                e.alpha_grid = g;
            }
            if let Some(g) = args.capacity_grid {
                e.capacity_grid = g;
            }
            let seeds = args.seeds.unwrap_or_else(|| config.experiment.seeds.clone());
            let grid: Vec<SweepCell> = runner::sweep_cells(&config);
            let out = config.output_dir();
            let cells = runner::sweep(&config, &grid, &seeds, &out)?;
            for c in &cells {
                let (m, s) = c.mean_std();
                println!("{:<20} {:6.2} +- {:5.2}", c.name, 100.0 * m, 100.0 * s);
            }
            println!("-> {}", out.join(runner::SWEEP_CSV).display());
        }
        Command::Report { dir } => {
            let dir = resolve_output(&dir);
            let runs = runner::report(&dir).with_context(|| format!("reporting on {}", dir.display()))?;
            let rows: Vec<_> = runs.iter().map(|r| r.row.clone()).collect();
            print!("{}", render_table(&Vec::new(), &rows));
            for r in runs.iter().filter(|r| r.rounds.len() > 1) {
                let rounds: Vec<String> = r.rounds.iter().map(|(_, e)| format!("{:.2}", 100.0 * e)).collect();
                println!("{} rounds: {}", r.row.name, rounds.join(" "));
            }
        }
        Command::DefaultConfig => print!("{}", RunConfig::default().to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
