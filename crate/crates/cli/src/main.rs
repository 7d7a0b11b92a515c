use std::path::PathBuf;
use std::process::ExitCode;

use bood_cli::commands::{self, CliError, CliResult, Context, PlotKind};
use bood_cli::config::{ConfigError, RunConfig};
use bood_cli::sweep::SweepParam;
use bood_core::par::Exec;
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "bood", version, about = "Boundary-based outlier synthesis and energy-regularized OOD detection")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for the per-feature loops; 1 runs sequentially.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override a config key, e.g. `--set detector.beta=1.0`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate (or ingest) the ID splits and OOD test sets.
    GenData,
    /// Build anchors and train the latent encoder.
    TrainEncoder,
    /// Estimate the boundary distance of every training feature.
    Distances,
    /// Keep the closest r% of crossed features.
    Select,
    /// Push the selected features past the boundary.
    Synthesize,
    /// Map synthesized features into the detector's input space.
    Decode,
    /// Train the energy-regularized detector.
    TrainDetector,
    /// Score the ID test set and the OOD test sets.
    Eval,
    /// Run every stage and write the manifest and plots.
    RunAll,
    /// One full run per value of a single hyperparameter.
    Sweep {
        /// alpha, c, r, beta or K.
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Render an SVG from existing artifacts.
    Plot {
        #[arg(long, value_enum)]
        kind: PlotKind,
        /// Scores CSV (score-hist) or sweep JSON (sweep-line).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn resolve(cli: &Cli) -> CliResult<Context> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(out) = &cli.out {
        let s = toml::Value::String(out.to_string_lossy().into_owned()).to_string();
        overrides.push(format!("output_dir={s}"));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let exec = match cli.threads {
        Some(0) => return Err(ConfigError::Invalid("--threads must be at least 1".into()).into()),
        Some(1) => Exec::Sequential,
        Some(n) => {
            configure_pool(n)?;
            Exec::default()
        }
        None => Exec::default(),
    };
    Ok(Context::new(cfg, exec))
}

#[cfg(feature = "parallel")]
fn configure_pool(n: usize) -> CliResult<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| ConfigError::Invalid(format!("cannot start {n} threads: {e}")).into())
}

#[cfg(not(feature = "parallel"))]
fn configure_pool(_n: usize) -> CliResult<()> {
    Ok(())
}

fn print_metrics(label: &str, report: &bood_core::eval::MetricsReport) {
    println!("{label}: id_acc={:.4}", report.id_acc);
    for s in &report.sets {
        println!("  {:<18} fpr95={:.4} auroc={:.4}", s.name, s.fpr95, s.auroc);
    }
    if let Some(a) = &report.average {
        println!("  {:<18} fpr95={:.4} auroc={:.4}", "average", a.fpr95, a.auroc);
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let ctx = resolve(&cli)?;
    match cli.command {
        Command::GenData => {
            let d = commands::cmd_gen_data(&ctx)?;
            println!("train={} test={} ood_sets={}", d.train.len(), d.test.len(), d.ood.len());
        }
        Command::TrainEncoder => {
            commands::cmd_train_encoder(&ctx)?;
            println!("encoder written to {}", ctx.layout.encoder().display());
        }
        Command::Distances => {
            let t = commands::cmd_distances(&ctx)?;
            println!("features={} never_crossed={} mean_k={:?}", t.records.len(), t.never_crossed(), t.mean_steps());
        }
        Command::Select => println!("selected={}", commands::cmd_select(&ctx)?.len()),
        Command::Synthesize => {
            let s = commands::cmd_synthesize(&ctx)?;
            println!("outliers={} flipped_back={} failures={}", s.outliers, s.flipped_back, s.failures.len());
        }
        Command::Decode => println!("decoded={}", commands::cmd_decode(&ctx)?),
        Command::TrainDetector => {
            commands::cmd_train_detector(&ctx)?;
            println!("detector written to {}", ctx.layout.backbone().display());
        }
        Command::Eval => {
            let e = commands::cmd_eval(&ctx)?;
            print_metrics("detector", &e.detector);
            print_metrics("energy", &e.energy);
            print_metrics("msp", &e.msp);
        }
        Command::RunAll => {
            let (m, _) = commands::cmd_run_all(&ctx)?;
            print_metrics("detector", &m.metrics.detector);
            println!("manifest: {}", ctx.layout.manifest().display());
        }
        Command::Sweep { param, values } => {
            for r in commands::cmd_sweep(&ctx, param, values)? {
                match &r.error {
                    None => println!(
                        "{param}={:<8} fpr95={:.4} auroc={:.4} id_acc={:.4} mean_k={:?}",
                        r.value,
                        r.fpr95_avg.unwrap_or(f64::NAN),
                        r.auroc_avg.unwrap_or(f64::NAN),
                        r.id_acc.unwrap_or(f64::NAN),
                        r.mean_k
                    ),
                    Some(e) => println!("{param}={:<8} failed: {e}", r.value),
                }
            }
        }
        Command::Plot { kind, input, output } => {
            let p = commands::cmd_plot(&ctx, kind, input.as_deref(), output.as_deref())?;
            println!("{}", p.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Stage(s) = &e {
                eprintln!("stage: {}", s.stage);
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
