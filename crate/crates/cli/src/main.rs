//! `smile` command-line driver.
//!
//! Every failure prints one line `error[<category>]: <message>` to stderr and
//! exits with status 1. Categories: `format`, `shape`, `domain`, `contract`,
//! `capacity`, `split`, `parameter`, `training`, `config`, `io`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use smile::config::RunConfig;
use smile::data::{write_synth, SynthSpec};
use smile::pipeline::{run_dump_embeddings, run_eval, run_train, run_verify, PARAMS_FILE};
use smile::protonet::Metrics;
use smile::{Error, Result};

#[derive(Parser)]
#[command(name = "smile", version, about = "Few-shot node classification with dual-level mixup")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic stochastic-block-model dataset.
    Synth(SynthArgs),
    /// Train on a dataset and evaluate on its test classes.
    Train(RunArgs),
    /// Evaluate saved parameters on a dataset's test classes.
    Eval(ParamsArgs),
    /// Train, then evaluate the generalization bounds against the measured gap.
    Verify(RunArgs),
    /// Write the refined node embeddings of saved parameters as CSV.
    DumpEmbeddings(ParamsArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON file with a synthetic spec; flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_classes: Option<usize>,
    #[arg(long)]
    nodes_per_class: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    p_in: Option<f64>,
    #[arg(long)]
    p_out: Option<f64>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    val_classes: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ParamsArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Parameter file; defaults to `<out>/params.json`.
    #[arg(long)]
    params: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }
}

impl ParamsArgs {
    fn params(&self) -> PathBuf {
        self.params.clone().unwrap_or_else(|| self.run.out.join(PARAMS_FILE))
    }
}

impl SynthArgs {
    fn spec(&self) -> Result<SynthSpec> {
        let mut spec = match &self.spec {
            Some(path) => load_spec(path)?,
            None => SynthSpec::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    spec.$field = v;
                }
            )*};
        }
        set!(seed, n_classes, nodes_per_class, feature_dim, p_in, p_out, separation, noise, val_classes);
        spec.validate()?;
        Ok(spec)
    }
}

fn load_spec(path: &Path) -> Result<SynthSpec> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("malformed synth spec {}: {e}", path.display())))
}

fn print_metrics(m: &Metrics) {
    println!(
        "mean_acc {:.4} ± {:.4}  macro_f1 {:.4}  tasks {}",
        m.mean_acc,
        m.ci95,
        m.macro_f1,
        m.task_accuracy.len()
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => {
            let spec = args.spec()?;
            write_synth(&spec, &args.out)?;
            println!("wrote {} nodes in {} classes to {}", spec.n_classes * spec.nodes_per_class, spec.n_classes, args.out.display());
        }
        Command::Train(args) => {
            let config = args.config()?;
            let run = run_train(&config, &args.data, &args.out)?;
            info!("best epoch {}, early stop {}", run.history.best_epoch, run.history.stopped_early);
            print_metrics(&run.metrics);
        }
        Command::Eval(args) => {
            let config = args.run.config()?;
            let metrics = run_eval(&config, &args.run.data, args.params(), &args.run.out)?;
            print_metrics(&metrics);
        }
        Command::Verify(args) => {
            let config = args.config()?;
            let report = run_verify(&config, &args.data, &args.out)?;
            println!(
                "theorem1 {:.4}  theorem2 {:.4}  rademacher {:.4} (bound {:.4})  gap {}",
                report.theorem1_bound,
                report.theorem2_bound,
                report.rademacher.estimate,
                report.rademacher.bound,
                report.empirical_gap.last().map_or("n/a".to_string(), |g| format!("{:.4}", g.gap))
            );
        }
        Command::DumpEmbeddings(args) => {
            let config = args.run.config()?;
            let x = run_dump_embeddings(&config, &args.run.data, args.params(), &args.run.out)?;
            println!("wrote {}x{} embeddings", x.nrows(), x.ncols());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::FAILURE
        }
    }
}
