use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gamreid::config::{Lambda, RunConfig};
use gamreid::dataio::generate_synthetic;
use gamreid::diagnostics::{run_suite, CHECK_TOLERANCE};
use gamreid::pipeline::{
    cluster_run, eval_run, export_attention, parameter_report, train_run, ClusterOptions,
};
use gamreid::tensor::read_tensor_file;
use gamreid::{Error, Result};

/// Unsupervised person re-identification: grouped-attention embeddings
/// trained with instance discrimination and bottom-up clustering.
#[derive(Parser)]
#[command(name = "gamreid", version, after_long_help = RunConfig::help_text())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-camera dataset.
    SynthData {
        /// Config file; only the synth.* keys are used.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Replace the contents of a non-empty output directory.
        #[arg(long)]
        overwrite: bool,
    },
    /// Train on a dataset and write a run directory.
    #[command(after_long_help = RunConfig::help_text())]
    Train {
        /// Config file of `key = value` lines; missing keys take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the query and gallery splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the parameter breakdown of a preset and its reduction.
    CountParams {
        #[arg(long)]
        preset: String,
        #[arg(long)]
        groups: Option<usize>,
        /// Embedding size D.
        #[arg(long)]
        dim: Option<usize>,
        /// Also build the model and compare the allocated count.
        #[arg(long)]
        assemble: bool,
    },
    /// Merge fixed embeddings bottom-up.
    Cluster {
        /// `[n, D]` tensor file.
        #[arg(long)]
        embeddings: PathBuf,
        /// Balancing weight: `auto` or a number.
        #[arg(long, default_value = "auto")]
        lambda: String,
        #[arg(long, default_value_t = 0.04)]
        fraction: f64,
        /// Stage limit (default: merge down to the floor).
        #[arg(long)]
        stages: Option<usize>,
        #[arg(long)]
        min_clusters: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks.
    GradCheck {
        /// ops, attention, backbone, idl, acl or all.
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a block's spatial attention map for one image.
    ExportAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Block index (0-based).
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) if !p.is_file() => Err(Error::Usage(format!("config file {} does not exist", p.display()))),
        Some(p) => RunConfig::read(p),
        None => Ok(RunConfig::default()),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { spec, out, overwrite } => {
            let config = read_config(spec.as_deref())?;
            let index = generate_synthetic(&config.synth, &out, overwrite)?;
            println!("wrote {} images to {}", index.entries.len(), out.display());
        }
        Command::Train { config, data, out, resume } => {
            let config = read_config(config.as_deref())?;
            let summary = train_run(&config, &data, &out, resume.as_deref(), &mut |r| {
                let m = r.metrics.as_ref();
                println!(
                    "stage {:>3}  clusters {:>5}  rank-1 {}  mAP {}  nmi {}",
                    r.stage,
                    r.num_clusters,
                    fmt_opt(m.map(|m| m.rank1)),
                    fmt_opt(m.map(|m| m.map)),
                    fmt_opt(r.nmi)
                );
            })?;
            match &summary.metrics {
                Some(m) => print!("{}", m.to_text()),
                None => println!("no query/gallery splits; metrics not written"),
            }
            println!("run directory {}", out.display());
        }
        Command::Eval { checkpoint, data, out } => {
            let metrics = eval_run(&checkpoint, &data, &out)?;
            print!("{}", metrics.to_text());
        }
        Command::CountParams { preset, groups, dim, assemble } => {
            let report = parameter_report(&preset, groups, dim, assemble)?;
            print!("{}", report.to_text());
            if report.assembled.is_some_and(|a| a != report.breakdown.total) {
                return Err(Error::Integrity("assembled parameter count differs from the analytic count".into()));
            }
        }
        Command::Cluster { embeddings, lambda, fraction, stages, min_clusters, out } => {
            let lambda = match lambda.as_str() {
                "auto" => Lambda::Auto,
                v => Lambda::Fixed(v.parse().map_err(|_| Error::Config(format!("lambda: cannot parse {v:?}")))?),
            };
            if !embeddings.is_file() {
                return Err(Error::Usage(format!("embeddings file {} does not exist", embeddings.display())));
            }
            let opts = ClusterOptions { lambda, fraction, stages, min_clusters };
            let result = cluster_run(&read_tensor_file(&embeddings)?, &opts)?;
            result.write(&out)?;
            println!(
                "{} rows -> {} clusters in {} stages (lambda {})",
                result.bank.num_instances(),
                result.bank.num_clusters(),
                result.trajectory.len(),
                result.lambda
            );
        }
        Command::GradCheck { module, seed } => {
            let results = run_suite(&module, seed)?;
            let mut worst: f64 = 0.0;
            for r in &results {
                println!("{:<48} {:.3e}", r.name, r.max_relative_error);
                worst = worst.max(r.max_relative_error);
            }
            println!("max relative error {worst:.3e} over {} checks", results.len());
            if worst > CHECK_TOLERANCE {
                return Err(Error::Numeric(format!("max relative error {worst:.3e} exceeds {CHECK_TOLERANCE:e}")));
            }
        }
        Command::ExportAttn { checkpoint, image, layer, out } => {
            let path = export_attention(&checkpoint, &image, layer, &out)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.kind().to_string();
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or(&msg).trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.detail().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            match e {
                Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
