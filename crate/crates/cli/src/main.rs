//! `clat`: train sparse autoencoders on exported embeddings, attribute
//! predictions to their components, label and mine them, and run the
//! evaluation suites.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "clat", version, about = "Component-level attribution for CLIP-style embeddings")]
struct Cli {
    /// JSON run configuration; flags take precedence over its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (falls back to CLAT_THREADS).
    #[arg(long, global = true, env = "CLAT_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
struct Inputs {
    /// Tensor dump with embeddings, head parameters and text banks.
    #[arg(long)]
    dump: Option<PathBuf>,
    /// Manifest describing the dump.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
struct ModelInputs {
    #[command(flatten)]
    inputs: Inputs,
    /// Trained SAE dump; its manifest sits next to it with a `.json` extension.
    #[arg(long)]
    sae: Option<PathBuf>,
    /// Text bank name (defaults to the first bank).
    #[arg(long)]
    bank: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a top-k SAE on class-token embeddings.
    TrainSae(TrainArgs),
    /// Attribute outputs to SAE components, writing JSON lines.
    Attribute(AttributeArgs),
    /// Profile and label components against a text bank.
    Label(LabelArgs),
    /// Mine per-class failure modes from z-score outliers.
    Mine(MineArgs),
    /// Deletion and insertion curves with subset AUCs.
    Faithfulness(FaithfulnessArgs),
    /// Spurious and valid AUROC per failure case and scoring strategy.
    Benchmark(BenchmarkArgs),
    /// Train a linear probe, optionally with latent augmentation.
    Probe(ProbeArgs),
    /// Probe accuracy across perturbed copies of a dataset.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// `imagenet` or `medical` schedule.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long = "dsae")]
    d_sae: Option<usize>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    decay_epochs: Option<Vec<usize>>,
    #[arg(long)]
    decay_factor: Option<f64>,
    #[arg(long)]
    subsample_fraction: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    include_spatial: Option<bool>,
}

#[derive(Debug, Args)]
struct AttributeArgs {
    #[command(flatten)]
    model: ModelInputs,
    #[arg(long)]
    method: Option<String>,
    /// Prompt row; each sample's label when absent.
    #[arg(long)]
    prompt_index: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    samples: Option<Vec<usize>>,
    #[arg(long)]
    ig_steps: Option<usize>,
}

#[derive(Debug, Args)]
struct LabelArgs {
    #[command(flatten)]
    model: ModelInputs,
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    min_firing: Option<usize>,
}

#[derive(Debug, Args)]
struct MineArgs {
    #[command(flatten)]
    model: ModelInputs,
    #[arg(long = "slack")]
    confidence_slack: Option<f64>,
    #[arg(long = "z")]
    z_threshold: Option<f64>,
    #[arg(long)]
    min_firing: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<u32>>,
    #[arg(long)]
    method: Option<String>,
}

#[derive(Debug, Args)]
struct FaithfulnessArgs {
    #[command(flatten)]
    model: ModelInputs,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<String>>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long)]
    ref_pool: Option<usize>,
    #[arg(long)]
    subsets: Option<usize>,
    #[arg(long)]
    ig_steps: Option<usize>,
}

#[derive(Debug, Args)]
struct BenchmarkArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// JSON list of failure cases.
    #[arg(long)]
    cases: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    /// Probe dumps, one per class.
    #[arg(long = "probe-dump", value_delimiter = ',')]
    probes: Option<Vec<PathBuf>>,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[command(flatten)]
    model: ModelInputs,
    #[arg(long)]
    positive_class: Option<u32>,
    /// Restrict negatives to one class; all other classes otherwise.
    #[arg(long)]
    negative_class: Option<u32>,
    #[arg(long = "lr")]
    probe_learning_rate: Option<f64>,
    #[arg(long = "epochs")]
    probe_epochs: Option<usize>,
    #[arg(long)]
    l2: Option<f64>,
    /// Augment along the direction of this SAE component.
    #[arg(long)]
    component: Option<usize>,
    #[arg(long = "low")]
    low_threshold: Option<f64>,
    #[arg(long = "high")]
    high_threshold: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Estimate the direction on samples of this class only.
    #[arg(long)]
    filter_class: Option<u32>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Probe dump written by `probe`.
    #[arg(long)]
    probe: Option<PathBuf>,
    /// `delta=path.clad` pairs; the baseline has delta 0.
    #[arg(long = "input", value_delimiter = ',', allow_hyphen_values = true)]
    inputs: Option<Vec<String>>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::TrainSae(_) => "train-sae",
            Command::Attribute(_) => "attribute",
            Command::Label(_) => "label",
            Command::Mine(_) => "mine",
            Command::Faithfulness(_) => "faithfulness",
            Command::Benchmark(_) => "benchmark",
            Command::Probe(_) => "probe",
            Command::Sweep(_) => "sweep",
        }
    }

    fn apply(&self, c: &mut RunConfig) {
        let inputs = |c: &mut RunConfig, i: &Inputs| overlay!(c, i, dump, manifest);
        let model = |c: &mut RunConfig, m: &ModelInputs| {
            inputs(c, &m.inputs);
            overlay!(c, m, sae, bank);
        };
        match self {
            Command::TrainSae(a) => {
                inputs(c, &a.inputs);
                overlay!(
                    c, a, preset, k, d_sae, learning_rate, epochs, decay_epochs, decay_factor,
                    subsample_fraction, batch_size, weight_decay, include_spatial
                );
            }
            Command::Attribute(a) => {
                model(c, &a.model);
                overlay!(c, a, method, prompt_index, samples, ig_steps);
            }
            Command::Label(a) => {
                model(c, &a.model);
                overlay!(c, a, q, min_firing);
            }
            Command::Mine(a) => {
                model(c, &a.model);
                overlay!(c, a, confidence_slack, z_threshold, min_firing, stride, classes, method);
            }
            Command::Faithfulness(a) => {
                model(c, &a.model);
                overlay!(c, a, methods, modes, max_steps, samples_per_class, ref_pool, subsets, ig_steps);
            }
            Command::Benchmark(a) => {
                inputs(c, &a.inputs);
                overlay!(c, a, cases, variants, probes);
            }
            Command::Probe(a) => {
                model(c, &a.model);
                overlay!(
                    c, a, positive_class, negative_class, probe_learning_rate, probe_epochs, l2, component,
                    low_threshold, high_threshold, alpha, filter_class
                );
            }
            Command::Sweep(a) => overlay!(c, a, probe, inputs),
        }
    }
}

fn run(cli: Cli) -> Result<(), commands::CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::read(p).map_err(commands::CliError::Usage)?,
        None => RunConfig::default(),
    };
    let name = cli.command.name();
    if let Some(c) = &cfg.command {
        if c != name {
            return Err(commands::CliError::Usage(format!("config is for `{c}`, not `{name}`")));
        }
    }
    cfg.command = Some(name.to_string());
    overlay!(cfg, cli, out, seed);
    cli.command.apply(&mut cfg);

    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(commands::CliError::Usage("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| commands::CliError::Usage(e.to_string()))?;
    }
    commands::dispatch(&cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
