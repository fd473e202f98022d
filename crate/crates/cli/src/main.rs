use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dilution_core::error::{ErrorCategory, LabError, Result};
use dilution_core::feature_engine::{build_features, write_feature_rows, FeatureLayout, FeatureOptions};
use dilution_core::harness::{self, DataSource, ExperimentConfig};
use dilution_core::synthgen::{self, GeneratorConfig};

#[derive(Parser)]
#[command(name = "dilution-lab", version, about = "Invoice dilution modeling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Overrides the experiment seed (and the generator seed for synthetic data).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for window jobs.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset: invoices.csv, macro.csv, ground_truth.json.
    Generate,
    /// Write the leakage-free feature table.
    Featurize(FeaturizeArgs),
    /// Fit and save a two-stage bundle per window.
    Train,
    /// Evaluate saved bundles and write reports and summary tables.
    Evaluate,
    /// Train and evaluate in one pass.
    Run,
    /// Compare the baseline classifier with and without macro features.
    Ablate,
    /// Retrain the classifier on permuted labels.
    Randcheck,
    /// Rebuild summary tables from saved window reports.
    Report,
}

#[derive(clap::Args)]
struct FeaturizeArgs {
    /// Invoice file; overrides the configured data source.
    #[arg(long)]
    invoices: Option<PathBuf>,
    /// Macro indicator file.
    #[arg(long = "macro")]
    macro_file: Option<PathBuf>,
    /// Output file; defaults to features.csv in the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Omit macro columns.
    #[arg(long)]
    no_macro: bool,
    /// Keep only invoices in this currency.
    #[arg(long)]
    currency: Option<String>,
    #[arg(long, value_parser = ["issue", "payment"])]
    history_knowledge: Option<String>,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(dir) = &cli.out_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        if let DataSource::Synthetic { generator } = &mut cfg.data {
            generator.seed = seed;
        }
    }
    if cli.jobs.is_some() {
        cfg.jobs = cli.jobs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn generate(cfg: &ExperimentConfig) -> Result<()> {
    let generator = match &cfg.data {
        DataSource::Synthetic { generator } => generator.clone(),
        DataSource::Files { .. } => GeneratorConfig::default(),
    };
    let data = synthgen::generate(&generator)?;
    synthgen::write_dataset(&data, &cfg.output_dir)?;
    println!("wrote {} invoices to {}", data.invoices.len(), cfg.output_dir.display());
    Ok(())
}

fn featurize(mut cfg: ExperimentConfig, args: &FeaturizeArgs) -> Result<()> {
    if let Some(invoices) = &args.invoices {
        cfg.data = DataSource::Files {
            invoices: invoices.clone(),
            macro_file: args.macro_file.clone(),
            ground_truth: None,
            lenient: false,
        };
    } else if args.macro_file.is_some() {
        return Err(LabError::Config("--macro requires --invoices".into()));
    }
    if args.no_macro {
        cfg.features.include_macro = false;
    }
    if args.currency.is_some() {
        cfg.features.currency = args.currency.clone();
    }
    if let Some(k) = &args.history_knowledge {
        cfg.features.history_knowledge = k.parse()?;
    }
    let data = harness::load_data(&cfg.data)?;
    let opts = FeatureOptions {
        history_knowledge: cfg.features.history_knowledge,
        currency: cfg.features.currency.clone(),
    };
    let rows = build_features(&data.invoices, data.macro_series.as_deref().unwrap_or(&[]), &opts)?;
    let path = match &args.out {
        Some(p) => p.clone(),
        None => cfg.output_dir.join("features.csv"),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    write_feature_rows(&path, &rows, &FeatureLayout::new(cfg.features.include_macro))?;
    println!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Generate => generate(&cfg),
        Command::Featurize(args) => featurize(cfg, args),
        Command::Train => {
            let (_, windows, _) = harness::run_training(&cfg)?;
            println!("trained {} windows into {}", windows.len(), cfg.output_dir.display());
            Ok(())
        }
        Command::Evaluate => print_json(&harness::run_evaluation(&cfg)?.summary),
        Command::Run => print_json(&harness::run_experiment(&cfg)?.summary),
        Command::Ablate => print_json(&harness::run_ablation(&cfg)?),
        Command::Randcheck => print_json(&harness::run_randomization_check(&cfg)?),
        Command::Report => print_json(&harness::rebuild_summary(&cfg.output_dir)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.category() {
                ErrorCategory::Config => 2,
                ErrorCategory::Data => 3,
                ErrorCategory::Numeric => 4,
            })
        }
    }
}
