//! Experiment CLI: method comparison, penalty sweep, and attribute sweep
//! over synthetic (or JSONL) demographically-imbalanced data.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fairlora::experiment::{
    reference_experiment, render_csv, render_markdown, run_attribute_sweep, run_lambda_sweep,
    run_method_comparison, save_outputs, ExperimentSpec, MethodSpec, ResultTable,
};
use fairlora::losses::LossMode;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "fairlora",
    version,
    about = "Fairness-aware low-rank fine-tuning experiments on a toy causal-attention classifier"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured method from identical initialization per seed.
    Compare(RunArgs),
    /// Sweep the accuracy-gap penalty strength against a vanilla baseline.
    LambdaSweep(LambdaSweepArgs),
    /// Compare vanilla and hybrid training across attribute group layouts.
    AttributeSweep(RunArgs),
    /// Print the built-in reference benchmark config as TOML.
    ShowConfig,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Csv,
    Markdown,
    Both,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file (TOML); defaults to the built-in reference
    /// benchmark.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replace the configured method list (comma-separated subset of
    /// vanilla,fr,gr,hybrid).
    #[arg(long, value_delimiter = ',')]
    method: Vec<String>,
    /// Override the gap-penalty strength of every fr/hybrid method.
    #[arg(long)]
    lambda: Option<f64>,
    /// Override the weight clip of every gr/hybrid method.
    #[arg(long = "w-max")]
    w_max: Option<f64>,
    /// Replace the configured seed list.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Override the epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory for results.csv, results.md, histories, and the
    /// run manifest.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Which table rendering to print to stdout (files always get both).
    #[arg(long, value_enum, default_value = "markdown")]
    format: FormatArg,
}

#[derive(Args)]
struct LambdaSweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Penalty strengths to sweep (comma-separated); defaults to the
    /// config's `lambdas` list.
    #[arg(long, value_delimiter = ',')]
    lambdas: Vec<f64>,
}

fn load_spec(args: &RunArgs) -> Result<ExperimentSpec> {
    let mut spec = match &args.config {
        Some(path) => ExperimentSpec::from_toml_file(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => reference_experiment(),
    };
    if !args.method.is_empty() {
        let mut methods = Vec::new();
        for name in &args.method {
            let mode = LossMode::parse(name)?;
            // Keep the config's parameters for this mode when present.
            let existing = spec.methods.iter().find(|m| m.mode == mode).cloned();
            methods.push(existing.unwrap_or_else(|| MethodSpec::new(mode)));
        }
        spec.methods = methods;
    }
    if let Some(lambda) = args.lambda {
        for m in &mut spec.methods {
            m.lambda = lambda;
        }
    }
    if let Some(w_max) = args.w_max {
        for m in &mut spec.methods {
            m.w_max = w_max;
        }
    }
    if !args.seed.is_empty() {
        spec.seeds = args.seed.clone();
    }
    if let Some(epochs) = args.epochs {
        spec.train.epochs = epochs;
    }
    spec.out_dir = Some(args.out.clone());
    spec.validate()?;
    Ok(spec)
}

fn print_and_save(spec: &ExperimentSpec, table: &ResultTable, args: &RunArgs) -> Result<()> {
    save_outputs(spec, table, &args.out)
        .with_context(|| format!("writing outputs to {}", args.out.display()))?;
    match args.format {
        FormatArg::Csv => print!("{}", render_csv(table)?),
        FormatArg::Markdown => print!("{}", render_markdown(table)?),
        FormatArg::Both => {
            print!("{}", render_csv(table)?);
            println!();
            print!("{}", render_markdown(table)?);
        }
    }
    eprintln!(
        "{} runs complete; outputs in {}",
        table.rows.len(),
        args.out.display()
    );
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Compare(args) => {
            let spec = load_spec(&args)?;
            let table = run_method_comparison(&spec)?;
            print_and_save(&spec, &table, &args)
        }
        Command::LambdaSweep(sweep) => {
            let spec = load_spec(&sweep.run)?;
            let lambdas =
                if sweep.lambdas.is_empty() { spec.lambdas.clone() } else { sweep.lambdas.clone() };
            if lambdas.is_empty() {
                bail!("no lambda values: pass --lambdas or set `lambdas` in the config");
            }
            let table = run_lambda_sweep(&spec, &lambdas)?;
            print_and_save(&spec, &table, &sweep.run)
        }
        Command::AttributeSweep(args) => {
            let spec = load_spec(&args)?;
            let attributes = if spec.attributes.is_empty() {
                fairlora::experiment::default_attributes()
            } else {
                spec.attributes.clone()
            };
            let table = run_attribute_sweep(&spec, &attributes)?;
            print_and_save(&spec, &table, &args)
        }
        Command::ShowConfig => {
            print!("{}", reference_experiment().to_toml()?);
            Ok(())
        }
    }
}
