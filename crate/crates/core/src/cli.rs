//! Command-line front end. Exit codes: 0 success, 1 usage or configuration
//! error, 2 data or runtime error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::adapt::{run_ablation_suite, run_adaptation, Method, ABLATION_HEADER};
use crate::blackbox::{export_predictions, train_source, ExportMode, PredictionSet};
use crate::config::Config;
use crate::data::{gen_shifted_gaussians, LabeledDataset};
use crate::error::{Error, Result};
use crate::eval::{check_partition_consistency, parse_trace_name, write_summary, RunTrace, SummaryRow, PARTITION_TOL_CSV};
use crate::exec::Execution;
use crate::model::ClassifierParams;

#[derive(Debug, Parser)]
#[command(name = "bimem", version, about = "Memory-calibrated self-training on black-box pseudo labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate source.csv and target.csv for the shifted Gaussian benchmark.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train the black-box source model on labeled source data.
    TrainSource {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the source model's predictions on the target set.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Export smoothed one-hot labels instead of full probabilities.
        #[arg(long)]
        hard_only: bool,
    },
    /// Adapt a target model from target features and black-box predictions.
    Adapt {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// bimem, vanilla_st or confidence_st (overrides the config).
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Optional checkpoint of the adapted model.
        #[arg(long)]
        model_out: Option<PathBuf>,
    },
    /// Run the seven flow-ablation rows over several seeds.
    Ablate {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated seeds, e.g. 0,1,2,3,4.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize trace CSVs (named like `<method>_seed<N>.csv`).
    Report {
        traces: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn print_resolved(config: &Config, n_target: Option<usize>) {
    println!("resolved config:\n{}", config.resolved(n_target).to_pretty_json());
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

fn load_target_and_preds(target: &Path, preds: &Path) -> Result<(LabeledDataset, PredictionSet)> {
    let preds = PredictionSet::read_csv(preds)?;
    let target = LabeledDataset::read_csv(target, Some(preds.classes()))?;
    Ok((target, preds))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out_dir } => {
            let cfg = Config::load(config.as_deref())?;
            print_resolved(&cfg, None);
            let (source, target) = gen_shifted_gaussians(&cfg.gen_config()).map_err(|e| match e {
                Error::InvalidArgument(m) => Error::Config(m),
                other => other,
            })?;
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            source.write_csv(&out_dir.join("source.csv"))?;
            target.write_csv(&out_dir.join("target.csv"))?;
            println!("wrote {} source and {} target samples to {}", source.len(), target.len(), out_dir.display());
        }
        Command::TrainSource { source, config, out } => {
            let cfg = Config::load(config.as_deref())?;
            print_resolved(&cfg, None);
            let data = LabeledDataset::read_csv(&source, None)?;
            let model = train_source(&data, &cfg.source_training())?;
            create_parent(&out)?;
            model.save(&out)?;
            println!("wrote source model to {}", out.display());
        }
        Command::Predict { model, target, out, hard_only } => {
            let params = ClassifierParams::load(&model)?;
            println!(
                "resolved config:\n{}",
                serde_json::json!({ "model": model, "target": target, "out": out, "hard_only": hard_only })
            );
            let data = LabeledDataset::read_csv(&target, Some(params.layout().classes))?;
            let mode = if hard_only { ExportMode::HardOnly } else { ExportMode::Soft };
            let preds = export_predictions(&params, &data, mode, Execution::default())?;
            create_parent(&out)?;
            preds.write_csv(&out)?;
            println!("wrote {} predictions to {}", preds.len(), out.display());
        }
        Command::Adapt { target, preds, config, method, out, model_out } => {
            let mut cfg = Config::load(config.as_deref())?;
            if let Some(m) = method {
                cfg.method = m.parse::<Method>()?;
            }
            let (target, preds) = load_target_and_preds(&target, &preds)?;
            print_resolved(&cfg, Some(target.len()));
            let adapt = cfg.adapt_config(target.len());
            adapt.validate()?;
            let (params, trace) = run_adaptation(&target, &preds, &adapt, Execution::default())?;
            create_parent(&out)?;
            trace.write_csv(&out)?;
            if let Some(path) = model_out {
                create_parent(&path)?;
                params.save(&path)?;
            }
            let last = trace.last().expect("trace has an initial point");
            println!("final accuracy {:.4} ({} eval points) -> {}", last.acc_all, trace.points.len(), out.display());
        }
        Command::Ablate { target, preds, config, seeds, out } => {
            let cfg = Config::load(config.as_deref())?;
            let (target, preds) = load_target_and_preds(&target, &preds)?;
            print_resolved(&cfg, Some(target.len()));
            let base = cfg.adapt_config(target.len());
            base.validate()?;
            let rows = run_ablation_suite(&target, &preds, &base, &seeds, Execution::default())?;
            let mut text = String::from(ABLATION_HEADER);
            text.push('\n');
            for row in &rows {
                text.push_str(&row.csv_line());
                text.push('\n');
                println!("row {} {:<40} {:.4} ± {:.4}", row.row, row.flows.to_string(), row.mean, row.std);
            }
            create_parent(&out)?;
            std::fs::write(&out, text).map_err(|e| Error::io(&out, e))?;
        }
        Command::Report { traces, out } => {
            println!("resolved config:\n{}", serde_json::json!({ "traces": traces, "out": out }));
            if traces.is_empty() {
                return Err(Error::Config("report needs at least one trace file".into()));
            }
            let mut rows = Vec::with_capacity(traces.len());
            for path in &traces {
                let trace = RunTrace::read_csv(path)?;
                if trace.points.is_empty() {
                    return Err(Error::data(path, None, "trace has no evaluation points"));
                }
                check_partition_consistency(&trace, PARTITION_TOL_CSV)
                    .map_err(|e| Error::data(path, None, e.to_string()))?;
                let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let (method, seed) = parse_trace_name(&stem);
                rows.push(SummaryRow::from_trace(method, seed, &trace)?);
            }
            create_parent(&out)?;
            write_summary(&rows, &out)?;
            println!("summarized {} traces into {}", rows.len(), out.display());
        }
    }
    Ok(())
}
