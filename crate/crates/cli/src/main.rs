use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use distill_core::data::Split;
use distill_core::experiment::{self, SweepOutcome};
use distill_core::{ExperimentConfig, Result};

/// Train a residual teacher, distill it into a DSNet student, and evaluate both.
#[derive(Parser, Debug)]
#[command(name = "distill", version)]
struct Cli {
    /// Experiment config file (flat `key = value` lines).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Config override, e.g. `--set distill.alpha=0.3`. Repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Log progress (`-v`) or debug detail (`-vv`).
    #[arg(long, short, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the teacher on hard labels; writes teacher.dkpt and report.json.
    TrainTeacher,
    /// Distill a trained teacher into a student; writes student.dkpt and report.json.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Evaluate a checkpoint; writes report.json, roc.csv and roc.svg.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset split to evaluate on.
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// One distillation per temperature; writes sweep.json, sweep.txt and fig6_probe.csv.
    SweepTemperature {
        /// Teacher checkpoint; trained from the config when omitted.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Comma-separated temperatures (overrides `sweep.temperatures`).
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        temperatures: Option<Vec<f64>>,
        /// Add T = 1 to the list.
        #[arg(long)]
        include_t1: bool,
    },
    /// One distillation per batch size; writes sweep.json and sweep.txt.
    SweepBatch {
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Comma-separated batch sizes (overrides `sweep.batch_sizes`).
        #[arg(long, value_delimiter = ',')]
        batch_sizes: Option<Vec<usize>>,
    },
    /// Classify one image and print both class probabilities.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        image: PathBuf,
    },
    /// Write the configured synthetic dataset as PNG files under --out.
    GenSynth,
}

fn print_sweep(outcome: &SweepOutcome) {
    print!("{}", outcome.table.to_text());
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    match cli.command {
        Command::TrainTeacher => {
            let run = experiment::cmd_train_teacher(&cfg)?;
            println!(
                "teacher: {} parameters, {} accuracy {:.4} -> {}",
                run.report.model.parameters,
                run.report.metrics.split,
                run.report.metrics.accuracy,
                run.checkpoint.display()
            );
        }
        Command::Distill { teacher } => {
            let run = experiment::cmd_distill(&cfg, &teacher)?;
            println!(
                "student: {} parameters, {} accuracy {:.4} (T = {}, alpha = {}) -> {}",
                run.report.model.parameters,
                run.report.metrics.split,
                run.report.metrics.accuracy,
                cfg.distill.temperature,
                cfg.distill.alpha,
                run.checkpoint.display()
            );
        }
        Command::Evaluate { checkpoint, split } => {
            let eval = experiment::cmd_evaluate(&cfg, &checkpoint, split)?;
            let auc = eval.report.auc.value.map_or("undefined".to_string(), |a| format!("{a:.4}"));
            println!("{} accuracy {:.4}, AUC {auc}", eval.report.split, eval.report.accuracy);
            for (class, m) in &eval.report.per_class {
                println!("  {class:<10} precision {:.4}  recall {:.4}  f1 {:.4}", m.precision, m.recall, m.f1);
            }
        }
        Command::SweepTemperature { teacher, temperatures, include_t1 } => {
            if let Some(list) = temperatures {
                cfg.temperatures = list;
            }
            if include_t1 {
                cfg.temperatures.push(1.0);
            }
            print_sweep(&experiment::cmd_sweep_temperature(&cfg, teacher.as_deref())?);
        }
        Command::SweepBatch { teacher, batch_sizes } => {
            if let Some(list) = batch_sizes {
                cfg.batch_sizes = list;
            }
            print_sweep(&experiment::cmd_sweep_batch(&cfg, teacher.as_deref())?);
        }
        Command::Predict { checkpoint, image } => {
            println!("{}", experiment::cmd_predict(&checkpoint, &image)?);
        }
        Command::GenSynth => {
            let export = experiment::cmd_gen_synth(&cfg, &cfg.output_dir)?;
            println!("wrote {} images under {}", export.files, cfg.output_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
