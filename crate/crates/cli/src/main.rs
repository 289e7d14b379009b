use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use loramoe::data::{load_darwin, synthetic_darwin, EXPECTED_PATIENTS, EXPECTED_SUBJECTS};
use loramoe::experiments::{built_in_specs, emit, run_with, ExperimentSpec, OutputFormat, DATA_ENV};
use loramoe::layers::param_report;
use loramoe::verify::{self, CheckOutcome};
use loramoe::{Execution, Model, Rng};

#[derive(Parser)]
#[command(name = "loramoe", version, about = "LoRA-MoE experiments on handwriting features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a TOML file or a built-in name.
    Run {
        config: String,
        #[arg(long)]
        repetitions: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, env = DATA_ENV)]
        data: Option<PathBuf>,
        /// Use a generated stand-in for the dataset (174 subjects, 89 patients).
        #[arg(long, conflicts_with = "data")]
        synthetic: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        format: Option<Format>,
        /// Leave training time out of the results so reruns are byte-identical.
        #[arg(long)]
        no_time: bool,
        #[arg(long)]
        sequential: bool,
    },
    /// List the built-in experiments.
    ListSpecs {
        /// Print each one as a full TOML config.
        #[arg(long)]
        toml: bool,
    },
    /// Compare analytic gradients against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check gate region geometry, zero-init adapters and parameter counts.
    VerifyRouting {
        #[arg(long, default_value_t = 10_000)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parameter counts of every model an experiment builds.
    ParamReport { config: String },
}

fn report(outcomes: &[CheckOutcome]) -> bool {
    for o in outcomes {
        println!("{} {:<48} {}", if o.passed { "ok  " } else { "FAIL" }, o.name, o.detail);
    }
    verify::all_passed(outcomes)
}

fn main() -> Result<ExitCode> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            repetitions,
            epochs,
            data,
            synthetic,
            out,
            format,
            no_time,
            sequential,
        } => {
            let mut spec = ExperimentSpec::load(&config)?;
            if let Some(r) = repetitions {
                spec.repetitions = r;
            }
            if let Some(e) = epochs {
                spec.train.epochs = e;
            }
            if let Some(f) = format {
                spec.out.format = match f {
                    Format::Csv => OutputFormat::Csv,
                    Format::Json => OutputFormat::Json,
                };
            }
            if no_time {
                spec.out.record_time = false;
            }
            if data.is_some() {
                spec.data_path = data;
            }
            spec.validate()?;

            let dataset = if synthetic {
                synthetic_darwin(EXPECTED_SUBJECTS, EXPECTED_PATIENTS, spec.seed)?
            } else {
                let Some(path) = spec.resolve_data_path() else {
                    bail!("no dataset: pass --data, set {DATA_ENV}, or use --synthetic");
                };
                load_darwin(&path).with_context(|| format!("loading {}", path.display()))?
            };
            let exec = if sequential {
                Execution::Sequential
            } else {
                Execution::Parallel
            };
            info!(
                "{}: {} subjects, {} repetitions, {} epochs",
                spec.name,
                dataset.len(),
                spec.repetitions,
                spec.train.epochs
            );
            let table = run_with(&spec, &dataset, exec)?;

            let path = out
                .or_else(|| spec.out.path.clone())
                .unwrap_or_else(|| PathBuf::from(format!("results/{}.{}", spec.name, spec.out.format.extension())));
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            let written = emit(&table, spec.out.format, &path)?;

            println!(
                "{:<10} {:<18} {:>16} {:>8} {:>8} {:>8}",
                "arch", "model", "acc", "sens", "spec", "auc"
            );
            for row in &table.rows {
                let m = row.metrics();
                println!(
                    "{:<10} {:<18} {:>7.4} +- {:<6.4} {:>8.4} {:>8.4} {:>8.4}",
                    row.arch, row.model, m.accuracy, row.stats.std.accuracy, m.sensitivity, m.specificity, m.auc
                );
            }
            for p in written {
                println!("wrote {}", p.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::ListSpecs { toml } => {
            for spec in built_in_specs() {
                if toml {
                    println!("# {}\n{}", spec.name, spec.to_toml_string()?);
                } else {
                    println!(
                        "{:<16} {:?} sweep {:?}..{:?} ({} values)",
                        spec.name,
                        spec.protocol,
                        spec.sweep.first().unwrap_or(&0),
                        spec.sweep.last().unwrap_or(&0),
                        spec.sweep.len()
                    );
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { epsilon, seed } => {
            let ok = report(&verify::gradient_suite(epsilon, seed)?);
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::VerifyRouting { pairs, seed } => {
            let mut outcomes = verify::routing_suite(pairs, seed)?;
            outcomes.extend(verify::zero_init_suite(seed)?);
            outcomes.extend(verify::param_identity_suite(seed)?);
            let ok = report(&outcomes);
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::ParamReport { config } => {
            let spec = ExperimentSpec::load(&config)?;
            let mut rng = Rng::seed_from(spec.seed);
            println!(
                "{:<24} {:>12} {:>12} {:>10}",
                "model", "total", "activated", "reduction"
            );
            for (label, cfg) in spec.catalog_models() {
                let r = param_report(&Model::build(&cfg, &mut rng)?);
                println!(
                    "{:<24} {:>12} {:>12} {:>9.1}%",
                    label,
                    r.total,
                    r.activated_per_sample,
                    100.0 * r.reduction_vs_moe
                );
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
