//! `prefshift` experiment runner.
//!
//! Each subcommand reads an experiment config (defaults when `--config` is
//! absent), applies flag overrides, and writes its artifacts under the
//! output directory. Failures print a one-line JSON error to stderr and exit
//! with status 1 (2 for usage errors).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prefshift::episode::Recommender;
use prefshift::experiment::{
    self, curve_csv, epoch_csv, model_file, policy_file, write_output, ExperimentConfig, ModelEvalRow, PolicyCell,
    TrainMode, TrainedModels,
};
use prefshift::metrics::{EvalMode, EvalReport};
use prefshift::model::Task;
use prefshift::policy::ppo::LstmPolicy;
use prefshift::Error;

#[derive(Parser)]
#[command(name = "prefshift", version, about = "Estimate, evaluate and penalize recommender-induced preference shifts")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON); missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Where policies are trained: on ground-truth users or in simulation.
    #[arg(long, global = true, value_parser = ["oracle", "sim"])]
    mode: Option<String>,
    #[arg(long, global = true, action = clap::ArgAction::Set)]
    penalized: Option<bool>,
    /// Discount; 0 trains a myopic policy.
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Fit the learned models under the swapped choice temperature field.
    #[arg(long, global = true, action = clap::ArgAction::Set)]
    misspecified_choice_model: Option<bool>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the logged interaction dataset.
    GenData,
    /// Train one learned model, or all three.
    TrainModel {
        #[arg(long, value_parser = ["future", "initial", "counterfactual", "all"], default_value = "all")]
        task: String,
    },
    /// Score the learned models against the oracle and a chance baseline.
    EvalModel,
    /// Train one policy cell.
    TrainPolicy,
    /// Evaluate a saved policy (or `random`).
    EvalPolicy {
        /// Policy id in the output directory, a checkpoint path, or `random`.
        #[arg(long)]
        policy: Option<String>,
        #[arg(long, value_parser = ["oracle", "estimated"], default_value = "oracle")]
        eval_mode: String,
    },
    /// Cohort preference heatmap (CSV and PGM) under a policy.
    ExportHeatmap {
        #[arg(long)]
        policy: Option<String>,
    },
    /// The whole pipeline.
    RunAll,
}

fn threads() -> Result<Option<usize>, Error> {
    match std::env::var("PREFSHIFT_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| Error::Config(format!("PREFSHIFT_THREADS must be a positive integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn resolve(c: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(p) = c.penalized {
        cfg.policy.penalized = p;
    }
    if let Some(g) = c.gamma {
        cfg.policy.gamma = g;
    }
    if let Some(m) = c.misspecified_choice_model {
        cfg.misspecified_choice_model = m;
    }
    if let Some(n) = threads()? {
        cfg.policy.workers = cfg.policy.workers.min(n);
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn mode(c: &Common) -> Result<TrainMode, Error> {
    c.mode.as_deref().unwrap_or("oracle").parse()
}

fn load_policy(cfg: &ExperimentConfig, name: &str) -> Result<Box<dyn Recommender>, Error> {
    if name == "random" {
        return Ok(Box::new(experiment::random_recommender(cfg)?));
    }
    let as_path = PathBuf::from(name);
    let path = if as_path.exists() { as_path } else { cfg.path(&policy_file(name)) };
    Ok(Box::new(LstmPolicy::load(&path)?))
}

fn cell(cfg: &ExperimentConfig, c: &Common) -> Result<PolicyCell, Error> {
    Ok(PolicyCell { gamma: cfg.policy.gamma, penalized: cfg.policy.penalized, mode: mode(c)? })
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = resolve(&cli.common)?;
    match cli.command {
        Command::GenData => {
            let d = experiment::gen_data(&cfg)?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            let p = cfg.path(experiment::DATASET_FILE);
            d.write_jsonl(&p)?;
            println!("wrote {} trajectories to {}", d.trajectories.len(), p.display());
        }
        Command::TrainModel { task } => {
            let data = experiment::load_or_gen_data(&cfg)?;
            let report = |task: Task, stats: &[prefshift::model::EpochStats]| -> Result<(), Error> {
                for e in stats {
                    println!(
                        "{task} epoch {} train {:.5} valid {}",
                        e.epoch,
                        e.train_loss,
                        e.valid_loss.map_or("-".into(), |v| format!("{v:.5}"))
                    );
                }
                write_output(&cfg, &format!("train_{task}.csv"), &epoch_csv(stats))?;
                Ok(())
            };
            let tasks: Vec<Task> = match task.as_str() {
                "future" => vec![Task::Future],
                "initial" => vec![Task::Initial],
                "counterfactual" => vec![Task::Counterfactual],
                _ => vec![Task::Future, Task::Initial, Task::Counterfactual],
            };
            let mut initial = None;
            for t in tasks {
                if t == Task::Counterfactual && initial.is_none() {
                    initial = Some(prefshift::model::SequenceModel::load(&cfg.path(&model_file(Task::Initial)))?);
                }
                let (m, stats) = experiment::train_model(&cfg, &data, t, initial.as_ref())?;
                report(t, &stats)?;
                m.save(&cfg.path(&model_file(t)))?;
                if t == Task::Initial {
                    initial = Some(m);
                }
            }
        }
        Command::EvalModel => {
            let data = experiment::load_or_gen_data(&cfg)?;
            let models = TrainedModels::load(&cfg)?;
            let rows = experiment::eval_models(&cfg, &data, &models)?;
            let mut csv = format!("{}\n", ModelEvalRow::CSV_HEADER);
            for r in &rows {
                csv.push_str(&r.csv_row());
                csv.push('\n');
            }
            print!("{csv}");
            write_output(&cfg, "model_eval.csv", &csv)?;
        }
        Command::TrainPolicy => {
            let cell = cell(&cfg, &cli.common)?;
            let models = match cell.mode {
                TrainMode::Sim => Some(TrainedModels::load(&cfg)?),
                TrainMode::Oracle => None,
            };
            let (policy, curve) = experiment::train_policy_cell(&cfg, cell, models.as_ref(), 0, |r| {
                println!(
                    "iter {} return {:.4} eng {:.4} eng_u0 {:.4} eng_nps {:.4}",
                    r.iteration, r.mean_return, r.eng, r.eng_u0, r.eng_nps
                );
            })?;
            let id = cell.id();
            write_output(&cfg, &format!("curve_{id}.csv"), &curve_csv(&curve))?;
            policy.save(&cfg.path(&policy_file(&id)))?;
            println!("saved {}", cfg.path(&policy_file(&id)).display());
        }
        Command::EvalPolicy { policy, eval_mode } => {
            let name = policy.unwrap_or_else(|| cell(&cfg, &cli.common).map(|c| c.id()).unwrap_or_default());
            let rec = load_policy(&cfg, &name)?;
            let mode = if eval_mode == "estimated" { EvalMode::Estimated } else { EvalMode::Oracle };
            let models = match mode {
                EvalMode::Estimated => Some(TrainedModels::load(&cfg)?),
                EvalMode::Oracle => None,
            };
            let rep = experiment::eval_policy(&cfg, rec.as_ref(), mode, models.as_ref())?;
            let training = if name == "random" { "none".to_string() } else { mode_of(&name) };
            let csv = format!("{}\n{}\n", EvalReport::CSV_HEADER, rep.csv_row(rec.id(), &training, mode));
            print!("{csv}");
            write_output(&cfg, &format!("eval_{}_{mode}.csv", sanitize(&name)), &csv)?;
        }
        Command::ExportHeatmap { policy } => {
            let name = policy.unwrap_or_else(|| "random".into());
            let rec = load_policy(&cfg, &name)?;
            let hm = experiment::heatmap(&cfg, rec.as_ref())?;
            let stem = format!("heatmap_{}", sanitize(&name));
            write_output(&cfg, &format!("{stem}.csv"), &hm.to_csv())?;
            std::fs::write(cfg.path(&format!("{stem}.pgm")), hm.to_pgm(8))?;
            println!(
                "wrote {} and {}",
                cfg.path(&format!("{stem}.csv")).display(),
                cfg.path(&format!("{stem}.pgm")).display()
            );
        }
        Command::RunAll => {
            let summary = experiment::run_all(&cfg, |line| println!("{line}"))?;
            write_output(&cfg, "summary.json", &serde_json::to_string_pretty(&summary)?)?;
        }
    }
    Ok(())
}

fn mode_of(id: &str) -> String {
    if id.ends_with("_sim") {
        "sim"
    } else if id.ends_with("_oracle") {
        "oracle"
    } else {
        "unknown"
    }
    .into()
}

fn sanitize(name: &str) -> String {
    let stem = std::path::Path::new(name).file_stem().and_then(|s| s.to_str()).unwrap_or(name);
    stem.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", serde_json::json!({"error": "usage", "message": e.to_string().trim()}));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}
