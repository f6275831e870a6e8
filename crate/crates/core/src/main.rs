use std::path::PathBuf;
use std::process::ExitCode;

use beliefunc::pipeline::{self, DistillMode, ExperimentConfig, Run, TrackerChoice};
use beliefunc::policy::StateSource;
use beliefunc::tracker::BeliefMode;
use beliefunc::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "beliefunc",
    version,
    about = "Uncertainty-aware belief tracking and dialogue policy experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; defaults apply to omitted fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DistillArg {
    End,
    End2,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Binary,
    Confidence,
    TotalUnc,
    KnowledgeUnc,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrackerArg {
    Single,
    Ensemble,
    End,
    End2,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Oracle,
    Predicted,
}

#[derive(Args, Clone)]
struct PolicyArgs {
    #[command(flatten)]
    common: Common,
    /// Belief-state mode (defaults to the config).
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Tracker driving the policy (defaults to the config).
    #[arg(long, value_enum)]
    tracker: Option<TrackerArg>,
    /// Belief states used for supervised pretraining (defaults to the config).
    #[arg(long, value_enum)]
    source: Option<SourceArg>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the ontology, vocabulary and database.
    GenWorld(Common),
    /// Simulate train/valid/test dialogues with the scripted wizard.
    GenCorpus(Common),
    /// Train the bagged ensemble of trackers.
    TrainEnsemble(Common),
    /// Distil the ensemble into one tracker.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<DistillArg>,
    },
    /// JGA, L2 and ECE of every tracker on the test split.
    EvalCalibration(Common),
    /// Pretrain on corpus belief states, then fine-tune with PPO.
    TrainPolicy(PolicyArgs),
    /// Greedy evaluation of a trained policy in the simulator.
    EvalPolicy(PolicyArgs),
    /// Aggregate policy evaluations below --out into one table.
    Report(Common),
}

fn run_for(c: &Common) -> Result<Run> {
    let config = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    Run::new(config, c.seed, c.out.clone())
}

fn policy_choice(a: &PolicyArgs, run: &Run) -> (TrackerChoice, BeliefMode, StateSource) {
    let p = run.config.policy;
    let tracker = a.tracker.map_or(p.tracker, |t| match t {
        TrackerArg::Single => TrackerChoice::Single,
        TrackerArg::Ensemble => TrackerChoice::Ensemble,
        TrackerArg::End => TrackerChoice::End,
        TrackerArg::End2 => TrackerChoice::End2,
    });
    let mode = a.mode.map_or(p.mode, |m| match m {
        ModeArg::Binary => BeliefMode::Binary,
        ModeArg::Confidence => BeliefMode::Confidence,
        ModeArg::TotalUnc => BeliefMode::TotalUnc,
        ModeArg::KnowledgeUnc => BeliefMode::KnowledgeUnc,
    });
    let source = a.source.map_or(p.source, |s| match s {
        SourceArg::Oracle => StateSource::Oracle,
        SourceArg::Predicted => StateSource::Predicted,
    });
    (tracker, mode, source)
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenWorld(c) => {
            let w = pipeline::gen_world(&run_for(&c)?)?;
            println!("world {}", w.fingerprint());
        }
        Command::GenCorpus(c) => {
            let s = pipeline::gen_corpus(&run_for(&c)?)?;
            println!(
                "corpus {} / {} / {}",
                s.train.len(),
                s.valid.len(),
                s.test.len()
            );
        }
        Command::TrainEnsemble(c) => print_json(&pipeline::train_ensemble(&run_for(&c)?)?)?,
        Command::Distill { common, mode } => {
            let run = run_for(&common)?;
            let mode = mode.map_or(run.config.distill_mode, |m| match m {
                DistillArg::End => DistillMode::End,
                DistillArg::End2 => DistillMode::End2,
            });
            print_json(&pipeline::distill(&run, mode)?)?;
        }
        Command::EvalCalibration(c) => {
            let r = pipeline::eval_calibration(&run_for(&c)?)?;
            print!("{}", beliefunc::calib::metrics_csv(&r.rows));
        }
        Command::TrainPolicy(a) => {
            let run = run_for(&a.common)?;
            let (t, m, s) = policy_choice(&a, &run);
            print_json(&pipeline::train_policy(&run, t, m, s)?)?;
        }
        Command::EvalPolicy(a) => {
            let run = run_for(&a.common)?;
            let (t, m, s) = policy_choice(&a, &run);
            print_json(&pipeline::eval_policy(&run, t, m, s)?)?;
        }
        Command::Report(c) => {
            let r = pipeline::report(&run_for(&c)?)?;
            println!("tracker,mode,source,runs,success,reward,turns");
            for row in &r.rows {
                println!(
                    "{},{},{},{},{:.4},{:.3},{:.2}",
                    row.tracker, row.mode, row.source, row.runs, row.success, row.reward, row.turns
                );
            }
            if let Some(x) = r.latency_ratio {
                println!("ensemble/single latency ratio: {x:.2}");
            }
        }
    }
    Ok(())
}

fn report_error(e: &Error) {
    let mut v = serde_json::json!({ "error": e.code(), "message": e.to_string() });
    if let Error::MissingArtifact { path, .. } | Error::Io { path, .. } = e {
        v["path"] = serde_json::Value::String(path.display().to_string());
    }
    eprintln!("{v}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e);
            ExitCode::from(2)
        }
    }
}
