use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::{DistillMode, TrackerChoice};
use super::store::{append_timing, read_timing, write_text, Run, TimingRow};
use crate::calib::{
    metrics_csv, reliability_csv, reliability_table, summarize, MetricSummary, TurnEvaluation,
};
use crate::dialoguesim::{
    build_world, generate_splits, read_corpus, write_corpus, CorpusSplit, Dialogue, World,
};
use crate::diffnet::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::ensemble::make_bagged_subsets;
use crate::error::{Error, Result};
use crate::policy::{
    evaluate_policy, imitation_accuracy, pretrain_supervised, pretraining_examples, train_ppo,
    EvalSummary, Policy, StateSource, TrackerRef,
};
use crate::rng::{derive_seed, stream};
use crate::tracker::{
    predict_ensemble, teacher_targets, train_tracker, BeliefMode, OutputKind, Supervision,
    TrackerModel, TrackerOutput, TrainReport,
};

const POLICY_KIND: &str = "policy";

fn inputs(dialogues: &[Dialogue]) -> Vec<Vec<Vec<u32>>> {
    dialogues
        .iter()
        .map(|d| d.turns.iter().map(|t| t.input()).collect())
        .collect()
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

pub fn gen_world(run: &Run) -> Result<World> {
    run.write_config()?;
    let world = build_world(&run.config.world, derive_seed(run.seed(), "world"))?;
    run.write_text("world.json", &world.to_json()?)?;
    info!(
        "world {} written to {}",
        world.fingerprint(),
        run.world_path().display()
    );
    Ok(world)
}

pub fn load_world(run: &Run) -> Result<World> {
    let p = run.world_path();
    run.require("world", &p)?;
    let world = World::from_json(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?;
    if world.config != run.config.world {
        return Err(Error::Config(format!(
            "{} was built from a different world config; re-run gen-world",
            p.display()
        )));
    }
    Ok(world)
}

const SPLITS: [&str; 3] = ["train", "valid", "test"];

pub fn gen_corpus(run: &Run) -> Result<CorpusSplit> {
    let world = load_world(run)?;
    run.write_config()?;
    let c = run.config.corpus;
    let split = generate_splits(
        &world,
        derive_seed(run.seed(), "corpus"),
        (c.train, c.valid, c.test),
        run.config.sim,
    )?;
    let mut summary = BTreeMap::new();
    for (name, dialogues) in SPLITS.iter().zip([&split.train, &split.valid, &split.test]) {
        let path = run.corpus_path(name);
        ensure_parent(&path)?;
        let tmp = path.with_extension("jsonl.tmp");
        write_corpus(&tmp, &world, dialogues)?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        let turns: usize = dialogues.iter().map(|d| d.turns.len()).sum();
        let variant = dialogues
            .iter()
            .flat_map(|d| &d.turns)
            .filter(|t| !t.labels.variant_slots.is_empty())
            .count();
        let success = dialogues.iter().filter(|d| d.result.success).count();
        summary.insert(
            *name,
            json!({ "dialogues": dialogues.len(), "turns": turns, "variant_turns": variant, "wizard_successes": success }),
        );
    }
    run.write_json("corpus/summary.json", &summary)?;
    info!(
        "corpus written: {} / {} / {} dialogues",
        c.train, c.valid, c.test
    );
    Ok(split)
}

pub fn load_corpus(run: &Run, world: &World) -> Result<CorpusSplit> {
    let read = |name: &str| read_corpus(&run.corpus_path(name), world);
    Ok(CorpusSplit {
        train: read("train")?,
        valid: read("valid")?,
        test: read("test")?,
    })
}

fn tracker_meta(model: &TrackerModel, role: &str, report: &TrainReport) -> CheckpointMeta {
    let mut meta = model.checkpoint_meta();
    meta.extra = json!({ "config": model.config, "role": role, "best_epoch": report.best_epoch });
    meta
}

/// Trains every member on its bagged subset of the training split.
pub fn train_ensemble(run: &Run) -> Result<Vec<TrainReport>> {
    let world = load_world(run)?;
    let split = load_corpus(run, &world)?;
    run.write_config()?;
    let cfg = &run.config;
    let seed = run.seed();
    let plans = make_bagged_subsets(
        split.train.len(),
        cfg.ensemble.members,
        cfg.ensemble.fraction,
        derive_seed(seed, "subsets"),
    )?;
    run.write_json("ensemble/plan.json", &plans)?;
    fs::create_dir_all(run.path("ensemble")).map_err(|e| Error::io(run.path("ensemble"), e))?;

    let train_one = |k: usize| -> Result<TrainReport> {
        let mut model = TrackerModel::new(
            &world,
            cfg.tracker,
            OutputKind::Categorical,
            &mut stream(seed, &format!("init/member-{k}")),
        )?;
        let report = train_tracker(
            &mut model,
            &split.train,
            &plans[k].record_ids,
            &split.valid,
            Supervision::Gold,
            &cfg.train,
            &mut stream(seed, &format!("order/member-{k}")),
        )?;
        save_checkpoint(
            &run.member_path(k),
            &model.params,
            &tracker_meta(&model, "member", &report),
        )?;
        info!(
            "member {k}: best epoch {} of {}, {:.0}s",
            report.best_epoch, report.epochs_run, report.seconds
        );
        Ok(report)
    };

    let m = cfg.ensemble.members;
    let workers = cfg.ensemble.threads.min(m);
    let mut results: Vec<Option<Result<TrainReport>>> = (0..m).map(|_| None).collect();
    if workers <= 1 {
        for (k, slot) in results.iter_mut().enumerate() {
            *slot = Some(train_one(k));
        }
    } else {
        // members are independent; worker w takes k ≡ w (mod workers)
        let done: Vec<Vec<(usize, Result<TrainReport>)>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let train_one = &train_one;
                    s.spawn(move || {
                        (w..m)
                            .step_by(workers)
                            .map(|k| (k, train_one(k)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("member training thread panicked"))
                .collect()
        });
        for (k, r) in done.into_iter().flatten() {
            results[k] = Some(r);
        }
    }
    let reports: Vec<TrainReport> = results
        .into_iter()
        .map(|r| r.expect("every member trained"))
        .collect::<Result<_>>()?;
    run.write_json("ensemble/reports.json", &reports)?;
    Ok(reports)
}

fn load_tracker_file(
    run: &Run,
    world: &World,
    path: &Path,
    kind: OutputKind,
) -> Result<TrackerModel> {
    let fp = world.fingerprint();
    let (params, _) = load_checkpoint(path, Some(&fp), Some(kind.as_str()))?;
    TrackerModel::from_params(world, run.config.tracker, kind, params)
}

pub fn load_ensemble(run: &Run, world: &World) -> Result<Vec<TrackerModel>> {
    (0..run.config.ensemble.members)
        .map(|k| load_tracker_file(run, world, &run.member_path(k), OutputKind::Categorical))
        .collect()
}

fn distilled_kind(mode: DistillMode) -> OutputKind {
    match mode {
        DistillMode::End => OutputKind::Categorical,
        DistillMode::End2 => OutputKind::Dirichlet,
    }
}

pub fn load_distilled(run: &Run, world: &World, mode: DistillMode) -> Result<TrackerModel> {
    load_tracker_file(run, world, &run.distilled_path(mode), distilled_kind(mode))
}

/// Distils the trained ensemble into one student.
pub fn distill(run: &Run, mode: DistillMode) -> Result<TrainReport> {
    let world = load_world(run)?;
    let members = load_ensemble(run, &world)?;
    let split = load_corpus(run, &world)?;
    run.write_config()?;
    let seed = run.seed();
    let teacher = teacher_targets(&members, &split.train)?;
    let sup = match mode {
        DistillMode::End => Supervision::End(&teacher),
        DistillMode::End2 => Supervision::End2(&teacher),
    };
    let tag = mode.as_str();
    let mut student = TrackerModel::new(
        &world,
        run.config.tracker,
        distilled_kind(mode),
        &mut stream(seed, &format!("init/{tag}")),
    )?;
    let ids: Vec<usize> = (0..split.train.len()).collect();
    let report = train_tracker(
        &mut student,
        &split.train,
        &ids,
        &split.valid,
        sup,
        &run.config.train,
        &mut stream(seed, &format!("order/{tag}")),
    )?;
    let path = run.distilled_path(mode);
    ensure_parent(&path)?;
    save_checkpoint(
        &path,
        &student.params,
        &tracker_meta(&student, tag, &report),
    )?;
    run.write_json(&format!("distill/{tag}-report.json"), &report)?;
    info!(
        "{tag} student: best epoch {} of {}",
        report.best_epoch, report.epochs_run
    );
    Ok(report)
}

/// A tracker ready for tracking or for driving a policy.
pub enum LoadedTracker {
    Single(TrackerModel),
    Ensemble(Vec<TrackerModel>),
}

impl LoadedTracker {
    pub fn as_ref(&self) -> TrackerRef<'_> {
        match self {
            LoadedTracker::Single(m) => TrackerRef::Single(m),
            LoadedTracker::Ensemble(ms) => TrackerRef::Ensemble(ms),
        }
    }
}

pub fn load_tracker(run: &Run, world: &World, choice: TrackerChoice) -> Result<LoadedTracker> {
    Ok(match choice {
        TrackerChoice::Single => LoadedTracker::Single(load_tracker_file(
            run,
            world,
            &run.member_path(0),
            OutputKind::Categorical,
        )?),
        TrackerChoice::Ensemble => LoadedTracker::Ensemble(load_ensemble(run, world)?),
        TrackerChoice::End => LoadedTracker::Single(load_distilled(run, world, DistillMode::End)?),
        TrackerChoice::End2 => {
            LoadedTracker::Single(load_distilled(run, world, DistillMode::End2)?)
        }
    })
}

fn evaluations(
    dialogues: &[Dialogue],
    outputs: &[Vec<TrackerOutput>],
) -> Result<Vec<TurnEvaluation>> {
    let mut evals = Vec::new();
    for (d, outs) in dialogues.iter().zip(outputs) {
        for (t, o) in d.turns.iter().zip(outs) {
            evals.push(TurnEvaluation::new(
                o.predictive_goal(),
                t.labels.goal.clone(),
            )?);
        }
    }
    Ok(evals)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    /// `(model, metrics)` in CSV order: members, their mean, ensemble, students.
    pub rows: Vec<(String, MetricSummary)>,
    pub single_mean: MetricSummary,
    pub ensemble: MetricSummary,
    pub end: Option<MetricSummary>,
    pub end2: Option<MetricSummary>,
}

/// JGA / L2 / ECE on the test split for every available tracker.
pub fn eval_calibration(run: &Run) -> Result<CalibrationReport> {
    let world = load_world(run)?;
    let members = load_ensemble(run, &world)?;
    let split = load_corpus(run, &world)?;
    run.write_config()?;
    let cal = run.config.calibration;
    let test_inputs = inputs(&split.test);
    let turns: usize = test_inputs.iter().map(Vec::len).sum();

    let mut rows = Vec::new();
    let mut tables = Vec::new();
    let mut per_member = Vec::with_capacity(members.len());
    let mut single_ms = 0.0;
    for (k, m) in members.iter().enumerate() {
        let t0 = Instant::now();
        let outs = m.track(&test_inputs, 64)?;
        if k == 0 {
            single_ms = t0.elapsed().as_secs_f64() * 1e3 / turns as f64;
        }
        let evals = evaluations(&split.test, &outs)?;
        let s = summarize(&evals, cal.bins, cal.l2)?;
        if k == 0 {
            tables.push(("member-0".to_string(), reliability_table(&evals, cal.bins)?));
        }
        rows.push((format!("member-{k}"), s));
        per_member.push(outs);
    }
    let n = members.len() as f64;
    let single_mean = MetricSummary {
        jga: rows.iter().map(|r| r.1.jga).sum::<f64>() / n,
        l2: rows.iter().map(|r| r.1.l2).sum::<f64>() / n,
        ece: rows.iter().map(|r| r.1.ece).sum::<f64>() / n,
    };
    rows.push(("single-mean".into(), single_mean));

    // time the ensemble end to end, as a deployed system would run it
    let t0 = Instant::now();
    let ens_outs = predict_ensemble(&members, &test_inputs)?;
    let ensemble_ms = t0.elapsed().as_secs_f64() * 1e3 / turns as f64;
    drop(per_member);
    let evals = evaluations(&split.test, &ens_outs)?;
    let ensemble = summarize(&evals, cal.bins, cal.l2)?;
    rows.push(("ensemble".into(), ensemble));
    tables.push(("ensemble".into(), reliability_table(&evals, cal.bins)?));

    let timing = run.timing_path();
    append_timing(
        &timing,
        &TimingRow {
            stage: "track-single".into(),
            mean_ms_per_turn: single_ms,
            turns,
        },
    )?;
    append_timing(
        &timing,
        &TimingRow {
            stage: format!("track-ensemble-{}", members.len()),
            mean_ms_per_turn: ensemble_ms,
            turns,
        },
    )?;

    let mut students = [None, None];
    for (slot, mode) in students.iter_mut().zip(DistillMode::ALL) {
        let student = match load_distilled(run, &world, mode) {
            Ok(s) => s,
            Err(Error::MissingArtifact { path, .. }) => {
                warn!(
                    "no {} student at {}; skipped",
                    mode.as_str(),
                    path.display()
                );
                continue;
            }
            Err(e) => return Err(e),
        };
        let evals = evaluations(&split.test, &student.track(&test_inputs, 64)?)?;
        let s = summarize(&evals, cal.bins, cal.l2)?;
        rows.push((mode.as_str().into(), s));
        tables.push((mode.as_str().into(), reliability_table(&evals, cal.bins)?));
        *slot = Some(s);
    }

    run.write_text("calibration/metrics.csv", &metrics_csv(&rows))?;
    for (name, table) in &tables {
        run.write_text(
            &format!("calibration/reliability-{name}.csv"),
            &reliability_csv(table),
        )?;
    }
    let [end, end2] = students;
    let report = CalibrationReport {
        rows,
        single_mean,
        ensemble,
        end,
        end2,
    };
    run.write_json("calibration/summary.json", &report)?;
    Ok(report)
}

fn source_str(s: StateSource) -> &'static str {
    match s {
        StateSource::Oracle => "oracle",
        StateSource::Predicted => "predicted",
    }
}

fn check_mode(tracker: &LoadedTracker, choice: TrackerChoice, mode: BeliefMode) -> Result<()> {
    if mode == BeliefMode::KnowledgeUnc && tracker.as_ref().kind() != OutputKind::Dirichlet {
        // knowledge uncertainty needs a Dirichlet tracker
        return Err(Error::ModeUnsupported(format!(
            "{mode}` with the categorical `{choice}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyTrainSummary {
    pub examples: usize,
    pub pretrain_losses: Vec<f64>,
    pub imitation_accuracy: f64,
    pub ppo_updates: usize,
    pub ppo_frames: usize,
}

/// Supervised pretraining on corpus belief states, then PPO in the simulator.
pub fn train_policy(
    run: &Run,
    choice: TrackerChoice,
    mode: BeliefMode,
    source: StateSource,
) -> Result<PolicyTrainSummary> {
    let world = load_world(run)?;
    let tracker = load_tracker(run, &world, choice)?;
    check_mode(&tracker, choice, mode)?;
    let split = load_corpus(run, &world)?;
    run.write_config()?;
    let seed = run.seed();
    let pc = &run.config.policy.train;
    let stem = format!("{choice}-{mode}-{}", source_str(source));
    let tr = tracker.as_ref();

    let examples = pretraining_examples(&world, &split.train, tr, mode, source)?;
    let mut policy = Policy::new(
        &world,
        mode,
        pc.hidden,
        &mut stream(seed, &format!("policy/init/{stem}")),
    )?;
    let losses = pretrain_supervised(
        &mut policy,
        &examples,
        pc,
        &mut stream(seed, &format!("policy/order/{stem}")),
    )?;
    let accuracy = imitation_accuracy(&policy, &examples)?;
    let log = train_ppo(
        &world,
        tr,
        &mut policy,
        run.config.sim,
        &pc.ppo,
        derive_seed(seed, &format!("rollout/{stem}")),
    )?;

    let path = run.policy_path(choice, mode, source);
    ensure_parent(&path)?;
    let meta = CheckpointMeta {
        kind: POLICY_KIND.into(),
        mode: mode.as_str().into(),
        fingerprint: world.fingerprint(),
        extra: json!({ "hidden": pc.hidden, "tracker": choice, "source": source }),
    };
    save_checkpoint(&path, &policy.params, &meta)?;
    let mut csv = String::from("update,frames,mean_reward,success,loss\n");
    for d in &log {
        let _ = writeln!(
            csv,
            "{},{},{:.6},{:.6},{:.6}",
            d.iteration, d.frames, d.mean_reward, d.success, d.loss
        );
    }
    write_text(&run.ppo_log_path(choice, mode, source), &csv)?;
    let summary = PolicyTrainSummary {
        examples: examples.len(),
        pretrain_losses: losses,
        imitation_accuracy: accuracy,
        ppo_updates: log.len(),
        ppo_frames: log.last().map_or(0, |d| d.frames),
    };
    run.write_json(&format!("policy/train-{stem}.json"), &summary)?;
    info!(
        "policy {stem}: imitation {:.3}, {} PPO updates",
        accuracy, summary.ppo_updates
    );
    Ok(summary)
}

pub fn load_policy(
    run: &Run,
    world: &World,
    choice: TrackerChoice,
    mode: BeliefMode,
    source: StateSource,
) -> Result<Policy> {
    let path = run.policy_path(choice, mode, source);
    let (params, meta) = load_checkpoint(&path, Some(&world.fingerprint()), Some(mode.as_str()))?;
    if meta.kind != POLICY_KIND {
        return Err(Error::Format(format!(
            "{} holds a `{}` checkpoint",
            path.display(),
            meta.kind
        )));
    }
    Policy::from_params(world, mode, run.config.policy.train.hidden, params)
}

const EVAL_HEADER: &str = "tracker,mode,source,seed,dialogues,success,reward,turns";

/// Greedy evaluation against fresh simulated users.
pub fn eval_policy(
    run: &Run,
    choice: TrackerChoice,
    mode: BeliefMode,
    source: StateSource,
) -> Result<EvalSummary> {
    let world = load_world(run)?;
    let tracker = load_tracker(run, &world, choice)?;
    check_mode(&tracker, choice, mode)?;
    let policy = load_policy(run, &world, choice, mode, source)?;
    run.write_config()?;
    let s = evaluate_policy(
        &world,
        tracker.as_ref(),
        &policy,
        run.config.sim,
        run.config.policy.eval_dialogues,
        derive_seed(run.seed(), "eval"),
    )?;
    let csv = format!(
        "{EVAL_HEADER}\n{choice},{mode},{},{},{},{:.6},{:.6},{:.6}\n",
        source_str(source),
        run.seed(),
        s.dialogues,
        s.success,
        s.reward,
        s.turns
    );
    write_text(&run.policy_eval_path(choice, mode, source), &csv)?;
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub tracker: String,
    pub mode: String,
    pub source: String,
    pub runs: usize,
    pub dialogues: usize,
    pub success: f64,
    pub reward: f64,
    pub turns: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    /// Ensemble / single per-turn latency, when timings exist.
    pub latency_ratio: Option<f64>,
}

/// Reference latency ratio of a 10-member ensemble over one model
/// (768.0256 ms vs 77.768 ms per turn); context only.
const REFERENCE_LATENCY_RATIO: f64 = 768.0256 / 77.768;

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Aggregates every policy evaluation CSV below the run directory (so a
/// parent of several seed directories pools them) into a mode table.
pub fn report(run: &Run) -> Result<Report> {
    let mut files = Vec::new();
    collect_files(run.dir(), &mut files)?;
    let is_eval = |p: &Path| {
        p.file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("eval-") && n.ends_with(".csv"))
            && p.parent()
                .and_then(|d| d.file_name())
                .is_some_and(|n| n == "policy")
    };
    // (tracker, mode, source) → (runs, dialogues, Σ success·n, Σ reward·n, Σ turns·n)
    let mut groups: BTreeMap<(String, String, String), (usize, usize, f64, f64, f64)> =
        BTreeMap::new();
    for p in files.iter().filter(|p| is_eval(p)) {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(EVAL_HEADER) {
            return Err(Error::Format(format!(
                "{} is not a policy evaluation CSV",
                p.display()
            )));
        }
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("bad row `{line}` in {}", p.display()));
            if f.len() != 8 {
                return Err(bad());
            }
            let n: usize = f[4].parse().map_err(|_| bad())?;
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            let g = groups
                .entry((f[0].into(), f[1].into(), f[2].into()))
                .or_default();
            g.0 += 1;
            g.1 += n;
            g.2 += num(5)? * n as f64;
            g.3 += num(6)? * n as f64;
            g.4 += num(7)? * n as f64;
        }
    }
    let rows: Vec<ReportRow> = groups
        .into_iter()
        .map(|((tracker, mode, source), (runs, n, s, r, t))| ReportRow {
            tracker,
            mode,
            source,
            runs,
            dialogues: n,
            success: s / n as f64,
            reward: r / n as f64,
            turns: t / n as f64,
        })
        .collect();

    let mut single = Vec::new();
    let mut ensemble = Vec::new();
    for p in files
        .iter()
        .filter(|p| p.file_name().is_some_and(|n| n == "timing.csv"))
    {
        for row in read_timing(p)? {
            if row.stage == "track-single" {
                single.push(row.mean_ms_per_turn);
            } else if row.stage.starts_with("track-ensemble") {
                ensemble.push(row.mean_ms_per_turn);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let latency_ratio =
        (!single.is_empty() && !ensemble.is_empty()).then(|| mean(&ensemble) / mean(&single));

    let mut csv = String::from("tracker,mode,source,runs,dialogues,success,reward,turns\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{:.6},{:.6},{:.6}",
            r.tracker, r.mode, r.source, r.runs, r.dialogues, r.success, r.reward, r.turns
        );
    }
    run.write_text("report/policy.csv", &csv)?;
    run.write_json(
        "report/summary.json",
        &json!({
            "rows": rows,
            "latency_ratio": latency_ratio,
            "reference_latency_ratio": REFERENCE_LATENCY_RATIO,
        }),
    )?;
    Ok(Report {
        rows,
        latency_ratio,
    })
}
