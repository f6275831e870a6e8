use std::fs;
use std::path::Path;

use beliefunc::pipeline::{self, DistillMode, ExperimentConfig, Run, TrackerChoice};
use beliefunc::policy::StateSource;
use beliefunc::tracker::BeliefMode;
use beliefunc::Error;

fn tiny(out: &Path, seed: u64) -> Run {
    let cfg = ExperimentConfig::from_json(
        r#"{"corpus": {"train": 40, "valid": 8, "test": 12},
            "train": {"max_epochs": 2, "patience": 2},
            "ensemble": {"members": 2},
            "policy": {"eval_dialogues": 10,
                       "train": {"pretrain_epochs": 2, "ppo": {"frames": 120, "dialogues_per_update": 6}}}}"#,
    )
    .unwrap();
    Run::new(cfg, Some(seed), Some(out.to_path_buf())).unwrap()
}

fn full_pipeline(run: &Run) {
    pipeline::gen_world(run).unwrap();
    pipeline::gen_corpus(run).unwrap();
    pipeline::train_ensemble(run).unwrap();
    for mode in DistillMode::ALL {
        pipeline::distill(run, mode).unwrap();
    }
    pipeline::eval_calibration(run).unwrap();
    let (t, m, s) = (
        TrackerChoice::End2,
        BeliefMode::KnowledgeUnc,
        StateSource::Predicted,
    );
    pipeline::train_policy(run, t, m, s).unwrap();
    pipeline::eval_policy(run, t, m, s).unwrap();
}

const DETERMINISTIC: &[&str] = &[
    "world.json",
    "corpus/train.jsonl",
    "corpus/test.jsonl",
    "ensemble/member-0.ckpt",
    "ensemble/member-1.ckpt",
    "distill/end.ckpt",
    "distill/end2.ckpt",
    "calibration/metrics.csv",
    "calibration/reliability-ensemble.csv",
    "calibration/reliability-end2.csv",
    "policy/end2-knowledge_unc-predicted.ckpt",
    "policy/ppo-end2-knowledge_unc-predicted.csv",
    "policy/eval-end2-knowledge_unc-predicted.csv",
];

#[test]
fn same_seed_reproduces_every_artifact_byte_for_byte() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    full_pipeline(&tiny(a.path(), 3));
    full_pipeline(&tiny(b.path(), 3));
    for rel in DETERMINISTIC {
        let x = fs::read(a.path().join(rel)).unwrap();
        let y = fs::read(b.path().join(rel)).unwrap();
        assert!(x == y, "{rel} differs between identical runs");
    }
    // a different seed should actually change things
    let c = tempfile::tempdir().unwrap();
    let run = tiny(c.path(), 4);
    pipeline::gen_world(&run).unwrap();
    pipeline::gen_corpus(&run).unwrap();
    assert_ne!(
        fs::read(a.path().join("corpus/train.jsonl")).unwrap(),
        fs::read(c.path().join("corpus/train.jsonl")).unwrap()
    );
}

#[test]
fn missing_dependencies_name_the_expected_path() {
    let dir = tempfile::tempdir().unwrap();
    let run = tiny(dir.path(), 0);
    match pipeline::gen_corpus(&run) {
        Err(Error::MissingArtifact { path, .. }) => assert_eq!(path, run.world_path()),
        other => panic!("expected a missing world, got {other:?}"),
    }
    pipeline::gen_world(&run).unwrap();
    pipeline::gen_corpus(&run).unwrap();
    match pipeline::distill(&run, DistillMode::End2) {
        Err(Error::MissingArtifact { path, .. }) => assert_eq!(path, run.member_path(0)),
        other => panic!("expected a missing ensemble, got {other:?}"),
    }
    let err = pipeline::distill(&run, DistillMode::End2).unwrap_err();
    assert!(err.to_string().contains("member-0.ckpt"), "{err}");
    assert_eq!(err.code(), "missing_artifact");
}

#[test]
fn checkpoints_refuse_the_wrong_mode_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let run = tiny(dir.path(), 1);
    pipeline::gen_world(&run).unwrap();
    pipeline::gen_corpus(&run).unwrap();
    pipeline::train_ensemble(&run).unwrap();
    pipeline::distill(&run, DistillMode::End).unwrap();
    let world = pipeline::load_world(&run).unwrap();

    // a categorical student placed where the Dirichlet one is expected
    fs::copy(
        run.distilled_path(DistillMode::End),
        run.distilled_path(DistillMode::End2),
    )
    .unwrap();
    assert!(pipeline::load_distilled(&run, &world, DistillMode::End2).is_err());

    // knowledge uncertainty is undefined for a categorical tracker
    let err = pipeline::train_policy(
        &run,
        TrackerChoice::End,
        BeliefMode::KnowledgeUnc,
        StateSource::Predicted,
    )
    .unwrap_err();
    assert_eq!(err.code(), "mode_unsupported");

    // a binary policy loaded as a confidence policy
    let (t, s) = (TrackerChoice::End, StateSource::Oracle);
    pipeline::train_policy(&run, t, BeliefMode::Binary, s).unwrap();
    fs::create_dir_all(
        run.policy_path(t, BeliefMode::Confidence, s)
            .parent()
            .unwrap(),
    )
    .unwrap();
    fs::copy(
        run.policy_path(t, BeliefMode::Binary, s),
        run.policy_path(t, BeliefMode::Confidence, s),
    )
    .unwrap();
    assert!(pipeline::load_policy(&run, &world, t, BeliefMode::Confidence, s).is_err());
    assert!(pipeline::load_policy(&run, &world, t, BeliefMode::Binary, s).is_ok());

    // artifacts from another world config are rejected
    let mut other = run.config.clone();
    other.world.db_rows += 1;
    let other = Run::new(other, None, None).unwrap();
    assert!(matches!(
        pipeline::load_world(&other),
        Err(Error::Config(_))
    ));
}

fn write_eval(root: &Path, seed: u64, rows: &[(&str, &str, usize, f64, f64, f64)]) {
    let dir = root.join(format!("seed-{seed}/policy"));
    fs::create_dir_all(&dir).unwrap();
    for (i, (tracker, mode, n, s, r, t)) in rows.iter().enumerate() {
        let text = format!(
            "tracker,mode,source,seed,dialogues,success,reward,turns\n{tracker},{mode},predicted,{seed},{n},{s},{r},{t}\n"
        );
        fs::write(dir.join(format!("eval-{i}.csv")), text).unwrap();
    }
}

#[test]
fn report_pools_seeds_weighted_by_dialogues() {
    let dir = tempfile::tempdir().unwrap();
    write_eval(
        dir.path(),
        0,
        &[
            ("end2", "binary", 100, 0.5, 1.0, 10.0),
            ("end2", "confidence", 100, 0.9, 5.0, 8.0),
        ],
    );
    write_eval(dir.path(), 1, &[("end2", "binary", 300, 0.7, 3.0, 12.0)]);
    // unrelated CSVs are ignored
    fs::write(dir.path().join("seed-0/policy/ppo-x.csv"), "update\n").unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.out = dir.path().to_path_buf();
    let run = Run::new(cfg, None, None).unwrap();
    let timing = run.timing_path();
    for (stage, ms) in [("track-single", 2.0), ("track-ensemble-10", 18.0)] {
        pipeline::append_timing(
            &timing,
            &pipeline::TimingRow {
                stage: stage.into(),
                mean_ms_per_turn: ms,
                turns: 5,
            },
        )
        .unwrap();
    }

    let r = pipeline::report(&run).unwrap();
    assert_eq!(r.rows.len(), 2);
    let bin = &r.rows[0];
    assert_eq!(
        (bin.mode.as_str(), bin.runs, bin.dialogues),
        ("binary", 2, 400)
    );
    assert!((bin.success - 0.65).abs() < 1e-12);
    assert!((bin.reward - 2.5).abs() < 1e-12);
    assert!((bin.turns - 11.5).abs() < 1e-12);
    assert_eq!(r.rows[1].mode, "confidence");
    assert_eq!(r.latency_ratio, Some(9.0));
    let csv = fs::read_to_string(dir.path().join("report/policy.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    fs::write(dir.path().join("seed-1/policy/eval-9.csv"), "garbage\n").unwrap();
    assert!(pipeline::report(&run).is_err());
}

#[test]
fn ensemble_tracking_is_slower_than_one_member() {
    let dir = tempfile::tempdir().unwrap();
    let run = tiny(dir.path(), 2);
    pipeline::gen_world(&run).unwrap();
    pipeline::gen_corpus(&run).unwrap();
    pipeline::train_ensemble(&run).unwrap();
    pipeline::eval_calibration(&run).unwrap();
    let rows = pipeline::read_timing(&run.timing_path()).unwrap();
    let single = rows.iter().find(|r| r.stage == "track-single").unwrap();
    let ens = rows.iter().find(|r| r.stage == "track-ensemble-2").unwrap();
    assert!(
        ens.mean_ms_per_turn > single.mean_ms_per_turn,
        "{ens:?} vs {single:?}"
    );
    // students were not trained, so they are simply absent from the table
    let csv = fs::read_to_string(run.path("calibration/metrics.csv")).unwrap();
    assert!(csv.contains("ensemble") && !csv.contains("end2"));
}

#[test]
fn config_schema_file_lists_every_field() {
    let schema: serde_json::Value = serde_json::from_str(include_str!(
        "../../../schemas/experiment-config.schema.json"
    ))
    .unwrap();
    let defaults = serde_json::to_value(ExperimentConfig::default()).unwrap();
    fn check(schema: &serde_json::Value, value: &serde_json::Value, at: &str) {
        let Some(obj) = value.as_object() else { return };
        let props = schema["properties"]
            .as_object()
            .unwrap_or_else(|| panic!("{at}: schema has no properties"));
        assert_eq!(schema["additionalProperties"], false, "{at}");
        let mut a: Vec<_> = obj.keys().collect();
        let mut b: Vec<_> = props.keys().collect();
        a.sort();
        b.sort();
        assert_eq!(a, b, "{at}");
        for (k, v) in obj {
            check(&props[k], v, &format!("{at}.{k}"));
        }
    }
    check(&schema, &defaults, "$");
}
