use beliefunc::dialoguesim::{
    build_world, generate_corpus, Dialogue, SimConfig, World, WorldConfig,
};
use beliefunc::diffnet::{finite_diff_check, Tensor};
use beliefunc::distill::{smooth_binary, smooth_labels};
use beliefunc::rng::stream;
use beliefunc::tracker::{
    assemble_belief_state, belief_feature_len, multitask_loss, tape_dialogue_loss, teacher_targets,
    train_tracker, BeliefContext, BeliefMode, GoalBelief, LossWeights, OutputKind, Supervision,
    TrackerConfig, TrackerModel, TrackerOutput, TrainConfig,
};

fn world() -> World {
    build_world(&WorldConfig::default(), 5).unwrap()
}

fn model(w: &World, kind: OutputKind, seed: u64) -> TrackerModel {
    TrackerModel::new(
        w,
        TrackerConfig::default(),
        kind,
        &mut stream(seed, "tracker"),
    )
    .unwrap()
}

fn inputs(d: &[Dialogue]) -> Vec<Vec<Vec<u32>>> {
    d.iter()
        .map(|d| d.turns.iter().map(|t| t.input()).collect())
        .collect()
}

fn set(m: &mut TrackerModel, name: &str, t: Tensor) {
    let id = m.params.id(name).unwrap();
    m.params.set(id, t).unwrap();
}

#[test]
fn head_oracles() {
    let w = world();
    let mut m = model(&w, OutputKind::Categorical, 1);
    let h = m.config.hidden;
    set(&mut m, "head.general.w", Tensor::zeros(h, 3));
    set(&mut m, "head.general.b", Tensor::row(&[0.0, 10.0, -10.0]));
    set(&mut m, "head.request.w", Tensor::zeros(h, 1));
    set(&mut m, "head.domain.w", Tensor::zeros(h, 1));
    let corpus = generate_corpus(&w, 1, 1, SimConfig::default()).unwrap();
    let out = &m.track(&inputs(&corpus), 8).unwrap()[0][0];
    let z = 1.0 + 10f64.exp() + (-10f64).exp();
    let expect = [1.0 / z, 10f64.exp() / z, (-10f64).exp() / z];
    for (a, b) in out.general.probs().iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((out.general.probs()[0] - 4.54e-5).abs() < 1e-7);
    assert!(out.request.iter().all(|&r| r == 0.5));
    assert!(out.active.iter().all(|&a| a == 0.5));
    set(&mut m, "head.request.b", Tensor::row(&[2.0]));
    let out = &m.track(&inputs(&corpus), 8).unwrap()[0][0];
    assert!((out.request[0] - 0.880797).abs() < 1e-6);
}

#[test]
fn batched_tracking_matches_sessions_and_context_is_fixed() {
    let w = world();
    let m = model(&w, OutputKind::Dirichlet, 2);
    let corpus = generate_corpus(&w, 2, 12, SimConfig::default()).unwrap();
    let batched = m.track(&inputs(&corpus), 5).unwrap();
    let again = m.track(&inputs(&corpus), 64).unwrap();
    let mut session = m.session().unwrap();
    for (d, outs) in corpus.iter().zip(&batched) {
        session.reset();
        let shape = (session.context().rows(), session.context().cols());
        for (t, o) in d.turns.iter().zip(outs) {
            let s = session.step(&t.input()).unwrap();
            assert_eq!((session.context().rows(), session.context().cols()), shape);
            for (a, b) in s.predictive_goal().iter().zip(o.predictive_goal()) {
                for (x, y) in a.probs().iter().zip(b.probs()) {
                    assert!((x - y).abs() < 1e-10);
                }
            }
            assert!((s.general.probs()[1] - o.general.probs()[1]).abs() < 1e-10);
        }
    }
    // batch composition only changes rounding
    for (a, b) in batched.iter().flatten().zip(again.iter().flatten()) {
        for (x, y) in a.predictive_goal().iter().zip(b.predictive_goal()) {
            assert!(x
                .probs()
                .iter()
                .zip(y.probs())
                .all(|(p, q)| (p - q).abs() < 1e-10));
        }
    }
    assert_eq!(batched, m.track(&inputs(&corpus), 5).unwrap());
}

#[test]
fn loss_is_zero_at_targets_and_decomposes() {
    let w = world();
    let corpus = generate_corpus(&w, 3, 1, SimConfig::default()).unwrap();
    let labels = &corpus[0].turns[0].labels;
    let eps = 0.05;
    let onto = &w.ontology;
    let goal: Vec<GoalBelief> = onto
        .slot_refs()
        .iter()
        .zip(&labels.goal)
        .map(|(&r, &v)| {
            let t = smooth_labels(v, onto.slot(r).k(), eps).unwrap();
            GoalBelief::Categorical(t.probs)
        })
        .collect();
    let exact = TrackerOutput {
        goal,
        request: labels
            .requested
            .iter()
            .map(|&y| smooth_binary(y, eps))
            .collect(),
        active: labels
            .active
            .iter()
            .map(|&y| smooth_binary(y, eps))
            .collect(),
        general: smooth_labels(labels.general, 3, eps).unwrap().probs,
    };
    let l = multitask_loss(&exact, labels, &LossWeights::default(), eps).unwrap();
    assert!(l.total.abs() < 1e-12);

    let m = model(&w, OutputKind::Categorical, 3);
    let out = &m.track(&inputs(&corpus), 1).unwrap()[0][0];
    let wts = LossWeights {
        goal: 1.0,
        general: 0.2,
        request: 0.2,
        domain: 0.2,
    };
    let l = multitask_loss(out, labels, &wts, eps).unwrap();
    let one = |g, ge, r, d| {
        multitask_loss(
            out,
            labels,
            &LossWeights {
                goal: g,
                general: ge,
                request: r,
                domain: d,
            },
            eps,
        )
        .unwrap()
        .total
    };
    let recomposed = one(1.0, 0.0, 0.0, 0.0)
        + 0.2 * one(0.0, 1.0, 0.0, 0.0)
        + 0.2 * one(0.0, 0.0, 1.0, 0.0)
        + 0.2 * one(0.0, 0.0, 0.0, 1.0);
    assert!((l.total - recomposed).abs() < 1e-12);
    assert!(l.goal > 0.0 && l.general > 0.0 && l.request > 0.0 && l.domain > 0.0);
}

fn micro() -> (World, TrackerModel, Vec<Dialogue>) {
    let cfg = WorldConfig {
        domains: 1,
        slots_per_domain: 2,
        values_per_slot: 2,
        variants_per_value: 2,
        db_rows: 4,
        description_len: 3,
    };
    let w = build_world(&cfg, 9).unwrap();
    let tc = TrackerConfig {
        embed_dim: 3,
        hidden: 4,
        heads: 2,
        context_hidden: 4,
        pooler_width: 3,
        logit_scale: 2.0,
        max_turn_len: 32,
    };
    let m = TrackerModel::new(&w, tc, OutputKind::Categorical, &mut stream(4, "micro")).unwrap();
    let mut corpus = generate_corpus(&w, 4, 2, SimConfig::default()).unwrap();
    for d in &mut corpus {
        d.turns.truncate(2);
    }
    (w, m, corpus)
}

#[test]
fn end_to_end_gradients_for_every_supervision() {
    let (_, m, corpus) = micro();
    let cfg = TrainConfig::default();
    let teacher = {
        let mut others: Vec<TrackerModel> = Vec::new();
        for s in 0..3 {
            let mut o = m.clone();
            let fresh = TrackerModel::new(
                &micro().0,
                m.config,
                OutputKind::Categorical,
                &mut stream(100 + s, "member"),
            )
            .unwrap();
            o.params = fresh.params;
            others.push(o);
        }
        teacher_targets(&others, &corpus).unwrap()
    };
    let sups = [
        Supervision::Gold,
        Supervision::End(&teacher),
        Supervision::End2(&teacher),
    ];
    for (i, sup) in sups.into_iter().enumerate() {
        let mut mm = m.clone();
        if i == 2 {
            mm.kind = OutputKind::Dirichlet;
        }
        let report = finite_diff_check(
            &mm.params,
            |tape| tape_dialogue_loss(tape, &mm, &corpus, sup, 2.5, &cfg),
            1e-4,
            None,
        )
        .unwrap();
        assert!(report.passed, "supervision {i}: {:?}", report.worst());
    }
}

#[test]
fn feature_length_fixed_over_random_turns() {
    let w = world();
    let corpus = generate_corpus(&w, 6, 200, SimConfig::default()).unwrap();
    let cat = model(&w, OutputKind::Categorical, 6);
    let dir = model(&w, OutputKind::Dirichlet, 7);
    let ins = inputs(&corpus);
    let outs = [cat.track(&ins, 32).unwrap(), dir.track(&ins, 32).unwrap()];
    let mut n = 0;
    let ctx = BeliefContext::initial(w.ontology.num_domains());
    for (d, dialogue) in corpus.iter().enumerate() {
        for t in 0..dialogue.turns.len() {
            for mode in BeliefMode::ALL {
                let out = if mode == BeliefMode::KnowledgeUnc {
                    &outs[1]
                } else {
                    &outs[n % 2]
                };
                let b = assemble_belief_state(&out[d][t], &w, &ctx, mode).unwrap();
                let f = b.features();
                assert_eq!(f.len(), belief_feature_len(&w.ontology, mode));
                assert!(b.confidences.iter().all(|c| (0.0..=1.0).contains(c)));
                if mode == BeliefMode::Binary {
                    assert!(b.confidences.iter().all(|&c| c == 1.0));
                }
                if let Some(u) = &b.uncertainty {
                    assert!(u.iter().all(|&x| x >= -1e-12));
                }
            }
            n += 1;
        }
    }
    assert!(n >= 1000, "{n}");
}

#[test]
fn training_lowers_validation_loss() {
    let w = world();
    let train = generate_corpus(&w, 8, 120, SimConfig::default()).unwrap();
    let valid = generate_corpus(&w, 9, 30, SimConfig::default()).unwrap();
    let mut m = model(&w, OutputKind::Categorical, 8);
    let cfg = TrainConfig {
        max_epochs: 3,
        patience: 3,
        ..TrainConfig::default()
    };
    let ids: Vec<usize> = (0..train.len()).collect();
    let r = train_tracker(
        &mut m,
        &train,
        &ids,
        &valid,
        Supervision::Gold,
        &cfg,
        &mut stream(8, "order"),
    )
    .unwrap();
    assert_eq!(r.epochs_run, 3);
    assert!(r.valid_loss[r.best_epoch - 1] < r.valid_loss[0] || r.best_epoch == 1);
    assert!(r.train_loss.last().unwrap() < &r.train_loss[0]);
}

/// Wall-clock probe for one epoch on a full-size corpus.
#[test]
#[ignore]
fn epoch_timing_probe() {
    let w = world();
    let train = generate_corpus(&w, 10, 2000, SimConfig::default()).unwrap();
    let valid = generate_corpus(&w, 11, 200, SimConfig::default()).unwrap();
    let mut m = model(&w, OutputKind::Categorical, 10);
    let cfg = TrainConfig {
        max_epochs: 1,
        ..TrainConfig::default()
    };
    let ids: Vec<usize> = (0..train.len()).collect();
    let r = train_tracker(
        &mut m,
        &train,
        &ids,
        &valid,
        Supervision::Gold,
        &cfg,
        &mut stream(1, "o"),
    )
    .unwrap();
    eprintln!("{r:?}");
}
