use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::StepNodes;
use super::{TrackerModel, TrackerOutput};
use crate::dialoguesim::{Dialogue, SimTurn, TurnLabels};
use crate::diffnet::{Adam, LinearSchedule, NodeId, Tape};
use crate::distill::{
    label_smoothing_loss, proxy_dirichlet_target, smooth_binary, smooth_labels, tape_binary_kl,
    tape_end, tape_end2, tape_label_smoothing, ProxyDirichletTarget, TemperatureSchedule,
    ANNEAL_FRACTION, BASE_TEMPERATURE, DISTRIBUTION_SMOOTHING, LABEL_SMOOTHING,
};
use crate::ensemble::{predictive_posterior, EnsemblePrediction};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::uncmath::Categorical;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub goal: f64,
    pub general: f64,
    pub request: f64,
    pub domain: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            goal: 1.0,
            general: 0.2,
            request: 0.2,
            domain: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_proportion: f64,
    /// Training dialogues are cut to this many turns.
    pub max_dialogue_turns: usize,
    pub clip_norm: f64,
    pub weights: LossWeights,
    pub label_smoothing: f64,
    pub base_temperature: f64,
    pub anneal_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            patience: 25,
            batch_size: 16,
            learning_rate: 3e-3,
            warmup_proportion: 0.1,
            max_dialogue_turns: 12,
            clip_norm: 5.0,
            weights: LossWeights::default(),
            label_smoothing: LABEL_SMOOTHING,
            base_temperature: BASE_TEMPERATURE,
            anneal_fraction: ANNEAL_FRACTION,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 || self.max_dialogue_turns == 0 {
            return Err(Error::Config(
                "epochs, batch size and turn cap must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.warmup_proportion) {
            return Err(Error::Config("bad learning-rate schedule".into()));
        }
        if !(0.0..0.5).contains(&self.label_smoothing) || self.base_temperature < 1.0 {
            return Err(Error::Config("bad smoothing or temperature".into()));
        }
        Ok(())
    }
}

/// Ensemble statistics for one training turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherTurn {
    pub goal_posterior: Vec<Categorical>,
    pub goal_proxy: Vec<ProxyDirichletTarget>,
    pub request: Vec<f64>,
    pub active: Vec<f64>,
    pub general: Categorical,
}

/// How the student is supervised.
#[derive(Debug, Clone, Copy)]
pub enum Supervision<'a> {
    /// Label smoothing against gold labels.
    Gold,
    /// KL to the temperature-scaled ensemble posterior on every head.
    End(&'a [Vec<TeacherTurn>]),
    /// Proxy-Dirichlet loss on the goal head; the remaining heads keep
    /// label smoothing against gold.
    End2(&'a [Vec<TeacherTurn>]),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub train_loss: Vec<f64>,
    pub valid_loss: Vec<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub goal: f64,
    pub general: f64,
    pub request: f64,
    pub domain: f64,
    pub total: f64,
}

fn binary_kl(target: f64, p: f64) -> f64 {
    let term = |t: f64, q: f64| if t > 0.0 { t * (t / q).ln() } else { 0.0 };
    term(target, p) + term(1.0 - target, 1.0 - p)
}

/// Gold-label multitask loss of one prediction: label-smoothing KL for the
/// categorical heads and smoothed binary KL for requests and domains, each
/// summed over slots/domains and weighted.
pub fn multitask_loss(
    out: &TrackerOutput,
    labels: &TurnLabels,
    w: &LossWeights,
    eps: f64,
) -> Result<LossBreakdown> {
    if labels.goal.len() != out.goal.len()
        || labels.requested.len() != out.request.len()
        || labels.active.len() != out.active.len()
    {
        return Err(Error::MissingLabel(format!(
            "labels cover {} slots / {} domains, output {} / {}",
            labels.goal.len(),
            labels.active.len(),
            out.goal.len(),
            out.active.len()
        )));
    }
    let mut goal = 0.0;
    for (g, &v) in out.goal.iter().zip(&labels.goal) {
        goal += label_smoothing_loss(&g.predictive(), &smooth_labels(v, g.k(), eps)?)?;
    }
    let general = label_smoothing_loss(
        &out.general,
        &smooth_labels(labels.general, out.general.k(), eps)?,
    )?;
    let request: f64 = out
        .request
        .iter()
        .zip(&labels.requested)
        .map(|(&p, &y)| binary_kl(smooth_binary(y, eps), p))
        .sum();
    let domain: f64 = out
        .active
        .iter()
        .zip(&labels.active)
        .map(|(&p, &y)| binary_kl(smooth_binary(y, eps), p))
        .sum();
    Ok(LossBreakdown {
        goal,
        general,
        request,
        domain,
        total: w.goal * goal + w.general * general + w.request * request + w.domain * domain,
    })
}

fn temper_binary(p: f64, t: f64) -> f64 {
    let a = p.max(1e-300).powf(1.0 / t);
    let b = (1.0 - p).max(1e-300).powf(1.0 / t);
    a / (a + b)
}

/// Weighted loss of one batched step on the tape.
fn step_loss(
    tape: &mut Tape,
    model: &TrackerModel,
    step: &StepNodes,
    turns: &[&SimTurn],
    teacher: Option<&[&TeacherTurn]>,
    sup: Supervision<'_>,
    temperature: f64,
    cfg: &TrainConfig,
) -> Result<NodeId> {
    let ns = model.layout.num_slots();
    let eps = cfg.label_smoothing;
    let w = cfg.weights;
    let teacher = || teacher.ok_or_else(|| Error::MissingLabel("teacher targets".into()));
    let mut parts = Vec::with_capacity(ns + 4);

    let mut goal_terms = Vec::with_capacity(ns);
    for (s, &logits) in step.goal.iter().enumerate() {
        let node = match sup {
            Supervision::Gold => {
                let labels: Vec<usize> = turns.iter().map(|t| t.labels.goal[s]).collect();
                tape_label_smoothing(tape, logits, &labels, eps)?
            }
            Supervision::End(_) => {
                let post: Vec<Categorical> = teacher()?
                    .iter()
                    .map(|t| t.goal_posterior[s].clone())
                    .collect();
                tape_end(tape, logits, &post, temperature)?
            }
            Supervision::End2(_) => {
                let proxies: Vec<ProxyDirichletTarget> =
                    teacher()?.iter().map(|t| t.goal_proxy[s].clone()).collect();
                tape_end2(tape, logits, &proxies)?
            }
        };
        goal_terms.push(node);
    }
    let goal = sum_nodes(tape, &goal_terms)?;
    parts.push(tape.scale(goal, w.goal));

    let general = match sup {
        Supervision::End(_) => {
            let post: Vec<Categorical> = teacher()?.iter().map(|t| t.general.clone()).collect();
            tape_end(tape, step.general, &post, temperature)?
        }
        _ => {
            let labels: Vec<usize> = turns.iter().map(|t| t.labels.general).collect();
            tape_label_smoothing(tape, step.general, &labels, eps)?
        }
    };
    parts.push(tape.scale(general, w.general));

    let (req_targets, req_logits) = match sup {
        Supervision::End(_) => {
            let tt = teacher()?;
            let targets: Vec<f64> = tt
                .iter()
                .flat_map(|t| t.request.iter().map(|&p| temper_binary(p, temperature)))
                .collect();
            (targets, tape.scale(step.request, 1.0 / temperature))
        }
        _ => (
            turns
                .iter()
                .flat_map(|t| t.labels.requested.iter().map(|&y| smooth_binary(y, eps)))
                .collect(),
            step.request,
        ),
    };
    let request = tape_binary_kl(tape, req_logits, &req_targets)?;
    parts.push(tape.scale(request, w.request));

    let mut dom_terms = Vec::with_capacity(step.domain.len());
    for (d, &logits) in step.domain.iter().enumerate() {
        let node = match sup {
            Supervision::End(_) => {
                let targets: Vec<f64> = teacher()?
                    .iter()
                    .map(|t| temper_binary(t.active[d], temperature))
                    .collect();
                let scaled = tape.scale(logits, 1.0 / temperature);
                tape_binary_kl(tape, scaled, &targets)?
            }
            _ => {
                let targets: Vec<f64> = turns
                    .iter()
                    .map(|t| smooth_binary(t.labels.active[d], eps))
                    .collect();
                tape_binary_kl(tape, logits, &targets)?
            }
        };
        dom_terms.push(node);
    }
    let domain = sum_nodes(tape, &dom_terms)?;
    parts.push(tape.scale(domain, w.domain));
    sum_nodes(tape, &parts)
}

fn sum_nodes(tape: &mut Tape, nodes: &[NodeId]) -> Result<NodeId> {
    let mut acc = *nodes.first().ok_or(Error::EmptyInput("loss terms"))?;
    for &n in &nodes[1..] {
        acc = tape.add(acc, n)?;
    }
    Ok(acc)
}

/// Builds the batched loss of `batch` (dialogue indices of equal clipped
/// length) on `tape`, normalised per dialogue turn.
pub(crate) fn batch_loss(
    tape: &mut Tape,
    model: &TrackerModel,
    dialogues: &[Dialogue],
    inputs: &[Vec<Vec<u32>>],
    batch: &[usize],
    turns: usize,
    sup: Supervision<'_>,
    temperature: f64,
    cfg: &TrainConfig,
) -> Result<NodeId> {
    let desc = model.describe(tape)?;
    let mut ctx = model.initial_context(tape, batch.len());
    let mut per_turn = Vec::with_capacity(turns);
    for t in 0..turns {
        let step_inputs: Vec<&[u32]> = batch.iter().map(|&i| inputs[i][t].as_slice()).collect();
        let step = model.step(tape, desc, ctx, &step_inputs)?;
        ctx = step.ctx;
        let sim_turns: Vec<&SimTurn> = batch.iter().map(|&i| &dialogues[i].turns[t]).collect();
        let teacher: Option<Vec<&TeacherTurn>> = match sup {
            Supervision::Gold => None,
            Supervision::End(tt) | Supervision::End2(tt) => {
                Some(batch.iter().map(|&i| &tt[i][t]).collect())
            }
        };
        per_turn.push(step_loss(
            tape,
            model,
            &step,
            &sim_turns,
            teacher.as_deref(),
            sup,
            temperature,
            cfg,
        )?);
    }
    let total = sum_nodes(tape, &per_turn)?;
    Ok(tape.scale(total, 1.0 / (batch.len() * turns) as f64))
}

/// Loss of `dialogues` as one batch, cut to the shortest dialogue. Teacher
/// targets, if any, are indexed like `dialogues`. Used for gradient checks.
pub fn tape_dialogue_loss(
    tape: &mut Tape,
    model: &TrackerModel,
    dialogues: &[Dialogue],
    sup: Supervision<'_>,
    temperature: f64,
    cfg: &TrainConfig,
) -> Result<NodeId> {
    let turns = dialogues
        .iter()
        .map(|d| d.turns.len())
        .min()
        .ok_or(Error::EmptyInput("dialogues"))?;
    let batch: Vec<usize> = (0..dialogues.len()).collect();
    batch_loss(
        tape,
        model,
        dialogues,
        &dialogue_inputs(dialogues),
        &batch,
        turns,
        sup,
        temperature,
        cfg,
    )
}

pub(crate) fn dialogue_inputs(dialogues: &[Dialogue]) -> Vec<Vec<Vec<u32>>> {
    dialogues
        .iter()
        .map(|d| d.turns.iter().map(SimTurn::input).collect())
        .collect()
}

/// Groups dialogue indices by clipped length and cuts each group into
/// shuffled batches.
fn make_batches(
    lens: &[usize],
    ids: &[usize],
    batch_size: usize,
    rng: &mut StreamRng,
) -> Vec<(Vec<usize>, usize)> {
    let mut by_len: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for &i in ids {
        by_len.entry(lens[i]).or_default().push(i);
    }
    let mut batches = Vec::new();
    for (len, mut group) in by_len {
        group.shuffle(rng);
        for chunk in group.chunks(batch_size) {
            batches.push((chunk.to_vec(), len));
        }
    }
    batches.shuffle(rng);
    batches
}

/// Mean gold multitask loss per turn.
pub(crate) fn validation_loss(
    model: &TrackerModel,
    dialogues: &[Dialogue],
    cfg: &TrainConfig,
) -> Result<f64> {
    if dialogues.is_empty() {
        return Ok(0.0);
    }
    let outputs = model.track(&dialogue_inputs(dialogues), 64)?;
    let mut total = 0.0;
    let mut n = 0usize;
    for (d, outs) in dialogues.iter().zip(&outputs) {
        for (t, o) in d.turns.iter().zip(outs) {
            total += multitask_loss(o, &t.labels, &cfg.weights, cfg.label_smoothing)?.total;
            n += 1;
        }
    }
    Ok(total / n as f64)
}

/// Trains `model` on `train[ids]`, early-stopping on the validation loss and
/// restoring the best weights. Teacher targets, when given, are indexed like
/// `train`.
pub fn train_tracker(
    model: &mut TrackerModel,
    train: &[Dialogue],
    ids: &[usize],
    valid: &[Dialogue],
    sup: Supervision<'_>,
    cfg: &TrainConfig,
    rng: &mut StreamRng,
) -> Result<TrainReport> {
    cfg.validate()?;
    if ids.is_empty() {
        return Err(Error::EmptyInput("training dialogues"));
    }
    if let Supervision::End(t) | Supervision::End2(t) = sup {
        if t.len() != train.len() {
            return Err(Error::MissingLabel(format!(
                "{} teacher dialogues for {}",
                t.len(),
                train.len()
            )));
        }
    }
    let start = Instant::now();
    let inputs = dialogue_inputs(train);
    let lens: Vec<usize> = train
        .iter()
        .map(|d| d.turns.len().min(cfg.max_dialogue_turns))
        .collect();
    let batches_per_epoch = make_batches(&lens, ids, cfg.batch_size, &mut rng.clone()).len() as u64;
    let total_steps = batches_per_epoch * cfg.max_epochs as u64;
    let schedule = LinearSchedule {
        base: cfg.learning_rate,
        warmup_proportion: cfg.warmup_proportion,
        total_steps,
    };
    let temps = TemperatureSchedule {
        base: cfg.base_temperature,
        anneal_fraction: cfg.anneal_fraction,
        total_steps,
    };
    let mut adam = Adam::new(&model.params);
    let mut best = (f64::INFINITY, model.params.clone(), 0usize);
    let mut report = TrainReport {
        epochs_run: 0,
        best_epoch: 0,
        train_loss: Vec::new(),
        valid_loss: Vec::new(),
        seconds: 0.0,
    };
    let mut step: u64 = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut epoch_loss = 0.0;
        let batches = make_batches(&lens, ids, cfg.batch_size, rng);
        for (batch, turns) in &batches {
            let temperature = temps.temperature(step);
            let (loss, mut grads) = {
                let mut tape = Tape::new(&model.params);
                let loss = batch_loss(
                    &mut tape,
                    model,
                    train,
                    &inputs,
                    batch,
                    *turns,
                    sup,
                    temperature,
                    cfg,
                )?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss(format!("epoch {epoch}, step {step}")));
                }
                (value, tape.backward(loss)?)
            };
            grads.clip_global_norm(cfg.clip_norm);
            adam.step(&mut model.params, &grads, schedule.lr(step))?;
            step += 1;
            epoch_loss += loss;
        }
        let valid_loss = validation_loss(model, valid, cfg)?;
        report
            .train_loss
            .push(epoch_loss / batches.len().max(1) as f64);
        report.valid_loss.push(valid_loss);
        report.epochs_run = epoch;
        log::debug!(
            "epoch {epoch}: train {:.4} valid {valid_loss:.4} ({:.1}s)",
            epoch_loss / batches.len().max(1) as f64,
            start.elapsed().as_secs_f64()
        );
        if valid_loss < best.0 || valid.is_empty() {
            best = (valid_loss, model.params.clone(), epoch);
        } else if epoch - best.2 >= cfg.patience {
            break;
        }
    }
    model.params = best.1;
    report.best_epoch = best.2;
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Member outputs averaged into the ensemble prediction, per dialogue turn.
pub fn predict_ensemble(
    members: &[TrackerModel],
    inputs: &[Vec<Vec<u32>>],
) -> Result<Vec<Vec<TrackerOutput>>> {
    let per_member: Vec<Vec<Vec<TrackerOutput>>> = members
        .iter()
        .map(|m| m.track(inputs, 64))
        .collect::<Result<_>>()?;
    if per_member.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    (0..inputs.len())
        .map(|d| {
            (0..inputs[d].len())
                .map(|t| {
                    let outs: Vec<TrackerOutput> =
                        per_member.iter().map(|m| m[d][t].clone()).collect();
                    TrackerOutput::average(&outs)
                })
                .collect()
        })
        .collect()
}

/// Ensemble posteriors and proxy Dirichlet targets for every turn.
pub fn teacher_targets(
    members: &[TrackerModel],
    dialogues: &[Dialogue],
) -> Result<Vec<Vec<TeacherTurn>>> {
    let inputs = dialogue_inputs(dialogues);
    let per_member: Vec<Vec<Vec<TrackerOutput>>> = members
        .iter()
        .map(|m| m.track(&inputs, 64))
        .collect::<Result<_>>()?;
    if per_member.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    (0..dialogues.len())
        .map(|d| {
            (0..inputs[d].len())
                .map(|t| {
                    let outs: Vec<&TrackerOutput> = per_member.iter().map(|m| &m[d][t]).collect();
                    let ns = outs[0].goal.len();
                    let mut goal_posterior = Vec::with_capacity(ns);
                    let mut goal_proxy = Vec::with_capacity(ns);
                    for s in 0..ns {
                        let e = EnsemblePrediction::new(
                            outs.iter().map(|o| o.goal[s].predictive()).collect(),
                        )?;
                        goal_posterior.push(predictive_posterior(&e)?);
                        goal_proxy.push(proxy_dirichlet_target(&e, DISTRIBUTION_SMOOTHING)?);
                    }
                    let owned: Vec<TrackerOutput> = outs.iter().map(|o| (*o).clone()).collect();
                    let mean = TrackerOutput::average(&owned)?;
                    Ok(TeacherTurn {
                        goal_posterior,
                        goal_proxy,
                        request: mean.request,
                        active: mean.active,
                        general: mean.general,
                    })
                })
                .collect()
        })
        .collect()
}
