//! Dialogue policy on belief-state features: supervised pretraining on
//! scripted corpus actions, PPO fine-tuning against the simulator, and
//! greedy evaluation.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dialoguesim::{
    dialogue_reward, run_dialogue, ActionSpace, Agent, Dialogue, SimConfig, SimTurn, SlotRef,
    SystemAction, SystemActionKind, TurnContext, TurnLabels, World,
};
use crate::diffnet::{Adam, Mlp, NodeId, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::{stream, StreamRng};
use crate::tracker::{
    assemble_belief_state, belief_feature_len, BeliefContext, BeliefMode, BeliefState, GoalBelief,
    OutputKind, TrackerModel, TrackerOutput, TrackerSession,
};
use crate::uncmath::{Categorical, DirichletParams};

/// Concentration of the oracle "tracker" in Dirichlet form.
const ORACLE_ALPHA: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub learning_rate: f64,
    /// Total environment steps.
    pub frames: usize,
    pub dialogues_per_update: usize,
    pub minibatch: usize,
    pub clip_norm: f64,
    /// Initial updates that fit only the value head, so the first policy
    /// steps see a meaningful baseline.
    pub value_warmup: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            gamma: 0.99,
            lambda: 0.95,
            epochs: 4,
            entropy_coef: 0.01,
            value_coef: 0.5,
            learning_rate: 1e-4,
            frames: 10_000,
            dialogues_per_update: 50,
            minibatch: 64,
            clip_norm: 1.0,
            value_warmup: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub ppo: PpoConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            pretrain_epochs: 40,
            pretrain_lr: 1e-3,
            pretrain_batch: 64,
            ppo: PpoConfig::default(),
        }
    }
}

/// Where pretraining belief states come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateSource {
    /// Gold labels rendered as a certain tracker output.
    Oracle,
    /// Outputs of the tracker the policy will run with.
    Predicted,
}

/// Separate policy and value perceptrons over belief features.
#[derive(Debug, Clone)]
pub struct Policy {
    pub mode: BeliefMode,
    pub input_len: usize,
    pub num_actions: usize,
    pub params: ParamStore,
    pi: Mlp,
    v: Mlp,
}

impl Policy {
    pub fn new(world: &World, mode: BeliefMode, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let input_len = belief_feature_len(&world.ontology, mode);
        let num_actions = ActionSpace::new(&world.ontology).len();
        let mut params = ParamStore::new();
        let pi = Mlp::new(&mut params, "policy", input_len, hidden, num_actions, rng)?;
        let v = Mlp::new(&mut params, "value", input_len, hidden, 1, rng)?;
        Ok(Self {
            mode,
            input_len,
            num_actions,
            params,
            pi,
            v,
        })
    }

    /// Rebuilds a policy around loaded weights.
    pub fn from_params(
        world: &World,
        mode: BeliefMode,
        hidden: usize,
        params: ParamStore,
    ) -> Result<Self> {
        let mut p = Self::new(world, mode, hidden, &mut stream(0, "shape-template"))?;
        for id in p.params.ids().collect::<Vec<_>>() {
            let name = p.params.name(id).to_string();
            p.params.set(id, params.by_name(&name)?.clone())?;
        }
        if params.len() != p.params.len() {
            return Err(Error::Format(format!(
                "policy checkpoint has {} tensors",
                params.len()
            )));
        }
        Ok(p)
    }

    fn check(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.input_len {
            return Err(Error::FeatureLength {
                expected: self.input_len,
                got: features.len(),
            });
        }
        Ok(())
    }

    fn batch(&self, rows: &[&[f64]]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows.len() * self.input_len);
        for r in rows {
            self.check(r)?;
            data.extend_from_slice(r);
        }
        Tensor::from_vec(rows.len(), self.input_len, data)
    }

    pub fn logits_node(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        self.pi.forward(tape, x)
    }

    pub fn value_node(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        self.v.forward(tape, x)
    }

    /// Action distribution and value estimate for one belief state.
    pub fn evaluate(&self, features: &[f64]) -> Result<(Categorical, f64)> {
        let mut tape = Tape::new(&self.params);
        let x = tape.input(self.batch(&[features])?);
        let logits = self.logits_node(&mut tape, x)?;
        let value = self.value_node(&mut tape, x)?;
        Ok((
            Categorical::softmax(tape.value(logits).data())?,
            tape.value(value).item(),
        ))
    }
}

/// Gold labels as a certain tracker output of the given kind.
pub fn oracle_output(
    world: &World,
    labels: &TurnLabels,
    kind: OutputKind,
) -> Result<TrackerOutput> {
    let onto = &world.ontology;
    let goal = onto
        .slot_refs()
        .iter()
        .zip(&labels.goal)
        .map(|(&r, &v)| {
            let k = onto.slot(r).k();
            Ok(match kind {
                OutputKind::Categorical => GoalBelief::Categorical(Categorical::one_hot(v, k)?),
                OutputKind::Dirichlet => {
                    let mut a = vec![1.0; k];
                    a[v] = ORACLE_ALPHA;
                    GoalBelief::Dirichlet(DirichletParams::new(a)?)
                }
            })
        })
        .collect::<Result<_>>()?;
    let flag = |b: &bool| if *b { 1.0 } else { 0.0 };
    Ok(TrackerOutput {
        goal,
        request: labels.requested.iter().map(flag).collect(),
        active: labels.active.iter().map(flag).collect(),
        general: Categorical::one_hot(labels.general, 3)?,
    })
}

/// A tracker the policy can run with: one model or an averaged ensemble.
#[derive(Debug, Clone, Copy)]
pub enum TrackerRef<'a> {
    Single(&'a TrackerModel),
    Ensemble(&'a [TrackerModel]),
}

impl<'a> TrackerRef<'a> {
    fn members(&self) -> &'a [TrackerModel] {
        match *self {
            TrackerRef::Single(m) => std::slice::from_ref(m),
            TrackerRef::Ensemble(ms) => ms,
        }
    }

    pub fn kind(&self) -> OutputKind {
        match self {
            TrackerRef::Single(m) => m.kind,
            TrackerRef::Ensemble(_) => OutputKind::Categorical,
        }
    }

    /// Per-turn outputs for whole dialogues.
    pub fn track(&self, dialogues: &[Vec<Vec<u32>>]) -> Result<Vec<Vec<TrackerOutput>>> {
        match *self {
            TrackerRef::Single(m) => m.track(dialogues, 64),
            TrackerRef::Ensemble(ms) => crate::tracker::predict_ensemble(ms, dialogues),
        }
    }

    fn sessions(&self) -> Result<Vec<TrackerSession<'a>>> {
        self.members().iter().map(TrackerModel::session).collect()
    }
}

fn step_sessions(sessions: &mut [TrackerSession<'_>], input: &[u32]) -> Result<TrackerOutput> {
    let outs: Vec<TrackerOutput> = sessions
        .iter_mut()
        .map(|s| s.step(input))
        .collect::<Result<_>>()?;
    if outs.len() == 1 {
        Ok(outs.into_iter().next().expect("one output"))
    } else {
        TrackerOutput::average(&outs)
    }
}

/// Dialogue-level context reconstructed from a corpus transcript up to (and
/// including) turn `t`.
fn corpus_context(
    actions: &ActionSpace,
    turns: &[SimTurn],
    t: usize,
    domains: usize,
) -> Result<BeliefContext> {
    let mut ctx = BeliefContext::initial(domains);
    for turn in &turns[..=t] {
        if let Some(a) = &turn.system {
            if let SystemActionKind::Book { domain } = a.kind {
                ctx.bookings[domain] = true;
            }
            ctx.prev_action = Some(actions.index(a.kind)?);
        }
    }
    Ok(ctx)
}

/// `(features, scripted action)` pairs for every acting turn of `corpus`.
pub fn pretraining_examples(
    world: &World,
    corpus: &[Dialogue],
    tracker: TrackerRef<'_>,
    mode: BeliefMode,
    source: StateSource,
) -> Result<Vec<(Vec<f64>, usize)>> {
    let actions = ActionSpace::new(&world.ontology);
    let predicted = match source {
        StateSource::Predicted => {
            let inputs: Vec<Vec<Vec<u32>>> = corpus
                .iter()
                .map(|d| d.turns.iter().map(SimTurn::input).collect())
                .collect();
            Some(tracker.track(&inputs)?)
        }
        StateSource::Oracle => None,
    };
    let mut out = Vec::new();
    for (di, d) in corpus.iter().enumerate() {
        for (t, turn) in d.turns.iter().enumerate() {
            let Some(a) = turn.next_action else { continue };
            let output = match &predicted {
                Some(p) => p[di][t].clone(),
                None => oracle_output(world, &turn.labels, tracker.kind())?,
            };
            let ctx = corpus_context(&actions, &d.turns, t, world.ontology.num_domains())?;
            let state = assemble_belief_state(&output, world, &ctx, mode)?;
            out.push((state.features(), a));
        }
    }
    Ok(out)
}

/// Mean cross-entropy of the policy head on `(features, action)` rows.
fn cross_entropy(tape: &mut Tape, policy: &Policy, rows: &[&(Vec<f64>, usize)]) -> Result<NodeId> {
    let feats: Vec<&[f64]> = rows.iter().map(|r| r.0.as_slice()).collect();
    let x = tape.input(policy.batch(&feats)?);
    let logits = policy.logits_node(tape, x)?;
    let logp = tape.log_softmax_rows(logits);
    let mask = one_hot_rows(rows.iter().map(|r| r.1), policy.num_actions, rows.len())?;
    let m = tape.input(mask);
    let picked = tape.mul(logp, m)?;
    let total = tape.sum_all(picked);
    Ok(tape.scale(total, -1.0 / rows.len() as f64))
}

fn one_hot_rows(actions: impl Iterator<Item = usize>, n: usize, rows: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(rows, n);
    for (i, a) in actions.enumerate() {
        if a >= n {
            return Err(Error::IndexOutOfRange { index: a, len: n });
        }
        t.data_mut()[i * n + a] = 1.0;
    }
    Ok(t)
}

/// Supervised pretraining; returns the mean loss per epoch.
pub fn pretrain_supervised(
    policy: &mut Policy,
    examples: &[(Vec<f64>, usize)],
    cfg: &PolicyConfig,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("pretraining examples"));
    }
    for e in examples {
        policy.check(&e.0)?;
    }
    let mut adam = Adam::new(&policy.params);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut losses = Vec::with_capacity(cfg.pretrain_epochs);
    for _ in 0..cfg.pretrain_epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.pretrain_batch.max(1)) {
            let rows: Vec<&(Vec<f64>, usize)> = chunk.iter().map(|&i| &examples[i]).collect();
            let mut tape = Tape::new(&policy.params);
            let loss = cross_entropy(&mut tape, policy, &rows)?;
            total += tape.value(loss).item();
            let grads = tape.backward(loss)?;
            adam.step(&mut policy.params, &grads, cfg.pretrain_lr)?;
            batches += 1;
        }
        losses.push(total / batches as f64);
    }
    Ok(losses)
}

/// Fraction of examples whose argmax action matches the label.
pub fn imitation_accuracy(policy: &Policy, examples: &[(Vec<f64>, usize)]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("examples"));
    }
    let mut hits = 0;
    for (f, a) in examples {
        if policy.evaluate(f)?.0.argmax() == *a {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub features: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub log_prob: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub terminal: bool,
}

/// Runs the policy on tracker belief states inside the dialogue loop.
pub struct PolicyAgent<'a> {
    world: &'a World,
    policy: &'a Policy,
    sessions: Vec<TrackerSession<'a>>,
    actions: ActionSpace,
    ctx: BeliefContext,
    greedy: bool,
    rng: StreamRng,
    pub steps: Vec<Step>,
}

impl<'a> PolicyAgent<'a> {
    pub fn new(
        world: &'a World,
        policy: &'a Policy,
        tracker: TrackerRef<'a>,
        greedy: bool,
        rng: StreamRng,
    ) -> Result<Self> {
        let expected = belief_feature_len(&world.ontology, policy.mode);
        if expected != policy.input_len {
            return Err(Error::FeatureLength {
                expected: policy.input_len,
                got: expected,
            });
        }
        Ok(Self {
            world,
            policy,
            sessions: tracker.sessions()?,
            actions: ActionSpace::new(&world.ontology),
            ctx: BeliefContext::initial(world.ontology.num_domains()),
            greedy,
            rng,
            steps: Vec::new(),
        })
    }

    /// Executes action `index` against the current belief.
    fn realise(&self, index: usize, belief: &BeliefState) -> Result<SystemAction> {
        let kind = self.actions.kind(index)?;
        let SystemActionKind::Offer { domain } = kind else {
            return Ok(SystemAction::simple(kind));
        };
        let refs = self.world.ontology.slot_refs();
        let constraints: Vec<(usize, usize)> = belief
            .participating()
            .into_iter()
            .filter(|&(i, _)| refs[i].domain == domain)
            .map(|(i, v)| (refs[i].slot, v))
            .collect();
        let entity = self
            .world
            .database
            .matching(domain, &constraints)
            .first()
            .copied();
        let answered = refs
            .iter()
            .enumerate()
            .filter(|&(i, r)| r.domain == domain && belief.request[i] > 0.5)
            .map(|(_, r): (usize, &SlotRef)| r.slot)
            .collect();
        Ok(SystemAction {
            kind,
            entity,
            answered,
        })
    }
}

impl Agent for PolicyAgent<'_> {
    fn reset(&mut self) {
        for s in &mut self.sessions {
            s.reset();
        }
        self.ctx = BeliefContext::initial(self.world.ontology.num_domains());
        self.steps.clear();
    }

    fn act(&mut self, turn: &TurnContext<'_>) -> Result<SystemAction> {
        let output = step_sessions(&mut self.sessions, turn.input)?;
        let belief = assemble_belief_state(&output, self.world, &self.ctx, self.policy.mode)?;
        let features = belief.features();
        let (dist, value) = self.policy.evaluate(&features)?;
        let action = if self.greedy {
            dist.argmax()
        } else {
            sample(&dist, &mut self.rng)
        };
        let system = self.realise(action, &belief)?;
        if let SystemActionKind::Book { domain } = system.kind {
            self.ctx.bookings[domain] = true;
        }
        self.ctx.prev_action = Some(action);
        self.steps.push(Step {
            features,
            action,
            reward: -1.0,
            log_prob: dist.probs()[action].max(1e-300).ln(),
            value,
        });
        Ok(system)
    }
}

fn sample(dist: &Categorical, rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in dist.probs().iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.k() - 1
}

/// One simulated dialogue with the policy in the loop. Step rewards are −1
/// with the terminal bonus on the last step, so they sum to the dialogue
/// reward.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    world: &World,
    tracker: TrackerRef<'_>,
    policy: &Policy,
    sim: SimConfig,
    seed: u64,
    index: usize,
    greedy: bool,
) -> Result<(Trajectory, Dialogue)> {
    let rng = stream(seed, &format!("policy/{index}"));
    let mut agent = PolicyAgent::new(world, policy, tracker, greedy, rng)?;
    let dialogue = run_dialogue(world, seed, index, sim, &mut agent)?;
    let mut steps = std::mem::take(&mut agent.steps);
    if let Some(last) = steps.last_mut() {
        last.reward += dialogue_reward(dialogue.result.success, 0);
    }
    Ok((
        Trajectory {
            steps,
            terminal: true,
        },
        dialogue,
    ))
}

/// Generalised advantage estimates and returns for one trajectory.
pub fn gae(steps: &[Step], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = steps.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { steps[t + 1].value } else { 0.0 };
        let delta = steps[t].reward + gamma * next - steps[t].value;
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let ret = adv.iter().zip(steps).map(|(a, s)| a + s.value).collect();
    (adv, ret)
}

/// Clipped surrogate (negated, averaged) for a batch of logits.
pub fn tape_ppo_surrogate(
    tape: &mut Tape,
    logits: NodeId,
    actions: &[usize],
    old_log_probs: &[f64],
    advantages: &[f64],
    clip: f64,
) -> Result<NodeId> {
    let (rows, n) = tape.shape(logits);
    if actions.len() != rows || old_log_probs.len() != rows || advantages.len() != rows {
        return Err(Error::DimensionMismatch {
            expected: rows,
            got: actions.len(),
        });
    }
    let logp = tape.log_softmax_rows(logits);
    let mask = tape.input(one_hot_rows(actions.iter().copied(), n, rows)?);
    let picked = tape.mul(logp, mask)?;
    let new_lp = tape.sum_cols(picked);
    let old = tape.input(Tensor::from_vec(rows, 1, old_log_probs.to_vec())?);
    let diff = tape.sub(new_lp, old)?;
    let ratio = tape.exp(diff);
    let adv = tape.input(Tensor::from_vec(rows, 1, advantages.to_vec())?);
    let unclipped = tape.mul(ratio, adv)?;
    let clipped_ratio = tape.clamp(ratio, 1.0 - clip, 1.0 + clip);
    let clipped = tape.mul(clipped_ratio, adv)?;
    let surr = tape.min(unclipped, clipped)?;
    let mean = tape.mean_all(surr);
    Ok(tape.neg(mean))
}

/// Full PPO loss: surrogate + value regression − entropy bonus; with
/// `critic_only` just the value term.
#[allow(clippy::too_many_arguments)]
pub fn tape_ppo_loss(
    tape: &mut Tape,
    policy: &Policy,
    features: &[&[f64]],
    actions: &[usize],
    old_log_probs: &[f64],
    advantages: &[f64],
    returns: &[f64],
    cfg: &PpoConfig,
    critic_only: bool,
) -> Result<NodeId> {
    let x = tape.input(policy.batch(features)?);
    let logits = policy.logits_node(tape, x)?;
    let v = policy.value_node(tape, x)?;
    let target = tape.input(Tensor::from_vec(returns.len(), 1, returns.to_vec())?);
    let err = tape.sub(v, target)?;
    let sq = tape.mul(err, err)?;
    let vloss = tape.mean_all(sq);
    let vterm = tape.scale(vloss, cfg.value_coef);
    if critic_only {
        return Ok(vterm);
    }
    let surr = tape_ppo_surrogate(tape, logits, actions, old_log_probs, advantages, cfg.clip)?;
    let p = tape.softmax_rows(logits);
    let lp = tape.log_softmax_rows(logits);
    let plp = tape.mul(p, lp)?;
    // mean over rows of Σ p log p = −entropy
    let neg_entropy = tape.sum_all(plp);
    let neg_entropy = tape.scale(neg_entropy, 1.0 / features.len() as f64);
    let eterm = tape.scale(neg_entropy, cfg.entropy_coef);
    let l = tape.add(surr, vterm)?;
    tape.add(l, eterm)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PpoDiagnostics {
    pub iteration: usize,
    pub frames: usize,
    pub mean_reward: f64,
    pub success: f64,
    pub loss: f64,
}

/// One PPO update on a batch of trajectories.
pub fn ppo_update(
    policy: &mut Policy,
    adam: &mut Adam,
    batch: &[Trajectory],
    cfg: &PpoConfig,
    critic_only: bool,
    rng: &mut StreamRng,
) -> Result<f64> {
    let mut feats = Vec::new();
    let mut actions = Vec::new();
    let mut old = Vec::new();
    let mut adv = Vec::new();
    let mut ret = Vec::new();
    for tr in batch {
        let (a, r) = gae(&tr.steps, cfg.gamma, cfg.lambda);
        for (s, (a, r)) in tr.steps.iter().zip(a.into_iter().zip(r)) {
            feats.push(s.features.as_slice());
            actions.push(s.action);
            old.push(s.log_prob);
            adv.push(a);
            ret.push(r);
        }
    }
    if feats.is_empty() {
        return Err(Error::EmptyInput("trajectories"));
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let sd = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    for a in &mut adv {
        *a = (*a - mean) / (sd + 1e-8);
    }
    let mut order: Vec<usize> = (0..feats.len()).collect();
    let mut last = 0.0;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch.max(1)) {
            let pick = |v: &[f64]| chunk.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let f: Vec<&[f64]> = chunk.iter().map(|&i| feats[i]).collect();
            let a: Vec<usize> = chunk.iter().map(|&i| actions[i]).collect();
            let mut tape = Tape::new(&policy.params);
            let loss = tape_ppo_loss(
                &mut tape,
                policy,
                &f,
                &a,
                &pick(&old),
                &pick(&adv),
                &pick(&ret),
                cfg,
                critic_only,
            )?;
            last = tape.value(loss).item();
            if !last.is_finite() {
                return Err(Error::NonFiniteLoss(format!("ppo loss {last}")));
            }
            let mut grads = tape.backward(loss)?;
            grads.clip_global_norm(cfg.clip_norm);
            adam.step(&mut policy.params, &grads, cfg.learning_rate)?;
        }
    }
    Ok(last)
}

/// PPO fine-tuning with sampled rollouts until `cfg.frames` steps are used.
pub fn train_ppo(
    world: &World,
    tracker: TrackerRef<'_>,
    policy: &mut Policy,
    sim: SimConfig,
    cfg: &PpoConfig,
    seed: u64,
) -> Result<Vec<PpoDiagnostics>> {
    let mut adam = Adam::new(&policy.params);
    let mut rng = stream(seed, "ppo/minibatch");
    let mut frames = 0;
    let mut next = 0usize;
    let mut log = Vec::new();
    let mut iteration = 0;
    while frames < cfg.frames {
        let mut batch = Vec::with_capacity(cfg.dialogues_per_update);
        let mut success = 0usize;
        let mut reward = 0.0;
        for _ in 0..cfg.dialogues_per_update {
            let (tr, d) = run_episode(world, tracker, policy, sim, seed, next, false)?;
            next += 1;
            frames += tr.steps.len();
            success += d.result.success as usize;
            reward += d.result.reward;
            batch.push(tr);
        }
        let loss = ppo_update(
            policy,
            &mut adam,
            &batch,
            cfg,
            iteration < cfg.value_warmup,
            &mut rng,
        )?;
        iteration += 1;
        log.push(PpoDiagnostics {
            iteration,
            frames,
            mean_reward: reward / batch.len() as f64,
            success: success as f64 / batch.len() as f64,
            loss,
        });
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub dialogues: usize,
    pub successes: usize,
    pub success: f64,
    pub reward: f64,
    pub turns: f64,
}

impl EvalSummary {
    pub fn from_results(results: &[crate::dialoguesim::DialogueResult]) -> Result<Self> {
        if results.is_empty() {
            return Err(Error::EmptyInput("dialogue results"));
        }
        let n = results.len() as f64;
        let successes = results.iter().filter(|r| r.success).count();
        Ok(Self {
            dialogues: results.len(),
            successes,
            success: successes as f64 / n,
            reward: results.iter().map(|r| r.reward).sum::<f64>() / n,
            turns: results.iter().map(|r| r.turns as f64).sum::<f64>() / n,
        })
    }
}

/// Greedy evaluation over dialogues `0..n` of `seed`.
pub fn evaluate_policy(
    world: &World,
    tracker: TrackerRef<'_>,
    policy: &Policy,
    sim: SimConfig,
    n: usize,
    seed: u64,
) -> Result<EvalSummary> {
    let results: Vec<_> = (0..n)
        .map(|i| run_episode(world, tracker, policy, sim, seed, i, true).map(|(_, d)| d.result))
        .collect::<Result<_>>()?;
    EvalSummary::from_results(&results)
}

/// Evaluates any agent (scripted, random, ...) on the same users.
pub fn evaluate_agent(
    world: &World,
    agent: &mut dyn Agent,
    sim: SimConfig,
    n: usize,
    seed: u64,
) -> Result<EvalSummary> {
    let results: Vec<_> = (0..n)
        .map(|i| run_dialogue(world, seed, i, sim, agent).map(|d| d.result))
        .collect::<Result<_>>()?;
    EvalSummary::from_results(&results)
}

/// Uniformly random actions; offers pick a random entity.
pub struct RandomAgent {
    actions: ActionSpace,
    rng: StreamRng,
}

impl RandomAgent {
    pub fn new(world: &World, rng: StreamRng) -> Self {
        Self {
            actions: ActionSpace::new(&world.ontology),
            rng,
        }
    }
}

impl Agent for RandomAgent {
    fn reset(&mut self) {}

    fn act(&mut self, ctx: &TurnContext<'_>) -> Result<SystemAction> {
        let kind = self
            .actions
            .kind(self.rng.gen_range(0..self.actions.len()))?;
        let mut action = SystemAction::simple(kind);
        if let SystemActionKind::Offer { domain } = kind {
            let rows = ctx.world.database.rows(domain).len();
            action.entity = Some(self.rng.gen_range(0..rows));
        }
        Ok(action)
    }
}
