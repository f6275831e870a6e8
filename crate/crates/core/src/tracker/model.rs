use rand::Rng;
use serde_json::json;

use super::{GoalBelief, OutputKind, TrackerConfig, TrackerOutput};
use crate::dialoguesim::{Ontology, SlotRef, World};
use crate::diffnet::{
    BiGru, CheckpointMeta, Embedding, GruCell, Linear, MultiHeadAttention, NodeId, ParamStore,
    SetPooler, Tape, Tensor,
};
use crate::distill::LOGIT_CLAMP;
use crate::error::{Error, Result};
use crate::uncmath::{Categorical, DirichletParams};

pub const GENERAL_CLASSES: usize = 3;

/// Ontology facts the network needs, in flattening order.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotLayout {
    pub slots: Vec<SlotRef>,
    /// Candidate count per slot, including `none`.
    pub k: Vec<usize>,
    /// Column of each slot's first candidate in the stacked value matrix.
    pub value_offset: Vec<usize>,
    /// Flat slot indices per domain.
    pub domain_slots: Vec<Vec<usize>>,
    pub slot_desc: Vec<Vec<u32>>,
    pub value_desc: Vec<Vec<u32>>,
    pub desc_len: usize,
    pub vocab: usize,
}

impl SlotLayout {
    pub fn new(onto: &Ontology) -> Result<Self> {
        let slots = onto.slot_refs();
        let mut k = Vec::with_capacity(slots.len());
        let mut value_offset = Vec::with_capacity(slots.len());
        let mut slot_desc = Vec::with_capacity(slots.len());
        let mut value_desc = Vec::new();
        let mut domain_slots = vec![Vec::new(); onto.num_domains()];
        for (i, &r) in slots.iter().enumerate() {
            let spec = onto.slot(r);
            value_offset.push(value_desc.len());
            k.push(spec.k());
            slot_desc.push(spec.description.clone());
            value_desc.extend(spec.values.iter().map(|v| v.description.clone()));
            domain_slots[r.domain].push(i);
        }
        let desc_len = slot_desc.first().map_or(0, Vec::len);
        if desc_len == 0
            || slot_desc
                .iter()
                .chain(&value_desc)
                .any(|d| d.len() != desc_len)
        {
            return Err(Error::Config(
                "descriptions must share one non-zero length".into(),
            ));
        }
        if domain_slots.iter().any(Vec::is_empty) {
            return Err(Error::Config("every domain needs a slot".into()));
        }
        Ok(Self {
            slots,
            k,
            value_offset,
            domain_slots,
            slot_desc,
            value_desc,
            desc_len,
            vocab: onto.vocab_size(),
        })
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn num_domains(&self) -> usize {
        self.domain_slots.len()
    }

    pub fn num_values(&self) -> usize {
        self.value_desc.len()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct TrackerNet {
    emb: Embedding,
    enc: BiGru,
    att: MultiHeadAttention,
    ctx: GruCell,
    pool: SetPooler,
    req: Linear,
    dom: Linear,
    gen: Linear,
}

/// Description encodings shared by every dialogue in a batch.
#[derive(Debug, Clone, Copy)]
pub(crate) struct DescNodes {
    /// Projected attention queries, row `s·L_d + p`.
    pub q: NodeId,
    /// Pooled value-candidate vectors, one row per candidate.
    pub values: NodeId,
}

/// One turn of a batch. Slot-major rows are `b·S + s`.
#[derive(Debug, Clone)]
pub(crate) struct StepNodes {
    pub ctx: NodeId,
    /// Per slot: B×K_s logits (scaled cosines).
    pub goal: Vec<NodeId>,
    /// (B·S)×1.
    pub request: NodeId,
    /// Per domain: B×1.
    pub domain: Vec<NodeId>,
    /// B×3.
    pub general: NodeId,
}

#[derive(Debug, Clone)]
pub struct TrackerModel {
    pub config: TrackerConfig,
    pub kind: OutputKind,
    pub params: ParamStore,
    pub layout: SlotLayout,
    pub fingerprint: String,
    pub(crate) net: TrackerNet,
}

pub const TRACKER_KIND: &str = "tracker";

impl TrackerModel {
    pub fn new(
        world: &World,
        config: TrackerConfig,
        kind: OutputKind,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let layout = SlotLayout::new(&world.ontology)?;
        let mut ps = ParamStore::new();
        let h = config.hidden;
        let net = TrackerNet {
            emb: Embedding::new(&mut ps, "emb", layout.vocab, config.embed_dim, rng)?,
            enc: BiGru::new(&mut ps, "enc", config.embed_dim, h / 2, rng)?,
            att: MultiHeadAttention::new(&mut ps, "sum", h, config.heads, rng)?,
            ctx: GruCell::new(&mut ps, "ctx", h, config.context_hidden, rng)?,
            pool: SetPooler::new(&mut ps, "pool", h, config.pooler_width, rng)?,
            req: Linear::new(&mut ps, "head.request", h, 1, true, rng)?,
            dom: Linear::new(&mut ps, "head.domain", h, 1, true, rng)?,
            gen: Linear::new(&mut ps, "head.general", h, GENERAL_CLASSES, true, rng)?,
        };
        Ok(Self {
            config,
            kind,
            params: ps,
            layout,
            fingerprint: world.fingerprint(),
            net,
        })
    }

    /// Rebuilds a model around loaded weights, checking every tensor shape.
    pub fn from_params(
        world: &World,
        config: TrackerConfig,
        kind: OutputKind,
        params: ParamStore,
    ) -> Result<Self> {
        let mut rng = crate::rng::stream(0, "shape-template");
        let mut model = Self::new(world, config, kind, &mut rng)?;
        if params.len() != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, tracker expects {}",
                params.len(),
                model.params.len()
            )));
        }
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id).to_string();
            let t = params.by_name(&name)?.clone();
            model.params.set(id, t)?;
        }
        model.params.set_step(params.step());
        Ok(model)
    }

    pub fn checkpoint_meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            kind: TRACKER_KIND.into(),
            mode: self.kind.as_str().into(),
            fingerprint: self.fingerprint.clone(),
            extra: json!({ "config": self.config }),
        }
    }

    /// Encodes sequences as a time-major padded batch; returns the
    /// (L·B)×H states and the (truncated) lengths.
    fn encode(&self, tape: &mut Tape, seqs: &[&[u32]]) -> Result<(NodeId, Vec<usize>)> {
        let lens: Vec<usize> = seqs
            .iter()
            .map(|s| s.len().min(self.config.max_turn_len))
            .collect();
        if lens.iter().any(|&l| l == 0) {
            return Err(Error::EmptyInput("token sequence"));
        }
        let steps = *lens.iter().max().expect("non-empty batch");
        let mut ids = Vec::with_capacity(steps * seqs.len());
        for t in 0..steps {
            for (s, &l) in seqs.iter().zip(&lens) {
                ids.push(if t < l { s[t] } else { 0 });
            }
        }
        let x = self.net.emb.forward(tape, &ids)?;
        Ok((self.net.enc.forward_batch(tape, x, &lens)?, lens))
    }

    /// Encodes equal-length descriptions and regroups the states so each
    /// description's rows are contiguous.
    fn encode_descriptions(&self, tape: &mut Tape, descs: &[Vec<u32>]) -> Result<NodeId> {
        let seqs: Vec<&[u32]> = descs.iter().map(Vec::as_slice).collect();
        let (states, _) = self.encode(tape, &seqs)?;
        let n = descs.len();
        let l = self.layout.desc_len;
        let idx: Vec<usize> = (0..n)
            .flat_map(|i| (0..l).map(move |p| p * n + i))
            .collect();
        tape.gather(states, &idx)
    }

    pub(crate) fn describe(&self, tape: &mut Tape) -> Result<DescNodes> {
        let slot_states = self.encode_descriptions(tape, &self.layout.slot_desc)?;
        let q = self.net.att.wq.forward(tape, slot_states)?;
        let value_states = self.encode_descriptions(tape, &self.layout.value_desc)?;
        let values = self
            .net
            .pool
            .forward_grouped(tape, value_states, self.layout.desc_len)?;
        Ok(DescNodes { q, values })
    }

    pub(crate) fn initial_context(&self, tape: &mut Tape, batch: usize) -> NodeId {
        let rows = batch * self.layout.num_slots() * self.layout.desc_len;
        tape.input(Tensor::zeros(rows, self.config.context_hidden))
    }

    /// One turn for a batch of dialogues. `inputs[b]` is the
    /// `[CLS] system [SEP] user` token sequence of dialogue `b`.
    pub(crate) fn step(
        &self,
        tape: &mut Tape,
        desc: DescNodes,
        ctx: NodeId,
        inputs: &[&[u32]],
    ) -> Result<StepNodes> {
        let b = inputs.len();
        let ns = self.layout.num_slots();
        let (states, lens) = self.encode(tape, inputs)?;
        let (k, v) = self.net.att.project_memory(tape, states)?;
        let matched = self.net.att.attend_shared(tape, desc.q, k, v, &lens)?;
        let ctx = self.net.ctx.step(tape, matched, ctx)?;
        let pooled = self
            .net
            .pool
            .forward_grouped(tape, ctx, self.layout.desc_len)?;

        let cos = tape.cosine_matrix(pooled, desc.values)?;
        let logits = tape.scale(cos, self.config.logit_scale);
        let mut goal = Vec::with_capacity(ns);
        for s in 0..ns {
            let rows: Vec<usize> = (0..b).map(|i| i * ns + s).collect();
            let g = tape.gather(logits, &rows)?;
            goal.push(tape.slice_cols(g, self.layout.value_offset[s], self.layout.k[s])?);
        }
        let request = self.net.req.forward(tape, pooled)?;
        let mut domain = Vec::with_capacity(self.layout.num_domains());
        for slots in &self.layout.domain_slots {
            let rows: Vec<usize> = (0..b)
                .flat_map(|i| slots.iter().map(move |&s| i * ns + s))
                .collect();
            let g = tape.gather(pooled, &rows)?;
            let mean = tape.mean_groups(g, slots.len())?;
            domain.push(self.net.dom.forward(tape, mean)?);
        }
        // [CLS] sits at step 0, i.e. the first B rows
        let cls = tape.slice_rows(states, 0, b)?;
        let general = self.net.gen.forward(tape, cls)?;
        Ok(StepNodes {
            ctx,
            goal,
            request,
            domain,
            general,
        })
    }

    /// Reads the per-dialogue outputs of a step off the tape.
    pub(crate) fn read_outputs(&self, tape: &Tape, step: &StepNodes) -> Result<Vec<TrackerOutput>> {
        let b = tape.shape(step.general).0;
        let ns = self.layout.num_slots();
        (0..b)
            .map(|i| {
                let goal = step
                    .goal
                    .iter()
                    .map(|&g| self.goal_belief(tape.value(g).row_slice(i)))
                    .collect::<Result<_>>()?;
                let req = tape.value(step.request).data();
                Ok(TrackerOutput {
                    goal,
                    request: (0..ns)
                        .map(|s| crate::uncmath::sigmoid(req[i * ns + s]))
                        .collect(),
                    active: step
                        .domain
                        .iter()
                        .map(|&d| crate::uncmath::sigmoid(tape.value(d).data()[i]))
                        .collect(),
                    general: Categorical::softmax(tape.value(step.general).row_slice(i))?,
                })
            })
            .collect()
    }

    pub(crate) fn goal_belief(&self, logits: &[f64]) -> Result<GoalBelief> {
        Ok(match self.kind {
            OutputKind::Categorical => GoalBelief::Categorical(Categorical::softmax(logits)?),
            OutputKind::Dirichlet => {
                let alphas = logits
                    .iter()
                    .map(|z| z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP).exp())
                    .collect();
                GoalBelief::Dirichlet(DirichletParams::new(alphas)?)
            }
        })
    }

    /// Tracks whole dialogues, given as per-turn input sequences. Dialogues
    /// of equal length are batched together; results keep input order.
    pub fn track(
        &self,
        dialogues: &[Vec<Vec<u32>>],
        batch_size: usize,
    ) -> Result<Vec<Vec<TrackerOutput>>> {
        let mut order: Vec<usize> = (0..dialogues.len()).collect();
        order.sort_by_key(|&i| (dialogues[i].len(), i));
        let mut out: Vec<Vec<TrackerOutput>> = vec![Vec::new(); dialogues.len()];
        let mut start = 0;
        while start < order.len() {
            let len = dialogues[order[start]].len();
            let mut end = start;
            while end < order.len()
                && end - start < batch_size.max(1)
                && dialogues[order[end]].len() == len
            {
                end += 1;
            }
            let batch = &order[start..end];
            let mut tape = Tape::new(&self.params);
            let desc = self.describe(&mut tape)?;
            let mut ctx = self.initial_context(&mut tape, batch.len());
            for t in 0..len {
                let inputs: Vec<&[u32]> =
                    batch.iter().map(|&i| dialogues[i][t].as_slice()).collect();
                let step = self.step(&mut tape, desc, ctx, &inputs)?;
                ctx = step.ctx;
                for (o, &i) in self.read_outputs(&tape, &step)?.into_iter().zip(batch) {
                    out[i].push(o);
                }
            }
            start = end;
        }
        Ok(out)
    }

    pub fn session(&self) -> Result<TrackerSession<'_>> {
        TrackerSession::new(self)
    }
}

/// Turn-by-turn inference for one dialogue. Description encodings are
/// computed once; each turn replays a single step on a fresh tape.
#[derive(Debug, Clone)]
pub struct TrackerSession<'m> {
    model: &'m TrackerModel,
    q: Tensor,
    values: Tensor,
    ctx: Tensor,
    turns: usize,
}

impl<'m> TrackerSession<'m> {
    fn new(model: &'m TrackerModel) -> Result<Self> {
        let mut tape = Tape::new(&model.params);
        let desc = model.describe(&mut tape)?;
        let ctx = model.initial_context(&mut tape, 1);
        Ok(Self {
            model,
            q: tape.value(desc.q).clone(),
            values: tape.value(desc.values).clone(),
            ctx: tape.value(ctx).clone(),
            turns: 0,
        })
    }

    pub fn reset(&mut self) {
        self.ctx = Tensor::zeros(self.ctx.rows(), self.ctx.cols());
        self.turns = 0;
    }

    pub fn turns(&self) -> usize {
        self.turns
    }

    /// Context sequence for every slot, (S·L_d)×H.
    pub fn context(&self) -> &Tensor {
        &self.ctx
    }

    pub fn step(&mut self, input: &[u32]) -> Result<TrackerOutput> {
        let mut tape = Tape::new(&self.model.params);
        let desc = DescNodes {
            q: tape.input(self.q.clone()),
            values: tape.input(self.values.clone()),
        };
        let ctx = tape.input(self.ctx.clone());
        let step = self.model.step(&mut tape, desc, ctx, &[input])?;
        let out = self
            .model
            .read_outputs(&tape, &step)?
            .pop()
            .expect("one dialogue");
        self.ctx = tape.value(step.ctx).clone();
        self.turns += 1;
        Ok(out)
    }
}
