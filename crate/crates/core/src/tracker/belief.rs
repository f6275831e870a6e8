use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{GoalBelief, TrackerOutput};
use crate::dialoguesim::{ActionSpace, Database, Ontology, World};
use crate::error::{Error, Result};
use crate::uncmath::{dirichlet_decompose, entropy};

/// Match-count buckets: 0, 1, 2–3, ≥4.
pub const DB_BUCKETS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeliefMode {
    /// Top values only; every confidence rounded to 1.
    Binary,
    Confidence,
    /// Confidence plus per-slot predictive entropy.
    TotalUnc,
    /// Confidence plus per-slot mutual information (Dirichlet trackers).
    KnowledgeUnc,
}

impl BeliefMode {
    pub const ALL: [BeliefMode; 4] = [
        BeliefMode::Binary,
        BeliefMode::Confidence,
        BeliefMode::TotalUnc,
        BeliefMode::KnowledgeUnc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BeliefMode::Binary => "binary",
            BeliefMode::Confidence => "confidence",
            BeliefMode::TotalUnc => "total_unc",
            BeliefMode::KnowledgeUnc => "knowledge_unc",
        }
    }

    pub fn has_uncertainty(self) -> bool {
        matches!(self, BeliefMode::TotalUnc | BeliefMode::KnowledgeUnc)
    }
}

impl fmt::Display for BeliefMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BeliefMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BeliefMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown belief mode `{s}`")))
    }
}

/// Dialogue-level facts the tracker does not predict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefContext {
    /// Index of the previous system action, if any.
    pub prev_action: Option<usize>,
    /// Booking flag per domain.
    pub bookings: Vec<bool>,
    pub terminated: bool,
}

impl BeliefContext {
    pub fn initial(num_domains: usize) -> Self {
        Self {
            prev_action: None,
            bookings: vec![false; num_domains],
            terminated: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DbResult {
    pub counts: Vec<usize>,
    pub buckets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    pub mode: BeliefMode,
    /// Top value per slot, flattening order.
    pub values: Vec<usize>,
    pub confidences: Vec<f64>,
    /// Candidate count per slot.
    pub k: Vec<usize>,
    pub general: Vec<f64>,
    pub request: Vec<f64>,
    pub active: Vec<f64>,
    pub db: DbResult,
    pub prev_action: Option<usize>,
    pub num_actions: usize,
    pub bookings: Vec<bool>,
    pub terminated: bool,
    pub uncertainty: Option<Vec<f64>>,
}

impl BeliefState {
    /// Constraints that take part in the database query, as
    /// `(flat slot, value)`.
    pub fn participating(&self) -> Vec<(usize, usize)> {
        (0..self.values.len())
            .filter(|&i| self.values[i] != 0 && self.confidences[i] > 1.0 / self.k[i] as f64)
            .map(|i| (i, self.values[i]))
            .collect()
    }

    /// Flat policy input.
    pub fn features(&self) -> Vec<f64> {
        let mut f = Vec::new();
        for (i, &k) in self.k.iter().enumerate() {
            let start = f.len();
            f.resize(start + k, 0.0);
            f[start + self.values[i]] = 1.0;
            f.push(self.confidences[i]);
        }
        f.extend(&self.general);
        f.extend(&self.request);
        f.extend(&self.active);
        for &b in &self.db.buckets {
            let start = f.len();
            f.resize(start + DB_BUCKETS, 0.0);
            f[start + b] = 1.0;
        }
        let start = f.len();
        f.resize(start + self.num_actions, 0.0);
        if let Some(a) = self.prev_action {
            f[start + a] = 1.0;
        }
        f.extend(self.bookings.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        f.push(if self.terminated { 1.0 } else { 0.0 });
        if let Some(u) = &self.uncertainty {
            f.extend(u);
        }
        f
    }
}

/// Length of [`BeliefState::features`] for `mode`.
pub fn belief_feature_len(onto: &Ontology, mode: BeliefMode) -> usize {
    let refs = onto.slot_refs();
    let s = refs.len();
    let d = onto.num_domains();
    let values: usize = refs.iter().map(|&r| onto.slot(r).k()).sum();
    let base = values + s + 3 + s + d + DB_BUCKETS * d + ActionSpace::new(onto).len() + d + 1;
    if mode.has_uncertainty() {
        base + s
    } else {
        base
    }
}

pub fn db_bucket(count: usize) -> usize {
    match count {
        0 => 0,
        1 => 1,
        2 | 3 => 2,
        _ => 3,
    }
}

/// Per-domain match counts under the belief's participating constraints.
/// Constraints at or below chance confidence, or on `none`, are ignored.
pub fn db_query(belief: &BeliefState, onto: &Ontology, db: &Database) -> DbResult {
    let refs = onto.slot_refs();
    let mut constraints = vec![Vec::new(); onto.num_domains()];
    for (i, v) in belief.participating() {
        let r = refs[i];
        constraints[r.domain].push((r.slot, v));
    }
    let counts: Vec<usize> = constraints
        .iter()
        .enumerate()
        .map(|(d, c)| db.matching(d, c).len())
        .collect();
    let buckets = counts.iter().map(|&c| db_bucket(c)).collect();
    DbResult { counts, buckets }
}

/// Belief state from one tracker output. The database result is computed
/// from the (mode-adjusted) confidences.
pub fn assemble_belief_state(
    out: &TrackerOutput,
    world: &World,
    ctx: &BeliefContext,
    mode: BeliefMode,
) -> Result<BeliefState> {
    let onto = &world.ontology;
    let d = onto.num_domains();
    if out.goal.len() != onto.num_slots() || out.active.len() != d || ctx.bookings.len() != d {
        return Err(Error::DimensionMismatch {
            expected: onto.num_slots(),
            got: out.goal.len(),
        });
    }
    let num_actions = ActionSpace::new(onto).len();
    if let Some(a) = ctx.prev_action.filter(|&a| a >= num_actions) {
        return Err(Error::UnknownSystemAction(format!("action index {a}")));
    }
    let preds = out.predictive_goal();
    let values: Vec<usize> = preds.iter().map(|p| p.argmax()).collect();
    let k: Vec<usize> = preds.iter().map(|p| p.k()).collect();
    let uncertainty = match mode {
        BeliefMode::Binary | BeliefMode::Confidence => None,
        BeliefMode::TotalUnc => Some(preds.iter().map(entropy).collect()),
        BeliefMode::KnowledgeUnc => Some(
            out.goal
                .iter()
                .map(|g| match g {
                    GoalBelief::Dirichlet(d) => Ok(dirichlet_decompose(d).knowledge),
                    GoalBelief::Categorical(_) => Err(Error::ModeUnsupported(
                        "knowledge uncertainty needs a Dirichlet tracker".into(),
                    )),
                })
                .collect::<Result<_>>()?,
        ),
    };
    let round = |p: f64| if p > 0.5 { 1.0 } else { 0.0 };
    let (confidences, general, request, active) = if mode == BeliefMode::Binary {
        let g = out.general.argmax();
        (
            vec![1.0; preds.len()],
            (0..out.general.k())
                .map(|i| if i == g { 1.0 } else { 0.0 })
                .collect(),
            out.request.iter().map(|&p| round(p)).collect(),
            out.active.iter().map(|&p| round(p)).collect(),
        )
    } else {
        (
            preds.iter().map(|p| p.max_prob()).collect(),
            out.general.probs().to_vec(),
            out.request.clone(),
            out.active.clone(),
        )
    };
    let mut state = BeliefState {
        mode,
        values,
        confidences,
        k,
        general,
        request,
        active,
        db: DbResult {
            counts: Vec::new(),
            buckets: Vec::new(),
        },
        prev_action: ctx.prev_action,
        num_actions,
        bookings: ctx.bookings.clone(),
        terminated: ctx.terminated,
        uncertainty,
    };
    state.db = db_query(&state, onto, &world.database);
    Ok(state)
}
