//! Desk-scale set-based belief tracker: toy turn encoder, slot-utterance
//! matching, positionwise context GRU, shared Set Pooler, four heads, and
//! belief-state assembly for the policy.

mod belief;
mod model;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::uncmath::{dirichlet_mean, Categorical, DirichletParams};

pub use belief::{
    assemble_belief_state, belief_feature_len, db_bucket, db_query, BeliefContext, BeliefMode,
    BeliefState, DbResult, DB_BUCKETS,
};
pub use model::{SlotLayout, TrackerModel, TrackerSession};
pub use train::{
    multitask_loss, predict_ensemble, tape_dialogue_loss, teacher_targets, train_tracker,
    LossBreakdown, LossWeights, Supervision, TeacherTurn, TrainConfig, TrainReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub embed_dim: usize,
    /// Encoder output width; each GRU direction gets half.
    pub hidden: usize,
    pub heads: usize,
    /// Context GRU width. Must equal `hidden`, since one pooler serves both
    /// context states and value descriptions.
    pub context_hidden: usize,
    pub pooler_width: usize,
    /// Multiplier on cosine similarities before the softmax.
    pub logit_scale: f64,
    /// Longer turn inputs are truncated.
    pub max_turn_len: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            hidden: 32,
            heads: 2,
            context_hidden: 32,
            pooler_width: 3,
            logit_scale: 10.0,
            max_turn_len: 32,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.hidden == 0 || self.hidden % 2 != 0 {
            return bad(format!("hidden {} must be even and positive", self.hidden));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!(
                "hidden {} not divisible into {} heads",
                self.hidden, self.heads
            ));
        }
        if self.context_hidden != self.hidden {
            return bad("context_hidden must equal hidden (shared pooler)".into());
        }
        if self.pooler_width % 2 == 0 {
            return bad("pooler width must be odd".into());
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return bad(format!("logit scale {} must be positive", self.logit_scale));
        }
        if self.max_turn_len < 2 {
            return bad("max_turn_len must allow [CLS] and [SEP]".into());
        }
        Ok(())
    }
}

/// Parameterisation of the goal head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    /// softmax over scaled cosines.
    Categorical,
    /// Concentrations `exp(scaled cosines)`: a prior network.
    Dirichlet,
}

impl OutputKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OutputKind::Categorical => "categorical",
            OutputKind::Dirichlet => "dirichlet",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GoalBelief {
    Categorical(Categorical),
    Dirichlet(DirichletParams),
}

impl GoalBelief {
    /// Predictive distribution (the Dirichlet mean for prior networks).
    pub fn predictive(&self) -> Categorical {
        match self {
            GoalBelief::Categorical(c) => c.clone(),
            GoalBelief::Dirichlet(d) => dirichlet_mean(d),
        }
    }

    pub fn k(&self) -> usize {
        match self {
            GoalBelief::Categorical(c) => c.k(),
            GoalBelief::Dirichlet(d) => d.k(),
        }
    }
}

/// Per-turn tracker prediction. Slot vectors follow the ontology's
/// flattening order; `active` is per domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerOutput {
    pub goal: Vec<GoalBelief>,
    pub request: Vec<f64>,
    pub active: Vec<f64>,
    pub general: Categorical,
}

impl TrackerOutput {
    pub fn predictive_goal(&self) -> Vec<Categorical> {
        self.goal.iter().map(GoalBelief::predictive).collect()
    }

    /// Averages member outputs into the ensemble's predictive output.
    pub fn average(members: &[TrackerOutput]) -> Result<TrackerOutput> {
        let first = members.first().ok_or(Error::EmptyEnsemble)?;
        let m = members.len() as f64;
        let mean_vec = |f: &dyn Fn(&TrackerOutput) -> &[f64]| -> Vec<f64> {
            let mut acc = vec![0.0; f(first).len()];
            for o in members {
                for (a, v) in acc.iter_mut().zip(f(o)) {
                    *a += v / m;
                }
            }
            acc
        };
        let goal = (0..first.goal.len())
            .map(|s| {
                let mut acc = vec![0.0; first.goal[s].k()];
                for o in members {
                    for (a, v) in acc.iter_mut().zip(o.goal[s].predictive().probs()) {
                        *a += v / m;
                    }
                }
                Categorical::from_weights(&acc).map(GoalBelief::Categorical)
            })
            .collect::<Result<_>>()?;
        Ok(TrackerOutput {
            goal,
            request: mean_vec(&|o| &o.request),
            active: mean_vec(&|o| &o.active),
            general: Categorical::from_weights(&mean_vec(&|o| o.general.probs()))?,
        })
    }
}
