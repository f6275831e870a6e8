//! Goal-aware scripted system used to generate training dialogues and as
//! the rule-based reference policy.

use super::corpus::{Agent, TurnContext};
use super::user::{Surface, SystemAction, SystemActionKind, UserAct, GENERAL_BYE, GENERAL_THANK};
use super::world::SlotRef;
use crate::error::Result;

/// Maximum confirmation requests per slot and dialogue.
pub const MAX_CONFIRMS: usize = 2;

#[derive(Debug, Clone, Default)]
pub struct ScriptedWizard {
    confirms: Vec<(SlotRef, usize)>,
    unconfirmed: Vec<SlotRef>,
    offered: Vec<(usize, usize)>,
}

impl ScriptedWizard {
    pub fn new() -> Self {
        Self::default()
    }

    fn confirms_for(&mut self, r: SlotRef) -> &mut usize {
        if let Some(i) = self.confirms.iter().position(|c| c.0 == r) {
            &mut self.confirms[i].1
        } else {
            self.confirms.push((r, 0));
            &mut self.confirms.last_mut().expect("just pushed").1
        }
    }
}

impl Agent for ScriptedWizard {
    fn reset(&mut self) {
        *self = Self::default();
    }

    fn act(&mut self, ctx: &TurnContext<'_>) -> Result<SystemAction> {
        let turn = ctx.turn;
        if turn.labels.general == GENERAL_THANK || turn.labels.general == GENERAL_BYE {
            return Ok(SystemAction::simple(SystemActionKind::Bye));
        }
        for a in &turn.acts {
            if let UserAct::Inform {
                domain,
                slot,
                surface,
                ..
            } = *a
            {
                let r = SlotRef { domain, slot };
                self.unconfirmed.retain(|&u| u != r);
                if matches!(surface, Surface::Variant(_)) {
                    self.unconfirmed.push(r);
                }
            }
        }
        while let Some(&r) = self.unconfirmed.first() {
            let n = self.confirms_for(r);
            if *n < MAX_CONFIRMS {
                *n += 1;
                return Ok(SystemAction::simple(SystemActionKind::Request {
                    domain: r.domain,
                    slot: r.slot,
                }));
            }
            self.unconfirmed.remove(0);
        }
        let sim = ctx.sim;
        let Some(domain) = sim.current_domain() else {
            return Ok(SystemAction::simple(SystemActionKind::Bye));
        };
        let goal = sim
            .goal
            .domain_goal(domain)
            .expect("current domain is in the goal");
        let entity = ctx
            .world
            .database
            .matching(domain, &goal.constraints)
            .first()
            .copied();
        let requested: Vec<usize> = turn
            .acts
            .iter()
            .filter_map(|a| match *a {
                UserAct::Request { domain: d, slot } if d == domain => Some(slot),
                _ => None,
            })
            .collect();
        let already = entity.is_some_and(|e| self.offered.contains(&(domain, e)));
        if !requested.is_empty() || !already {
            if let Some(e) = entity {
                self.offered.push((domain, e));
            }
            return Ok(SystemAction {
                kind: SystemActionKind::Offer { domain },
                entity,
                answered: requested,
            });
        }
        Ok(SystemAction::simple(SystemActionKind::Reqmore))
    }
}
