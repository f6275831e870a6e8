//! Agenda-based rule user: goal sampling, responses to system actions,
//! template rendering with value-variation noise, and dialogue scoring.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::world::{Ontology, SlotRef, World, CLS, SEP};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

pub const DEFAULT_NOISE: f64 = 0.2;
pub const DEFAULT_MAX_TURNS: usize = 20;
pub const SUCCESS_REWARD: f64 = 80.0;
pub const FAILURE_PENALTY: f64 = 40.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainGoal {
    pub domain: usize,
    /// `(slot, value)` with 1-based value indices.
    pub constraints: Vec<(usize, usize)>,
    pub requests: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserGoal {
    /// In the order the user pursues them.
    pub domains: Vec<DomainGoal>,
}

impl UserGoal {
    pub fn domain_goal(&self, domain: usize) -> Option<&DomainGoal> {
        self.domains.iter().find(|g| g.domain == domain)
    }
}

/// 1–2 domains; per domain 1–3 constraints (leaving at least one slot free
/// to request) and 1–2 requests. Constraints are read off a random row,
/// so the goal always has a match.
pub fn sample_user_goal(world: &World, rng: &mut impl Rng) -> UserGoal {
    let onto = &world.ontology;
    let n_domains = rng.gen_range(1..=onto.num_domains().min(2));
    let mut order: Vec<usize> = (0..onto.num_domains()).collect();
    order.shuffle(rng);
    let domains = order[..n_domains]
        .iter()
        .map(|&d| {
            let n_slots = onto.domains[d].slots.len();
            let max_c = 3.min(n_slots - 1);
            let n_c = rng.gen_range(1..=max_c);
            let mut slots: Vec<usize> = (0..n_slots).collect();
            slots.shuffle(rng);
            let rows = world.database.rows(d);
            let row = &rows[rng.gen_range(0..rows.len())];
            let mut constraints: Vec<(usize, usize)> =
                slots[..n_c].iter().map(|&s| (s, row[s])).collect();
            constraints.sort_unstable();
            let free = &slots[n_c..];
            let n_r = rng.gen_range(1..=free.len().min(2));
            let mut requests = free[..n_r].to_vec();
            requests.sort_unstable();
            DomainGoal {
                domain: d,
                constraints,
                requests,
            }
        })
        .collect();
    UserGoal { domains }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SystemActionKind {
    Request { domain: usize, slot: usize },
    Offer { domain: usize },
    Book { domain: usize },
    Reqmore,
    Bye,
}

/// A system turn as the simulator sees it. `entity` and `answered` are
/// filled in by whoever executes an offer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemAction {
    pub kind: SystemActionKind,
    pub entity: Option<usize>,
    pub answered: Vec<usize>,
}

impl SystemAction {
    pub fn simple(kind: SystemActionKind) -> Self {
        Self {
            kind,
            entity: None,
            answered: Vec::new(),
        }
    }
}

/// How a value was realised in the utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Surface {
    Canonical,
    Variant(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum UserAct {
    Inform {
        domain: usize,
        slot: usize,
        value: usize,
        surface: Surface,
    },
    DontCare {
        domain: usize,
        slot: usize,
    },
    Request {
        domain: usize,
        slot: usize,
    },
    ThankYou,
    Goodbye,
}

pub const GENERAL_NONE: usize = 0;
pub const GENERAL_THANK: usize = 1;
pub const GENERAL_BYE: usize = 2;

/// Gold labels for one user turn. Slot vectors follow
/// [`Ontology::slot_refs`] order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnLabels {
    pub goal: Vec<usize>,
    pub requested: Vec<bool>,
    pub general: usize,
    pub active: Vec<bool>,
    /// Slots whose value was realised as a variant in this turn.
    pub variant_slots: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserTurn {
    pub acts: Vec<UserAct>,
    pub tokens: Vec<u32>,
    pub labels: TurnLabels,
    pub terminated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub noise: f64,
    pub max_turns: usize,
    pub goal_change_prob: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            noise: DEFAULT_NOISE,
            max_turns: DEFAULT_MAX_TURNS,
            goal_change_prob: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DialogueResult {
    pub success: bool,
    pub turns: usize,
    pub reward: f64,
}

pub fn dialogue_reward(success: bool, turns: usize) -> f64 {
    if success {
        SUCCESS_REWARD - turns as f64
    } else {
        -FAILURE_PENALTY - turns as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct DomainProgress {
    offered: Option<usize>,
    answered: Vec<usize>,
    violated: bool,
}

/// The simulated user. Owns its goal, agenda progress and random stream.
#[derive(Debug, Clone)]
pub struct Simulator<'w> {
    world: &'w World,
    slot_order: Vec<SlotRef>,
    pub goal: UserGoal,
    config: SimConfig,
    rng: StreamRng,
    progress: Vec<DomainProgress>,
    current: usize,
    informed: Vec<usize>,
    thanked: bool,
    terminated: bool,
    turns: usize,
    user_turns: usize,
    change_pending: bool,
}

impl<'w> Simulator<'w> {
    pub fn new(world: &'w World, goal: UserGoal, config: SimConfig, mut rng: StreamRng) -> Self {
        let n = goal.domains.len();
        let change_pending = rng.gen_bool(config.goal_change_prob.clamp(0.0, 1.0));
        Self {
            world,
            slot_order: world.ontology.slot_refs(),
            goal,
            config,
            rng,
            progress: vec![DomainProgress::default(); n],
            current: 0,
            informed: vec![0; world.ontology.num_slots()],
            thanked: false,
            terminated: false,
            turns: 0,
            user_turns: 0,
            change_pending,
        }
    }

    pub fn ontology(&self) -> &Ontology {
        &self.world.ontology
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    pub fn turns(&self) -> usize {
        self.turns
    }

    /// Domain currently pursued, if any remains.
    pub fn current_domain(&self) -> Option<usize> {
        self.goal.domains.get(self.current).map(|g| g.domain)
    }

    fn flat(&self, domain: usize, slot: usize) -> usize {
        self.slot_order
            .iter()
            .position(|r| r.domain == domain && r.slot == slot)
            .expect("slot in ontology")
    }

    fn inform_act(&mut self, domain: usize, slot: usize, value: usize) -> UserAct {
        let world = self.world;
        let surface = sample_surface(
            &world.ontology,
            SlotRef { domain, slot },
            value,
            self.config.noise,
            &mut self.rng,
        );
        UserAct::Inform {
            domain,
            slot,
            value,
            surface,
        }
    }

    fn inform_all(&mut self, gi: usize) -> Vec<UserAct> {
        let g = self.goal.domains[gi].clone();
        g.constraints
            .iter()
            .map(|&(s, v)| self.inform_act(g.domain, s, v))
            .collect()
    }

    fn satisfies(&self, gi: usize, row: usize) -> bool {
        let g = &self.goal.domains[gi];
        let r = &self.world.database.rows(g.domain)[row];
        g.constraints.iter().all(|&(s, v)| r[s] == v)
    }

    fn pending_requests(&self, gi: usize) -> Vec<usize> {
        self.goal.domains[gi]
            .requests
            .iter()
            .copied()
            .filter(|s| !self.progress[gi].answered.contains(s))
            .collect()
    }

    /// What the user says when the system did nothing useful.
    fn default_response(&mut self) -> Vec<UserAct> {
        if self.current >= self.goal.domains.len() {
            return if self.thanked {
                vec![UserAct::Goodbye]
            } else {
                vec![UserAct::ThankYou]
            };
        }
        let gi = self.current;
        match self.progress[gi].offered {
            None => self.inform_all(gi),
            Some(_) => {
                let d = self.goal.domains[gi].domain;
                self.pending_requests(gi)
                    .into_iter()
                    .map(|s| UserAct::Request { domain: d, slot: s })
                    .collect()
            }
        }
    }

    /// Moves to the next domain once the current one is complete.
    fn advance(&mut self) -> Vec<UserAct> {
        self.current += 1;
        if self.current < self.goal.domains.len() {
            self.inform_all(self.current)
        } else {
            vec![UserAct::ThankYou]
        }
    }

    /// Changes one constraint of the current domain to another value that
    /// keeps the goal satisfiable.
    fn change_goal(&mut self) -> Option<UserAct> {
        let gi = self.current;
        let g = self.goal.domains.get(gi)?.clone();
        let ci = self.rng.gen_range(0..g.constraints.len());
        let (slot, old) = g.constraints[ci];
        let others: Vec<(usize, usize)> = g
            .constraints
            .iter()
            .copied()
            .filter(|&(s, _)| s != slot)
            .collect();
        let mut options: Vec<usize> = self
            .world
            .database
            .matching(g.domain, &others)
            .into_iter()
            .map(|r| self.world.database.rows(g.domain)[r][slot])
            .filter(|&v| v != old)
            .collect();
        options.sort_unstable();
        options.dedup();
        let &new = options.choose(&mut self.rng)?;
        self.goal.domains[gi].constraints[ci].1 = new;
        Some(self.inform_act(g.domain, slot, new))
    }

    /// First user turn, before any system action.
    pub fn start(&mut self) -> UserTurn {
        let acts = self.inform_all(0);
        self.finish_turn(acts)
    }

    pub fn respond(&mut self, action: &SystemAction) -> Result<UserTurn> {
        if self.terminated {
            return Err(Error::UnknownSystemAction(
                "dialogue already terminated".into(),
            ));
        }
        self.check_action(action)?;
        self.turns += 1;
        let mut acts = match action.kind {
            SystemActionKind::Bye => {
                self.terminated = true;
                Vec::new()
            }
            _ if self.current >= self.goal.domains.len() => {
                if self.thanked {
                    vec![UserAct::Goodbye]
                } else {
                    vec![UserAct::ThankYou]
                }
            }
            SystemActionKind::Request { domain, slot } => {
                let gi = self.current;
                let g = self.goal.domains[gi].clone();
                if domain != g.domain {
                    self.inform_all(gi)
                } else if let Some(&(_, v)) = g.constraints.iter().find(|c| c.0 == slot) {
                    vec![self.inform_act(domain, slot, v)]
                } else {
                    vec![UserAct::DontCare { domain, slot }]
                }
            }
            SystemActionKind::Offer { domain } => {
                let gi = self.current;
                let d = self.goal.domains[gi].domain;
                match action.entity {
                    Some(row) if domain == d => {
                        if !self.satisfies(gi, row) {
                            self.progress[gi].violated = true;
                            self.progress[gi].offered = None;
                            self.progress[gi].answered.clear();
                            self.inform_all(gi)
                        } else {
                            if self.progress[gi].offered != Some(row) {
                                self.progress[gi].answered.clear();
                            }
                            self.progress[gi].offered = Some(row);
                            for &s in &action.answered {
                                if self.goal.domains[gi].requests.contains(&s)
                                    && !self.progress[gi].answered.contains(&s)
                                {
                                    self.progress[gi].answered.push(s);
                                }
                            }
                            let pending = self.pending_requests(gi);
                            if pending.is_empty() {
                                self.advance()
                            } else {
                                pending
                                    .into_iter()
                                    .map(|s| UserAct::Request { domain: d, slot: s })
                                    .collect()
                            }
                        }
                    }
                    Some(_) => self.inform_all(gi),
                    None => self.default_response(),
                }
            }
            SystemActionKind::Book { .. } | SystemActionKind::Reqmore => self.default_response(),
        };
        if !self.terminated && self.change_pending && self.user_turns == 1 {
            self.change_pending = false;
            if self.current < self.goal.domains.len() {
                if let Some(act) = self.change_goal() {
                    // an entity offered under the old goal no longer counts
                    self.progress[self.current].offered = None;
                    self.progress[self.current].answered.clear();
                    // the change replaces any stale mention of the same slot
                    if let UserAct::Inform { domain, slot, .. } = act {
                        acts.retain(|a| !matches!(a, UserAct::Inform { domain: d, slot: s, .. } if *d == domain && *s == slot));
                    }
                    acts.insert(0, act);
                }
            }
        }
        if acts.iter().any(|a| matches!(a, UserAct::Goodbye)) {
            self.terminated = true;
        }
        if acts.iter().any(|a| matches!(a, UserAct::ThankYou)) {
            self.thanked = true;
        }
        if self.turns >= self.config.max_turns {
            self.terminated = true;
        }
        Ok(self.finish_turn(acts))
    }

    fn check_action(&self, action: &SystemAction) -> Result<()> {
        let onto = &self.world.ontology;
        let bad_domain = |d: usize| d >= onto.num_domains();
        match action.kind {
            SystemActionKind::Request { domain, slot } => {
                if bad_domain(domain) || slot >= onto.domains[domain].slots.len() {
                    return Err(Error::UnknownSystemAction(format!(
                        "request d{domain}.s{slot}"
                    )));
                }
            }
            SystemActionKind::Offer { domain } | SystemActionKind::Book { domain } => {
                if bad_domain(domain) {
                    return Err(Error::UnknownSystemAction(format!("domain {domain}")));
                }
                if let Some(row) = action.entity {
                    if row >= self.world.database.rows(domain).len() {
                        return Err(Error::UnknownSystemAction(format!(
                            "entity {row} in d{domain}"
                        )));
                    }
                }
                if action
                    .answered
                    .iter()
                    .any(|&s| s >= onto.domains[domain].slots.len())
                {
                    return Err(Error::UnknownSystemAction(
                        "answered slot out of range".into(),
                    ));
                }
            }
            SystemActionKind::Reqmore | SystemActionKind::Bye => {}
        }
        Ok(())
    }

    fn finish_turn(&mut self, acts: Vec<UserAct>) -> UserTurn {
        self.user_turns += 1;
        let onto = &self.world.ontology;
        let mut variant_slots = Vec::new();
        for a in &acts {
            if let UserAct::Inform {
                domain,
                slot,
                value,
                surface,
            } = *a
            {
                let idx = self.flat(domain, slot);
                self.informed[idx] = value;
                if matches!(surface, Surface::Variant(_)) {
                    variant_slots.push(idx);
                }
            }
        }
        let mut requested = vec![false; self.slot_order.len()];
        let mut active = vec![false; onto.num_domains()];
        let mut general = GENERAL_NONE;
        for a in &acts {
            match *a {
                UserAct::Inform { domain, .. } | UserAct::DontCare { domain, .. } => {
                    active[domain] = true
                }
                UserAct::Request { domain, slot } => {
                    active[domain] = true;
                    requested[self.flat(domain, slot)] = true;
                }
                UserAct::ThankYou => general = GENERAL_THANK,
                UserAct::Goodbye => general = GENERAL_BYE,
            }
        }
        let tokens = render_utterance(&acts, onto);
        UserTurn {
            acts,
            tokens,
            labels: TurnLabels {
                goal: self.informed.clone(),
                requested,
                general,
                active,
                variant_slots,
            },
            terminated: self.terminated,
        }
    }

    pub fn result(&self) -> DialogueResult {
        score_dialogue(&self.goal, &self.outcome(), self.turns)
    }

    fn outcome(&self) -> Vec<(Option<usize>, Vec<usize>, bool)> {
        self.progress
            .iter()
            .map(|p| (p.offered, p.answered.clone(), p.violated))
            .collect()
    }
}

/// Success iff for every goal domain an entity satisfying the constraints was
/// offered, every request was answered from it, and no violating entity was
/// ever offered. `outcome[i]` is `(offered row, answered slots, violated)`.
pub fn score_dialogue(
    goal: &UserGoal,
    outcome: &[(Option<usize>, Vec<usize>, bool)],
    turns: usize,
) -> DialogueResult {
    let success = goal.domains.len() == outcome.len()
        && goal
            .domains
            .iter()
            .zip(outcome)
            .all(|(g, (offered, answered, violated))| {
                offered.is_some() && !violated && g.requests.iter().all(|r| answered.contains(r))
            });
    DialogueResult {
        success,
        turns,
        reward: dialogue_reward(success, turns),
    }
}

/// Template realisation of user acts. Domain tokens open each run of acts
/// about one domain.
pub fn render_utterance(acts: &[UserAct], onto: &Ontology) -> Vec<u32> {
    let want = onto.word("want");
    let mut out = Vec::new();
    let mut last_domain = None;
    let mut domain_prefix = |d: usize, out: &mut Vec<u32>| {
        if last_domain != Some(d) {
            out.push(onto.domains[d].token);
            last_domain = Some(d);
        }
    };
    for a in acts {
        match *a {
            UserAct::Inform {
                domain,
                slot,
                value,
                surface,
            } => {
                domain_prefix(domain, &mut out);
                let spec = &onto.domains[domain].slots[slot];
                out.push(want);
                out.push(spec.token);
                match surface {
                    Surface::Canonical => out.extend(&spec.values[value].canonical),
                    Surface::Variant(j) => out.extend(&spec.values[value].variants[j]),
                }
            }
            UserAct::DontCare { domain, slot } => {
                domain_prefix(domain, &mut out);
                out.push(onto.word("any"));
                out.push(onto.domains[domain].slots[slot].token);
                out.push(onto.word("fine"));
            }
            UserAct::Request { domain, slot } => {
                domain_prefix(domain, &mut out);
                out.push(onto.word("what"));
                out.push(onto.word("is"));
                out.push(onto.domains[domain].slots[slot].token);
            }
            UserAct::ThankYou => out.push(onto.word("thanks")),
            UserAct::Goodbye => out.push(onto.word("bye")),
        }
    }
    out
}

/// Draws a surface form for a value-bearing act: a variant with
/// probability `noise`, variant `j` of `n` weighted by `n - j` so the first
/// paraphrase is the most typical.
pub fn sample_surface(
    onto: &Ontology,
    r: SlotRef,
    value: usize,
    noise: f64,
    rng: &mut impl Rng,
) -> Surface {
    let spec = &onto.slot(r).values[value];
    if spec.variants.is_empty() || !rng.gen_bool(noise.clamp(0.0, 1.0)) {
        return Surface::Canonical;
    }
    let n = spec.variants.len();
    let total = n * (n + 1) / 2;
    let mut pick = rng.gen_range(0..total);
    let mut j = 0;
    while pick >= n - j {
        pick -= n - j;
        j += 1;
    }
    Surface::Variant(j)
}

/// Tokens for a system action, as fed to the tracker on the next turn.
pub fn render_system(action: Option<&SystemAction>, world: &World) -> Vec<u32> {
    let onto = &world.ontology;
    let Some(action) = action else {
        return Vec::new();
    };
    match action.kind {
        SystemActionKind::Request { domain, slot } => vec![
            onto.word("sys_request"),
            onto.domains[domain].token,
            onto.domains[domain].slots[slot].token,
        ],
        SystemActionKind::Offer { domain } => {
            let mut t = vec![onto.word("sys_offer"), onto.domains[domain].token];
            if let Some(row) = action.entity {
                let r = &world.database.rows(domain)[row];
                for &s in &action.answered {
                    let spec = &onto.domains[domain].slots[s];
                    t.push(spec.token);
                    t.extend(&spec.values[r[s]].canonical);
                }
            } else {
                t.push(onto.word("none"));
            }
            t
        }
        SystemActionKind::Book { domain } => {
            vec![onto.word("sys_book"), onto.domains[domain].token]
        }
        SystemActionKind::Reqmore => vec![onto.word("sys_reqmore")],
        SystemActionKind::Bye => vec![onto.word("sys_bye")],
    }
}

/// `[CLS] system [SEP] user` tracker input.
pub fn tracker_input(system: &[u32], user: &[u32]) -> Vec<u32> {
    let mut t = Vec::with_capacity(system.len() + user.len() + 2);
    t.push(CLS);
    t.extend_from_slice(system);
    t.push(SEP);
    t.extend_from_slice(user);
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialoguesim::world::{build_world, WorldConfig};
    use crate::rng::stream;

    fn world() -> World {
        build_world(&WorldConfig::default(), 3).unwrap()
    }

    fn goal_one() -> UserGoal {
        UserGoal {
            domains: vec![DomainGoal {
                domain: 0,
                constraints: vec![(0, 1)],
                requests: vec![2],
            }],
        }
    }

    fn quiet() -> SimConfig {
        SimConfig {
            noise: 0.0,
            max_turns: 20,
            goal_change_prob: 0.0,
        }
    }

    #[test]
    fn goals_are_satisfiable_and_well_formed() {
        let w = world();
        let mut rng = stream(5, "goals");
        for _ in 0..1000 {
            let g = sample_user_goal(&w, &mut rng);
            assert!((1..=2).contains(&g.domains.len()));
            for dg in &g.domains {
                assert!((1..=3).contains(&dg.constraints.len()));
                assert!((1..=2).contains(&dg.requests.len()));
                assert!(dg
                    .constraints
                    .iter()
                    .all(|&(s, v)| s < 3 && (1..=5).contains(&v)));
                assert!(dg
                    .requests
                    .iter()
                    .all(|r| !dg.constraints.iter().any(|c| c.0 == *r)));
            }
            assert!(g
                .domains
                .iter()
                .all(|dg| !w.database.matching(dg.domain, &dg.constraints).is_empty()));
        }
    }

    #[test]
    fn request_of_constraint_is_answered() {
        let w = world();
        let mut sim = Simulator::new(&w, goal_one(), quiet(), stream(0, "u"));
        sim.start();
        let t = sim
            .respond(&SystemAction::simple(SystemActionKind::Request {
                domain: 0,
                slot: 0,
            }))
            .unwrap();
        assert_eq!(
            t.acts,
            vec![UserAct::Inform {
                domain: 0,
                slot: 0,
                value: 1,
                surface: Surface::Canonical
            }]
        );
    }

    #[test]
    fn matching_offer_triggers_requests_then_thanks() {
        let w = world();
        let row = w.database.matching(0, &[(0, 1)]);
        let g = goal_one();
        let mut sim = Simulator::new(&w, g, quiet(), stream(0, "u"));
        sim.start();
        if row.is_empty() {
            return;
        }
        let offer = SystemAction {
            kind: SystemActionKind::Offer { domain: 0 },
            entity: Some(row[0]),
            answered: vec![],
        };
        let t = sim.respond(&offer).unwrap();
        assert_eq!(t.acts, vec![UserAct::Request { domain: 0, slot: 2 }]);
        assert!(t.labels.requested[2]);
        let answer = SystemAction {
            answered: vec![2],
            ..offer
        };
        let t = sim.respond(&answer).unwrap();
        assert_eq!(t.acts, vec![UserAct::ThankYou]);
        assert_eq!(t.labels.general, GENERAL_THANK);
        let t = sim
            .respond(&SystemAction::simple(SystemActionKind::Reqmore))
            .unwrap();
        assert_eq!(t.acts, vec![UserAct::Goodbye]);
        assert!(t.terminated);
        let r = sim.result();
        assert!(r.success);
        assert_eq!(r.turns, 3);
        assert_eq!(r.reward, 77.0);
    }

    #[test]
    fn violating_offer_fails() {
        let w = world();
        let bad = (0..w.database.rows(0).len())
            .find(|&r| w.database.rows(0)[r][0] != 1)
            .unwrap();
        let mut sim = Simulator::new(&w, goal_one(), quiet(), stream(0, "u"));
        sim.start();
        let t = sim
            .respond(&SystemAction {
                kind: SystemActionKind::Offer { domain: 0 },
                entity: Some(bad),
                answered: vec![],
            })
            .unwrap();
        assert!(matches!(t.acts[0], UserAct::Inform { .. }));
        sim.respond(&SystemAction::simple(SystemActionKind::Bye))
            .unwrap();
        assert!(!sim.result().success);
    }

    #[test]
    fn unknown_action_rejected() {
        let w = world();
        let mut sim = Simulator::new(&w, goal_one(), quiet(), stream(0, "u"));
        sim.start();
        let r = sim.respond(&SystemAction::simple(SystemActionKind::Request {
            domain: 5,
            slot: 0,
        }));
        assert!(matches!(r, Err(Error::UnknownSystemAction(_))));
    }

    #[test]
    fn max_turns_terminates() {
        let w = world();
        let mut sim = Simulator::new(&w, goal_one(), quiet(), stream(0, "u"));
        sim.start();
        let mut n = 0;
        while !sim.is_terminated() {
            sim.respond(&SystemAction::simple(SystemActionKind::Reqmore))
                .unwrap();
            n += 1;
        }
        assert_eq!(n, 20);
        let r = sim.result();
        assert!(!r.success);
        assert_eq!(r.reward, -60.0);
    }

    #[test]
    fn reward_formula() {
        assert_eq!(dialogue_reward(true, 7), 73.0);
        assert_eq!(dialogue_reward(false, 20), -60.0);
    }

    #[test]
    fn noise_rates() {
        let w = world();
        let r = SlotRef { domain: 0, slot: 0 };
        let mut rng = stream(1, "noise");
        for _ in 0..100 {
            assert_eq!(
                sample_surface(&w.ontology, r, 2, 0.0, &mut rng),
                Surface::Canonical
            );
        }
        let n = 10_000;
        let variants = (0..n)
            .filter(|_| {
                matches!(
                    sample_surface(&w.ontology, r, 2, 0.2, &mut rng),
                    Surface::Variant(_)
                )
            })
            .count();
        let frac = variants as f64 / n as f64;
        assert!((frac - 0.2).abs() <= 0.02, "{frac}");

        let single = build_world(
            &WorldConfig {
                variants_per_value: 1,
                ..WorldConfig::default()
            },
            3,
        )
        .unwrap();
        for _ in 0..100 {
            assert_eq!(
                sample_surface(&single.ontology, r, 2, 1.0, &mut rng),
                Surface::Canonical
            );
        }
    }

    #[test]
    fn variants_never_change_semantics() {
        let w = world();
        let mut sim = Simulator::new(
            &w,
            goal_one(),
            SimConfig {
                noise: 1.0,
                ..quiet()
            },
            stream(0, "u"),
        );
        let t = sim.start();
        match t.acts[0] {
            UserAct::Inform { value, surface, .. } => {
                assert_eq!(value, 1);
                assert!(matches!(surface, Surface::Variant(_)));
            }
            _ => panic!(),
        }
        assert_eq!(t.labels.goal[0], 1);
        assert_eq!(t.labels.variant_slots, vec![0]);
    }
}
