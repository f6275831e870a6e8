//! The dialogue loop shared by corpus generation and policy evaluation,
//! plus the JSONL corpus format.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::actions::ActionSpace;
use super::user::{
    render_system, sample_user_goal, tracker_input, DialogueResult, SimConfig, Simulator,
    SystemAction, TurnLabels, UserAct, UserGoal, UserTurn,
};
use super::wizard::ScriptedWizard;
use super::world::World;
use crate::error::{Error, Result};
use crate::rng::stream;

pub const CORPUS_SCHEMA: &str = "beliefunc.corpus/1";

/// Everything an agent may look at when choosing its next action. The
/// simulator is exposed for oracle agents; learned agents should only read
/// `input`.
pub struct TurnContext<'a> {
    pub world: &'a World,
    pub sim: &'a Simulator<'a>,
    pub turn: &'a UserTurn,
    /// `[CLS] previous system [SEP] user` tokens.
    pub input: &'a [u32],
    pub turn_index: usize,
}

pub trait Agent {
    fn reset(&mut self);
    fn act(&mut self, ctx: &TurnContext<'_>) -> Result<SystemAction>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTurn {
    /// System action preceding this user turn (`None` on the first turn).
    pub system: Option<SystemAction>,
    pub system_tokens: Vec<u32>,
    pub user_tokens: Vec<u32>,
    pub acts: Vec<UserAct>,
    pub labels: TurnLabels,
    /// Index of the action the agent took in reply; `None` once the user
    /// has ended the dialogue.
    pub next_action: Option<usize>,
}

impl SimTurn {
    pub fn input(&self) -> Vec<u32> {
        tracker_input(&self.system_tokens, &self.user_tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: usize,
    pub goal: UserGoal,
    pub turns: Vec<SimTurn>,
    pub result: DialogueResult,
}

/// Runs dialogue `index` under master `seed` with `agent`. The user goal
/// and behaviour depend only on `(seed, index)`, so different agents face
/// identical users.
pub fn run_dialogue(
    world: &World,
    seed: u64,
    index: usize,
    config: SimConfig,
    agent: &mut dyn Agent,
) -> Result<Dialogue> {
    let actions = ActionSpace::new(&world.ontology);
    let goal = sample_user_goal(world, &mut stream(seed, &format!("goal/{index}")));
    let mut sim = Simulator::new(
        world,
        goal.clone(),
        config,
        stream(seed, &format!("user/{index}")),
    );
    agent.reset();
    let mut turns: Vec<SimTurn> = Vec::new();
    let mut system: Option<SystemAction> = None;
    let mut user = sim.start();
    loop {
        let system_tokens = render_system(system.as_ref(), world);
        let mut record = SimTurn {
            system: system.clone(),
            user_tokens: user.tokens.clone(),
            system_tokens,
            acts: user.acts.clone(),
            labels: user.labels.clone(),
            next_action: None,
        };
        if sim.is_terminated() {
            turns.push(record);
            break;
        }
        let input = record.input();
        let action = agent.act(&TurnContext {
            world,
            sim: &sim,
            turn: &user,
            input: &input,
            turn_index: turns.len(),
        })?;
        record.next_action = Some(actions.index(action.kind)?);
        turns.push(record);
        user = sim.respond(&action)?;
        system = Some(action);
    }
    Ok(Dialogue {
        id: index,
        goal: sim.goal.clone(),
        turns,
        result: sim.result(),
    })
}

/// Dialogues `0..n` between the simulated user and the scripted wizard.
pub fn generate_corpus(
    world: &World,
    seed: u64,
    n: usize,
    config: SimConfig,
) -> Result<Vec<Dialogue>> {
    let mut wizard = ScriptedWizard::new();
    (0..n)
        .map(|i| run_dialogue(world, seed, i, config, &mut wizard))
        .collect()
}

/// Train / validation / test split by dialogue.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<Dialogue>,
    pub valid: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

/// Generates the three splits from disjoint seed streams.
pub fn generate_splits(
    world: &World,
    seed: u64,
    sizes: (usize, usize, usize),
    config: SimConfig,
) -> Result<CorpusSplit> {
    let sub = |name: &str| crate::rng::derive_seed(seed, name);
    Ok(CorpusSplit {
        train: generate_corpus(world, sub("corpus/train"), sizes.0, config)?,
        valid: generate_corpus(world, sub("corpus/valid"), sizes.1, config)?,
        test: generate_corpus(world, sub("corpus/test"), sizes.2, config)?,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorpusHeader {
    schema: String,
    fingerprint: String,
    dialogues: usize,
}

/// First line: header with schema and world fingerprint; then one dialogue
/// per line.
pub fn write_corpus(path: &Path, world: &World, dialogues: &[Dialogue]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = CorpusHeader {
        schema: CORPUS_SCHEMA.into(),
        fingerprint: world.fingerprint(),
        dialogues: dialogues.len(),
    };
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(io)?;
    for d in dialogues {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_corpus(path: &Path, world: &World) -> Result<Vec<Dialogue>> {
    let file = fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact {
                what: "corpus".into(),
                path: path.to_path_buf(),
            }
        } else {
            Error::io(path, e)
        }
    })?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{} is empty", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let header: CorpusHeader = serde_json::from_str(&first)?;
    if header.schema != CORPUS_SCHEMA {
        return Err(Error::Format(format!(
            "unsupported corpus schema `{}`",
            header.schema
        )));
    }
    let fp = world.fingerprint();
    if header.fingerprint != fp {
        return Err(Error::Fingerprint {
            expected: fp,
            found: header.fingerprint,
        });
    }
    let mut out = Vec::with_capacity(header.dialogues);
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    if out.len() != header.dialogues {
        return Err(Error::Format(format!(
            "corpus header announces {} dialogues, found {}",
            header.dialogues,
            out.len()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialoguesim::user::Surface;
    use crate::dialoguesim::world::{build_world, WorldConfig};

    fn world() -> World {
        build_world(&WorldConfig::default(), 11).unwrap()
    }

    #[test]
    fn scripted_wizard_succeeds() {
        let w = world();
        let corpus = generate_corpus(&w, 1, 500, SimConfig::default()).unwrap();
        let ok = corpus.iter().filter(|d| d.result.success).count();
        assert!(ok as f64 / 500.0 >= 0.99, "{ok}");
        for d in &corpus {
            assert!(d.result.turns <= 20);
            assert!(d.turns.last().unwrap().next_action.is_none());
        }
    }

    #[test]
    fn variant_rate_matches_noise() {
        let w = world();
        let corpus = generate_corpus(&w, 2, 600, SimConfig::default()).unwrap();
        let (mut informs, mut variants) = (0usize, 0usize);
        for a in corpus
            .iter()
            .flat_map(|d| d.turns.iter().flat_map(|t| t.acts.iter()))
        {
            if let UserAct::Inform { surface, .. } = a {
                informs += 1;
                if matches!(surface, Surface::Variant(_)) {
                    variants += 1;
                }
            }
        }
        let frac = variants as f64 / informs as f64;
        assert!((frac - 0.2).abs() <= 0.02, "{frac} over {informs}");
    }

    #[test]
    fn deterministic_and_round_trips() {
        let w = world();
        let a = generate_corpus(&w, 3, 20, SimConfig::default()).unwrap();
        let b = generate_corpus(&w, 3, 20, SimConfig::default()).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        write_corpus(&p, &w, &a).unwrap();
        assert_eq!(read_corpus(&p, &w).unwrap(), a);
        let other = build_world(&WorldConfig::default(), 12).unwrap();
        assert!(matches!(
            read_corpus(&p, &other),
            Err(Error::Fingerprint { .. })
        ));
        assert!(matches!(
            read_corpus(&dir.path().join("missing"), &w),
            Err(Error::MissingArtifact { .. })
        ));
    }

    #[test]
    fn goal_changes_happen_and_update_labels() {
        let w = world();
        let corpus = generate_corpus(&w, 4, 400, SimConfig::default()).unwrap();
        let changed: Vec<&Dialogue> = corpus
            .iter()
            .filter(|d| {
                let first = &d.turns[0].labels.goal;
                d.turns.iter().any(|t| {
                    t.labels
                        .goal
                        .iter()
                        .zip(first)
                        .any(|(a, b)| *b != 0 && a != b)
                })
            })
            .collect();
        let frac = changed.len() as f64 / 400.0;
        assert!(frac > 0.04 && frac < 0.16, "{frac}");
        for d in changed {
            assert!(d.result.success);
        }
    }
}
