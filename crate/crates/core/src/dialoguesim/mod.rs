//! Synthetic task-oriented dialogue world: ontology and database, a
//! rule-based simulated user, a scripted wizard and the corpus format.

pub mod actions;
pub mod corpus;
pub mod user;
pub mod wizard;
pub mod world;

pub use actions::ActionSpace;
pub use corpus::{
    generate_corpus, generate_splits, read_corpus, run_dialogue, write_corpus, Agent, CorpusSplit,
    Dialogue, SimTurn, TurnContext, CORPUS_SCHEMA,
};
pub use user::{
    dialogue_reward, render_system, render_utterance, sample_surface, sample_user_goal,
    score_dialogue, tracker_input, DialogueResult, DomainGoal, SimConfig, Simulator, Surface,
    SystemAction, SystemActionKind, TurnLabels, UserAct, UserGoal, UserTurn, GENERAL_BYE,
    GENERAL_NONE, GENERAL_THANK,
};
pub use wizard::ScriptedWizard;
pub use world::{
    build_world, Database, DomainSpec, Ontology, SlotRef, SlotSpec, ValueSpec, World, WorldConfig,
};
