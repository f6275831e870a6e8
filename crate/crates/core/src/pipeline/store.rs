use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{DistillMode, ExperimentConfig, TrackerChoice};
use crate::diffnet::write_atomic;
use crate::error::{Error, Result};
use crate::policy::StateSource;
use crate::tracker::BeliefMode;

/// A resolved configuration bound to its artifact directory.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: ExperimentConfig,
}

impl Run {
    /// Applies CLI overrides and validates.
    pub fn new(
        mut config: ExperimentConfig,
        seed: Option<u64>,
        out: Option<PathBuf>,
    ) -> Result<Self> {
        if let Some(s) = seed {
            config.seed = s;
        }
        if let Some(o) = out {
            config.out = o;
        }
        config.validate()?;
        Ok(Self { config })
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn dir(&self) -> &Path {
        &self.config.out
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.config.out.join(rel)
    }

    pub fn world_path(&self) -> PathBuf {
        self.path("world.json")
    }

    pub fn corpus_path(&self, split: &str) -> PathBuf {
        self.path(&format!("corpus/{split}.jsonl"))
    }

    pub fn member_path(&self, k: usize) -> PathBuf {
        self.path(&format!("ensemble/member-{k}.ckpt"))
    }

    pub fn distilled_path(&self, mode: DistillMode) -> PathBuf {
        self.path(&format!("distill/{}.ckpt", mode.as_str()))
    }

    fn policy_stem(tracker: TrackerChoice, mode: BeliefMode, source: StateSource) -> String {
        let src = match source {
            StateSource::Oracle => "oracle",
            StateSource::Predicted => "predicted",
        };
        format!("{tracker}-{mode}-{src}")
    }

    pub fn policy_path(
        &self,
        tracker: TrackerChoice,
        mode: BeliefMode,
        source: StateSource,
    ) -> PathBuf {
        self.path(&format!(
            "policy/{}.ckpt",
            Self::policy_stem(tracker, mode, source)
        ))
    }

    pub fn policy_eval_path(
        &self,
        tracker: TrackerChoice,
        mode: BeliefMode,
        source: StateSource,
    ) -> PathBuf {
        self.path(&format!(
            "policy/eval-{}.csv",
            Self::policy_stem(tracker, mode, source)
        ))
    }

    pub fn ppo_log_path(
        &self,
        tracker: TrackerChoice,
        mode: BeliefMode,
        source: StateSource,
    ) -> PathBuf {
        self.path(&format!(
            "policy/ppo-{}.csv",
            Self::policy_stem(tracker, mode, source)
        ))
    }

    pub fn timing_path(&self) -> PathBuf {
        self.path("timing.csv")
    }

    /// Writes `text` atomically under the run directory.
    pub fn write_text(&self, rel: &str, text: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        write_text(&p, text)?;
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<PathBuf> {
        self.write_text(rel, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    /// Records the resolved configuration next to the artifacts.
    pub fn write_config(&self) -> Result<()> {
        self.write_text("config.json", &self.config.to_json()?)?;
        Ok(())
    }

    /// Errors with the expected path unless `path` exists.
    pub fn require(&self, what: &str, path: &Path) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::MissingArtifact {
                what: what.into(),
                path: path.to_path_buf(),
            })
        }
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_atomic(path, text.as_bytes())
}

/// One per-turn latency measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub stage: String,
    pub mean_ms_per_turn: f64,
    pub turns: usize,
}

const TIMING_HEADER: &str = "stage,mean_ms_per_turn,turns";

/// Appends a row, creating the file with its header if needed.
pub fn append_timing(path: &Path, row: &TimingRow) -> Result<()> {
    if row.stage.contains(',') || row.stage.contains('\n') {
        return Err(Error::Format(format!(
            "stage name `{}` is not CSV-safe",
            row.stage
        )));
    }
    let mut text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => format!("{TIMING_HEADER}\n"),
        Err(e) => return Err(Error::io(path, e)),
    };
    // `{}` on f64 prints the shortest representation that parses back exactly
    let _ = writeln!(text, "{},{},{}", row.stage, row.mean_ms_per_turn, row.turns);
    write_text(path, &text)
}

pub fn read_timing(path: &Path) -> Result<Vec<TimingRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(TIMING_HEADER) {
        return Err(Error::Format(format!(
            "{} lacks the timing header",
            path.display()
        )));
    }
    lines
        .map(|l| {
            let bad = || Error::Format(format!("bad timing row `{l}`"));
            let mut it = l.split(',');
            let (Some(s), Some(ms), Some(n), None) = (it.next(), it.next(), it.next(), it.next())
            else {
                return Err(bad());
            };
            Ok(TimingRow {
                stage: s.to_string(),
                mean_ms_per_turn: ms.parse().map_err(|_| bad())?,
                turns: n.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
