//! Sequence-learning store.
//!
//! The tree has exactly two children under its root. `ongoing` holds every
//! command sequence an operator has issued to an arm, in the order they were
//! opened, with per-command outcomes. `learning` holds patterns: quantized
//! command lists that were completed successfully at least `promote_k` times.
//! Promotion copies, so a pattern's source sequences stay in `ongoing`.
//!
//! While a sequence is open, every new command is matched against the arm's
//! patterns; when the sequence so far is a strict prefix of a pattern the
//! store emits a [`PatternPrompt`] offering the rest.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::arm_model::JointConfig;
use crate::protocol::{AckStatus, JointCommand, PatternPrompt};

#[derive(Debug, Clone, PartialEq)]
pub struct StoreConfig {
    /// Successful repetitions needed before a sequence becomes a pattern.
    pub promote_k: usize,
    /// Silence after which an operator's open sequence is closed.
    pub idle_gap_ms: u64,
    /// Shortest matched prefix that triggers a prompt.
    pub min_prompt_prefix: usize,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            promote_k: 3,
            idle_gap_ms: 10_000,
            min_prompt_prefix: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pending,
    Ok,
    Rejected,
    Fault,
}

impl From<AckStatus> for Outcome {
    fn from(s: AckStatus) -> Self {
        match s {
            AckStatus::Ok => Outcome::Ok,
            AckStatus::Rejected => Outcome::Rejected,
            AckStatus::Fault => Outcome::Fault,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloseReason {
    IdleGap,
    ExplicitEnd,
    SessionEnd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub command: JointCommand,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandSequence {
    pub sequence_id: String,
    pub arm_id: String,
    pub operator_id: String,
    pub started_at_ms: u64,
    /// Time the most recent command was observed; drives idle-gap closing.
    pub last_observed_ms: u64,
    pub closed_at_ms: Option<u64>,
    pub close_reason: Option<CloseReason>,
    pub commands: Vec<SequenceEntry>,
}

impl CommandSequence {
    pub fn is_closed(&self) -> bool {
        self.closed_at_ms.is_some()
    }

    /// Every command acknowledged `ok`.
    pub fn is_successful(&self) -> bool {
        !self.commands.is_empty() && self.commands.iter().all(|e| e.outcome == Outcome::Ok)
    }

    pub fn quantized(&self) -> Vec<QuantizedCommand> {
        self.commands
            .iter()
            .map(|e| QuantizedCommand::of(&e.command.target))
            .collect()
    }
}

/// Command body at servo-repeatability resolution: whole degrees and
/// half-millimetre gripper steps. Two commands are the same for learning
/// purposes iff their quantized forms are equal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantizedCommand {
    pub angles_deg: [i64; 5],
    pub gripper_half_mm: i64,
}

impl QuantizedCommand {
    pub fn of(q: &JointConfig) -> Self {
        Self {
            angles_deg: q.angles().map(|a| a.round() as i64),
            gripper_half_mm: (q.gripper_mm * 2.0).round() as i64,
        }
    }

    pub fn to_config(self) -> JointConfig {
        JointConfig::new(
            self.angles_deg.map(|a| a as f64),
            self.gripper_half_mm as f64 / 2.0,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedPattern {
    pub pattern_id: String,
    pub arm_id: String,
    pub canonical_commands: Vec<JointConfig>,
    pub use_count: u64,
    pub promoted_at_ms: u64,
    pub source_sequence_ids: Vec<String>,
}

impl LearnedPattern {
    fn key(&self) -> Vec<QuantizedCommand> {
        self.canonical_commands.iter().map(QuantizedCommand::of).collect()
    }
}

/// The two-node tree.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StoreTree {
    pub ongoing: Vec<CommandSequence>,
    pub learning: Vec<LearnedPattern>,
}

#[derive(Serialize)]
struct TreeDoc<'a> {
    root: RootDoc<'a>,
}

#[derive(Serialize)]
struct RootDoc<'a> {
    ongoing: &'a [CommandSequence],
    learning: &'a [LearnedPattern],
}

impl Serialize for StoreTree {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        TreeDoc {
            root: RootDoc {
                ongoing: &self.ongoing,
                learning: &self.learning,
            },
        }
        .serialize(s)
    }
}

impl StoreTree {
    /// Canonical single-line JSON document, `\n` terminated.
    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("store tree serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, RestoreError> {
        let doc: Value =
            serde_json::from_str(text).map_err(|e| RestoreError::Parse(e.to_string()))?;
        Self::from_value(&doc)
    }

    pub fn from_value(doc: &Value) -> Result<Self, RestoreError> {
        let bad = |record: &str, reason: &str| RestoreError::Record {
            record: record.to_string(),
            reason: reason.to_string(),
        };
        let top = doc.as_object().ok_or_else(|| bad("document", "not an object"))?;
        if top.len() != 1 {
            return Err(bad("document", "expected a single `root` key"));
        }
        let root = top
            .get("root")
            .and_then(Value::as_object)
            .ok_or_else(|| bad("root", "missing or not an object"))?;
        if let Some(extra) = root.keys().find(|k| *k != "ongoing" && *k != "learning") {
            return Err(bad("root", &format!("unexpected child `{extra}`")));
        }
        let list = |name: &str| {
            root.get(name)
                .and_then(Value::as_array)
                .ok_or_else(|| bad(&format!("root.{name}"), "missing or not an array"))
        };

        let mut tree = StoreTree::default();
        let mut seen = HashSet::new();
        for (i, v) in list("ongoing")?.iter().enumerate() {
            let record = format!("ongoing[{i}]");
            let seq: CommandSequence =
                serde_json::from_value(v.clone()).map_err(|e| bad(&record, &e.to_string()))?;
            if seq.commands.is_empty() {
                return Err(bad(&record, "sequence has no commands"));
            }
            if !seen.insert(seq.sequence_id.clone()) {
                return Err(bad(&record, "duplicate sequence_id"));
            }
            tree.ongoing.push(seq);
        }
        for (i, v) in list("learning")?.iter().enumerate() {
            let record = format!("learning[{i}]");
            let pattern: LearnedPattern =
                serde_json::from_value(v.clone()).map_err(|e| bad(&record, &e.to_string()))?;
            if pattern.canonical_commands.is_empty() {
                return Err(bad(&record, "pattern has no commands"));
            }
            tree.learning.push(pattern);
        }
        Ok(tree)
    }
}

#[derive(Debug, Error)]
pub enum RestoreError {
    #[error("cannot read snapshot: {0}")]
    Io(#[from] std::io::Error),
    #[error("snapshot is not valid JSON: {0}")]
    Parse(String),
    #[error("bad snapshot record {record}: {reason}")]
    Record { record: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PromptError {
    #[error("no active prompt for pattern {pattern_id} and operator {operator_id}")]
    Unknown {
        pattern_id: String,
        operator_id: String,
    },
}

#[derive(Debug, Clone)]
struct ActivePrompt {
    sequence: usize,
    remainder: Vec<JointConfig>,
}

type SessionKey = (String, String);

#[derive(Debug, Clone)]
pub struct PatternStore {
    config: StoreConfig,
    tree: StoreTree,
    /// (arm, operator) -> index of the open sequence in `tree.ongoing`.
    open: HashMap<SessionKey, usize>,
    /// command id -> (sequence index, entry index)
    by_command: HashMap<String, (usize, usize)>,
    pattern_keys: HashMap<(String, Vec<QuantizedCommand>), usize>,
    /// Patterns already offered (or dismissed) per open sequence.
    prompted: HashMap<usize, HashSet<String>>,
    /// (operator, pattern) -> live prompt
    prompts: HashMap<SessionKey, ActivePrompt>,
}

impl PatternStore {
    pub fn new(config: StoreConfig) -> Self {
        Self::from_tree(config, StoreTree::default())
    }

    pub fn from_tree(config: StoreConfig, tree: StoreTree) -> Self {
        let mut store = Self {
            config,
            tree: StoreTree::default(),
            open: HashMap::new(),
            by_command: HashMap::new(),
            pattern_keys: HashMap::new(),
            prompted: HashMap::new(),
            prompts: HashMap::new(),
        };
        for seq in tree.ongoing {
            let idx = store.tree.ongoing.len();
            for (j, e) in seq.commands.iter().enumerate() {
                store.by_command.insert(e.command.id.clone(), (idx, j));
            }
            if !seq.is_closed() {
                store
                    .open
                    .insert((seq.arm_id.clone(), seq.operator_id.clone()), idx);
            }
            store.tree.ongoing.push(seq);
        }
        for pattern in tree.learning {
            store.insert_pattern(pattern);
        }
        store
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn tree(&self) -> &StoreTree {
        &self.tree
    }

    pub fn snapshot_string(&self) -> String {
        self.tree.to_canonical_json()
    }

    /// Writes the canonical snapshot atomically (temp file + rename).
    pub fn snapshot(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.snapshot_string())?;
        std::fs::rename(tmp, path)
    }

    pub fn restore(path: impl AsRef<Path>, config: StoreConfig) -> Result<Self, RestoreError> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::from_tree(config, StoreTree::from_json(&text)?))
    }

    pub fn knows_command(&self, command_id: &str) -> bool {
        self.by_command.contains_key(command_id)
    }

    pub fn sequence_of(&self, command_id: &str) -> Option<&CommandSequence> {
        self.by_command
            .get(command_id)
            .map(|&(s, _)| &self.tree.ongoing[s])
    }

    pub fn open_sequence(&self, arm_id: &str, operator_id: &str) -> Option<&CommandSequence> {
        self.open
            .get(&(arm_id.to_string(), operator_id.to_string()))
            .map(|&i| &self.tree.ongoing[i])
    }

    /// Open sequences, as (arm, operator) pairs.
    pub fn open_sessions(&self) -> Vec<(String, String)> {
        let mut v: Vec<_> = self.open.keys().cloned().collect();
        v.sort();
        v
    }

    pub fn patterns_for<'a>(&'a self, arm_id: &'a str) -> impl Iterator<Item = &'a LearnedPattern> {
        self.tree.learning.iter().filter(move |p| p.arm_id == arm_id)
    }

    pub fn pattern(&self, pattern_id: &str) -> Option<&LearnedPattern> {
        self.tree.learning.iter().find(|p| p.pattern_id == pattern_id)
    }

    /// True when the operator's open sequence on this arm has been silent for
    /// longer than the idle gap.
    pub fn idle_expired(&self, arm_id: &str, operator_id: &str, now_ms: u64) -> bool {
        self.open_sequence(arm_id, operator_id)
            .map(|s| now_ms.saturating_sub(s.last_observed_ms) > self.config.idle_gap_ms)
            .unwrap_or(false)
    }

    /// Open sequences that have gone idle, as (arm, operator) pairs.
    pub fn idle_sessions(&self, now_ms: u64) -> Vec<(String, String)> {
        self.open_sessions()
            .into_iter()
            .filter(|(a, o)| self.idle_expired(a, o, now_ms))
            .collect()
    }

    /// Appends `cmd` to the operator's open sequence for its arm, first
    /// closing that sequence if it has been idle too long, and returns a
    /// reuse prompt when the sequence is now a strict prefix of a pattern.
    pub fn observe_command(&mut self, cmd: &JointCommand, now_ms: u64) -> Option<PatternPrompt> {
        if self.idle_expired(&cmd.arm_id, &cmd.operator_id, now_ms) {
            self.close_sequence(&cmd.arm_id, &cmd.operator_id, CloseReason::IdleGap, now_ms);
        }
        self.append(cmd, now_ms, true)
    }

    /// Appends without the idle check; the caller has already closed any
    /// expired sequence.
    pub(crate) fn append(
        &mut self,
        cmd: &JointCommand,
        now_ms: u64,
        offer_prompt: bool,
    ) -> Option<PatternPrompt> {
        let key = (cmd.arm_id.clone(), cmd.operator_id.clone());
        let idx = match self.open.get(&key) {
            Some(&idx) => idx,
            None => {
                let idx = self.tree.ongoing.len();
                self.tree.ongoing.push(CommandSequence {
                    sequence_id: format!("s{}", idx + 1),
                    arm_id: cmd.arm_id.clone(),
                    operator_id: cmd.operator_id.clone(),
                    started_at_ms: now_ms,
                    last_observed_ms: now_ms,
                    closed_at_ms: None,
                    close_reason: None,
                    commands: Vec::new(),
                });
                self.open.insert(key, idx);
                idx
            }
        };
        let seq = &mut self.tree.ongoing[idx];
        seq.last_observed_ms = seq.last_observed_ms.max(now_ms);
        seq.commands.push(SequenceEntry {
            command: cmd.clone(),
            outcome: Outcome::Pending,
        });
        self.by_command
            .insert(cmd.id.clone(), (idx, seq.commands.len() - 1));
        if offer_prompt {
            self.match_prefix(idx)
        } else {
            None
        }
    }

    fn match_prefix(&mut self, idx: usize) -> Option<PatternPrompt> {
        let seq = &self.tree.ongoing[idx];
        let n = seq.commands.len();
        if n < self.config.min_prompt_prefix.max(1)
            || !self
                .tree
                .learning
                .iter()
                .any(|p| p.arm_id == seq.arm_id && p.canonical_commands.len() > n)
        {
            return None;
        }
        let prefix = seq.quantized();
        let offered = self.prompted.get(&idx);
        let best = self
            .tree
            .learning
            .iter()
            .enumerate()
            .filter(|(_, p)| p.arm_id == seq.arm_id && p.canonical_commands.len() > n)
            .filter(|(_, p)| !offered.is_some_and(|o| o.contains(&p.pattern_id)))
            .filter(|(_, p)| p.key()[..n] == prefix[..])
            // longest pattern wins; ties go to the earliest promotion
            .max_by(|(ia, a), (ib, b)| {
                a.canonical_commands
                    .len()
                    .cmp(&b.canonical_commands.len())
                    .then(b.promoted_at_ms.cmp(&a.promoted_at_ms))
                    .then(ib.cmp(ia))
            })
            .map(|(_, p)| p)?;

        let prompt = PatternPrompt {
            pattern_id: best.pattern_id.clone(),
            arm_id: seq.arm_id.clone(),
            operator_id: seq.operator_id.clone(),
            matched_prefix_len: n as u64,
            remainder: best.canonical_commands[n..].to_vec(),
        };
        self.prompted
            .entry(idx)
            .or_default()
            .insert(prompt.pattern_id.clone());
        self.prompts.insert(
            (prompt.operator_id.clone(), prompt.pattern_id.clone()),
            ActivePrompt {
                sequence: idx,
                remainder: prompt.remainder.clone(),
            },
        );
        Some(prompt)
    }

    /// Stores an outcome; a non-ok outcome is permanent. Returns patterns
    /// promoted as a consequence (acks may arrive after the sequence closed).
    pub fn record_outcome(
        &mut self,
        command_id: &str,
        outcome: Outcome,
        now_ms: u64,
    ) -> Vec<LearnedPattern> {
        match self.apply_outcome(command_id, outcome) {
            Some(arm) => self.try_promote(&arm, now_ms),
            None => Vec::new(),
        }
    }

    /// Returns the arm id when the outcome landed in a closed sequence.
    pub(crate) fn apply_outcome(&mut self, command_id: &str, outcome: Outcome) -> Option<String> {
        let &(s, e) = self.by_command.get(command_id)?;
        let seq = &mut self.tree.ongoing[s];
        let entry = &mut seq.commands[e];
        if matches!(entry.outcome, Outcome::Rejected | Outcome::Fault) {
            return None;
        }
        entry.outcome = outcome;
        seq.is_closed().then(|| seq.arm_id.clone())
    }

    /// Closes the operator's open sequence on this arm and runs promotion.
    pub fn close_sequence(
        &mut self,
        arm_id: &str,
        operator_id: &str,
        reason: CloseReason,
        now_ms: u64,
    ) -> Option<CommandSequence> {
        let idx = self.apply_close(arm_id, operator_id, reason, now_ms)?;
        self.try_promote(arm_id, now_ms);
        Some(self.tree.ongoing[idx].clone())
    }

    pub(crate) fn apply_close(
        &mut self,
        arm_id: &str,
        operator_id: &str,
        reason: CloseReason,
        now_ms: u64,
    ) -> Option<usize> {
        let idx = self
            .open
            .remove(&(arm_id.to_string(), operator_id.to_string()))?;
        let seq = &mut self.tree.ongoing[idx];
        seq.closed_at_ms = Some(now_ms.max(seq.last_observed_ms));
        seq.close_reason = Some(reason);
        self.prompted.remove(&idx);
        self.prompts.retain(|_, p| p.sequence != idx);
        Some(idx)
    }

    /// Patterns that would be promoted now, without inserting them.
    pub fn promotable(&self, arm_id: &str, now_ms: u64) -> Vec<LearnedPattern> {
        let mut classes: Vec<(Vec<QuantizedCommand>, Vec<usize>)> = Vec::new();
        let mut class_of: HashMap<Vec<QuantizedCommand>, usize> = HashMap::new();
        for (i, seq) in self.tree.ongoing.iter().enumerate() {
            if seq.arm_id != arm_id || !seq.is_closed() || !seq.is_successful() {
                continue;
            }
            let key = seq.quantized();
            let c = *class_of.entry(key.clone()).or_insert_with(|| {
                classes.push((key, Vec::new()));
                classes.len() - 1
            });
            classes[c].1.push(i);
        }
        let mut next_id = self.tree.learning.len() + 1;
        let mut out = Vec::new();
        for (key, members) in classes {
            if members.len() < self.config.promote_k
                || self.pattern_keys.contains_key(&(arm_id.to_string(), key.clone()))
            {
                continue;
            }
            out.push(LearnedPattern {
                pattern_id: format!("p{next_id}"),
                arm_id: arm_id.to_string(),
                canonical_commands: key.iter().map(|q| q.to_config()).collect(),
                use_count: members.len() as u64,
                promoted_at_ms: now_ms,
                source_sequence_ids: members
                    .iter()
                    .map(|&i| self.tree.ongoing[i].sequence_id.clone())
                    .collect(),
            });
            next_id += 1;
        }
        out
    }

    pub(crate) fn insert_pattern(&mut self, pattern: LearnedPattern) {
        let key = (pattern.arm_id.clone(), pattern.key());
        if self.pattern_keys.contains_key(&key) {
            return;
        }
        self.pattern_keys.insert(key, self.tree.learning.len());
        self.tree.learning.push(pattern);
    }

    /// Promotes every new class of closed, fully successful sequences on
    /// this arm that reached `promote_k` members.
    pub fn try_promote(&mut self, arm_id: &str, now_ms: u64) -> Vec<LearnedPattern> {
        let promoted = self.promotable(arm_id, now_ms);
        for p in &promoted {
            self.insert_pattern(p.clone());
        }
        promoted
    }

    /// Remainder of a live prompt, without consuming it.
    pub fn peek_prompt(
        &self,
        operator_id: &str,
        pattern_id: &str,
    ) -> Result<&[JointConfig], PromptError> {
        self.prompts
            .get(&(operator_id.to_string(), pattern_id.to_string()))
            .map(|p| p.remainder.as_slice())
            .ok_or_else(|| PromptError::Unknown {
                pattern_id: pattern_id.to_string(),
                operator_id: operator_id.to_string(),
            })
    }

    /// Resolves a prompt. Accepting returns the remainder to enqueue and
    /// counts one more use; rejecting returns nothing. Either way the pattern
    /// is not offered again within the same open sequence.
    pub fn accept_prompt(
        &mut self,
        operator_id: &str,
        pattern_id: &str,
        accepted: bool,
    ) -> Result<Vec<JointConfig>, PromptError> {
        let remainder = self.peek_prompt(operator_id, pattern_id)?.to_vec();
        self.forget_prompt(operator_id, pattern_id);
        if accepted {
            self.bump_use_count(pattern_id);
            Ok(remainder)
        } else {
            Ok(Vec::new())
        }
    }

    pub(crate) fn forget_prompt(&mut self, operator_id: &str, pattern_id: &str) {
        self.prompts
            .remove(&(operator_id.to_string(), pattern_id.to_string()));
    }

    pub(crate) fn bump_use_count(&mut self, pattern_id: &str) {
        if let Some(p) = self
            .tree
            .learning
            .iter_mut()
            .find(|p| p.pattern_id == pattern_id)
        {
            p.use_count += 1;
        }
    }
}

impl Default for PatternStore {
    fn default() -> Self {
        Self::new(StoreConfig::default())
    }
}
