//! Durable proposal queue with an append-only decision ledger.
//!
//! A store is a directory holding two line-delimited files:
//!
//! - `queue.jsonl`: proposals and parse failures, appended by the review run;
//! - `decisions.jsonl`: one record per human decision.
//!
//! Both are append-only and every append is synced before the call returns.
//! The in-memory state is never written anywhere else: opening a store
//! replays the two files, and [`ProposalStore::decide`] goes through the same
//! transition function as replay.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{CorrectionProposal, DeficiencyCause, ProposalStatus};
use crate::dataset::Action;

pub const QUEUE_FILE: &str = "queue.jsonl";
pub const LEDGER_FILE: &str = "decisions.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file} line {line}: {reason}")]
    Corrupt { file: String, line: usize, reason: String },
    #[error("unknown proposal `{0}`")]
    NotFound(String),
    #[error("proposal `{proposal_id}` was already decided by {decided_by}")]
    AlreadyDecided { proposal_id: String, decided_by: String },
    #[error("invalid decision: {0}")]
    InvalidDecision(String),
    #[error("proposal `{0}` already exists")]
    Duplicate(String),
}

/// A proposal plus the context the reviewer saw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub proposal: CorrectionProposal,
    /// Each expert's prediction at the flagged step.
    #[serde(default)]
    pub failures: BTreeMap<String, Option<Action>>,
}

/// A candidate whose replies never parsed; kept for manual triage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseFailure {
    pub episode_id: String,
    pub step_id: u32,
    pub attempts: u32,
    pub error: String,
    pub last_reply: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum QueueEvent {
    Proposed(QueueEntry),
    ParseFailed(ParseFailure),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Reject,
    Edit,
}

/// Replacement analysis supplied with an `edit` verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalEdit {
    pub cause: DeficiencyCause,
    #[serde(default)]
    pub revised_instruction: Option<String>,
    #[serde(default)]
    pub revised_gt: Option<Vec<Action>>,
    pub rationale: String,
}

/// A decision as submitted by a reviewer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Decision {
    pub verdict: Verdict,
    #[serde(default)]
    pub edited_proposal: Option<ProposalEdit>,
    pub reviewer_id: String,
}

/// One line of the decision ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub proposal_id: String,
    pub verdict: Verdict,
    pub reviewer_id: String,
    pub decided_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edited_proposal: Option<ProposalEdit>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub total: usize,
    pub pending: usize,
    pub decided: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub edited: usize,
    pub parse_failed: usize,
}

#[derive(Debug)]
pub struct ProposalStore {
    dir: PathBuf,
    entries: Vec<QueueEntry>,
    by_id: HashMap<String, usize>,
    parse_failures: Vec<ParseFailure>,
    decisions: Vec<DecisionRecord>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, StoreError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
            file: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

fn append_line<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let mut line = serde_json::to_vec(value).expect("store records always serialize");
    line.push(b'\n');
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    file.write_all(&line).map_err(io_err(path))?;
    file.sync_data().map_err(io_err(path))
}

fn check_edit(edit: &ProposalEdit) -> Result<(), StoreError> {
    CorrectionProposal::check_revisions(
        edit.cause,
        edit.revised_instruction.as_deref(),
        edit.revised_gt.as_deref(),
    )
    .map_err(StoreError::InvalidDecision)?;
    if edit.rationale.trim().is_empty() {
        return Err(StoreError::InvalidDecision("rationale is empty".into()));
    }
    for a in edit.revised_gt.iter().flatten() {
        if a.point().is_some_and(|p| !p.is_valid()) {
            return Err(StoreError::InvalidDecision(format!("invalid point in {a}")));
        }
    }
    Ok(())
}

impl ProposalStore {
    /// Opens (creating if needed) the store in `dir` and replays its files.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut store = ProposalStore {
            dir,
            entries: Vec::new(),
            by_id: HashMap::new(),
            parse_failures: Vec::new(),
            decisions: Vec::new(),
        };

        let queue_path = store.dir.join(QUEUE_FILE);
        for (line, event) in read_lines::<QueueEvent>(&queue_path)? {
            let res = match event {
                QueueEvent::Proposed(entry) => store.insert_entry(entry),
                QueueEvent::ParseFailed(pf) => {
                    store.parse_failures.push(pf);
                    Ok(())
                }
            };
            res.map_err(|e| StoreError::Corrupt {
                file: queue_path.display().to_string(),
                line,
                reason: e.to_string(),
            })?;
        }

        let ledger_path = store.dir.join(LEDGER_FILE);
        for (line, record) in read_lines::<DecisionRecord>(&ledger_path)? {
            store.apply_record(record).map_err(|e| StoreError::Corrupt {
                file: ledger_path.display().to_string(),
                line,
                reason: e.to_string(),
            })?;
        }
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn insert_entry(&mut self, entry: QueueEntry) -> Result<(), StoreError> {
        let id = entry.proposal.proposal_id.clone();
        if self.by_id.contains_key(&id) {
            return Err(StoreError::Duplicate(id));
        }
        if entry.proposal.status != ProposalStatus::Pending {
            return Err(StoreError::InvalidDecision(format!(
                "new proposal `{id}` must be pending"
            )));
        }
        entry.proposal.validate().map_err(StoreError::InvalidDecision)?;
        self.by_id.insert(id, self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    /// Appends a new pending proposal.
    pub fn add(&mut self, entry: QueueEntry) -> Result<(), StoreError> {
        if self.by_id.contains_key(&entry.proposal.proposal_id) {
            return Err(StoreError::Duplicate(entry.proposal.proposal_id));
        }
        entry.proposal.validate().map_err(StoreError::InvalidDecision)?;
        let event = QueueEvent::Proposed(entry);
        append_line(&self.dir.join(QUEUE_FILE), &event)?;
        let QueueEvent::Proposed(entry) = event else {
            unreachable!()
        };
        self.insert_entry(entry)
    }

    pub fn record_parse_failure(&mut self, failure: ParseFailure) -> Result<(), StoreError> {
        let event = QueueEvent::ParseFailed(failure);
        append_line(&self.dir.join(QUEUE_FILE), &event)?;
        let QueueEvent::ParseFailed(failure) = event else {
            unreachable!()
        };
        self.parse_failures.push(failure);
        Ok(())
    }

    /// Transition shared by replay and live decisions. Validates before mutating.
    fn apply_record(&mut self, record: DecisionRecord) -> Result<CorrectionProposal, StoreError> {
        let idx = *self
            .by_id
            .get(&record.proposal_id)
            .ok_or_else(|| StoreError::NotFound(record.proposal_id.clone()))?;
        let p = &self.entries[idx].proposal;
        if p.status.is_terminal() {
            return Err(StoreError::AlreadyDecided {
                proposal_id: record.proposal_id,
                decided_by: p.decided_by.clone().unwrap_or_default(),
            });
        }
        match (record.verdict, &record.edited_proposal) {
            (Verdict::Edit, None) => {
                return Err(StoreError::InvalidDecision(
                    "edit verdict requires edited_proposal".into(),
                ))
            }
            (Verdict::Edit, Some(edit)) => check_edit(edit)?,
            (_, Some(_)) => {
                return Err(StoreError::InvalidDecision(
                    "edited_proposal is only allowed with edit".into(),
                ))
            }
            (_, None) => {}
        }
        if record.reviewer_id.trim().is_empty() {
            return Err(StoreError::InvalidDecision("reviewer_id is empty".into()));
        }

        let p = &mut self.entries[idx].proposal;
        p.status = match record.verdict {
            Verdict::Accept => ProposalStatus::Accepted,
            Verdict::Reject => ProposalStatus::Rejected,
            Verdict::Edit => ProposalStatus::Edited,
        };
        p.decided_by = Some(record.reviewer_id.clone());
        p.decided_at = Some(record.decided_at);
        if let Some(edit) = &record.edited_proposal {
            p.cause = edit.cause;
            p.revised_instruction = edit.revised_instruction.clone();
            p.revised_gt = edit.revised_gt.clone();
            p.rationale = edit.rationale.clone();
        }
        let out = p.clone();
        self.decisions.push(record);
        Ok(out)
    }

    /// Records a decision at the current time.
    pub fn decide(&mut self, proposal_id: &str, decision: Decision) -> Result<CorrectionProposal, StoreError> {
        self.decide_at(proposal_id, decision, Utc::now())
    }

    /// Check-and-set on the proposal status; the ledger line is synced to disk
    /// before the in-memory state changes.
    pub fn decide_at(
        &mut self,
        proposal_id: &str,
        decision: Decision,
        at: DateTime<Utc>,
    ) -> Result<CorrectionProposal, StoreError> {
        let record = DecisionRecord {
            proposal_id: proposal_id.to_owned(),
            verdict: decision.verdict,
            reviewer_id: decision.reviewer_id,
            decided_at: at,
            edited_proposal: decision.edited_proposal,
        };
        // dry run on a copy of the proposal so nothing is persisted for invalid input
        {
            let mut probe = ProposalStore {
                dir: self.dir.clone(),
                entries: Vec::new(),
                by_id: HashMap::new(),
                parse_failures: Vec::new(),
                decisions: Vec::new(),
            };
            let idx = *self
                .by_id
                .get(proposal_id)
                .ok_or_else(|| StoreError::NotFound(proposal_id.to_owned()))?;
            probe.by_id.insert(proposal_id.to_owned(), 0);
            probe.entries.push(self.entries[idx].clone());
            probe.apply_record(record.clone())?;
        }
        append_line(&self.dir.join(LEDGER_FILE), &record)?;
        self.apply_record(record)
    }

    pub fn entries(&self) -> &[QueueEntry] {
        &self.entries
    }

    pub fn get(&self, proposal_id: &str) -> Option<&QueueEntry> {
        self.by_id.get(proposal_id).map(|&i| &self.entries[i])
    }

    pub fn proposals(&self) -> Vec<CorrectionProposal> {
        self.entries.iter().map(|e| e.proposal.clone()).collect()
    }

    pub fn decisions(&self) -> &[DecisionRecord] {
        &self.decisions
    }

    /// True once an episode has a proposal (parse failures do not count).
    pub fn has_proposal_for(&self, episode_id: &str) -> bool {
        self.entries.iter().any(|e| e.proposal.episode_id == episode_id)
    }

    /// Parse failures for episodes that still have no proposal, latest per episode.
    pub fn open_parse_failures(&self) -> Vec<&ParseFailure> {
        let mut latest: BTreeMap<&str, &ParseFailure> = BTreeMap::new();
        for pf in &self.parse_failures {
            if !self.has_proposal_for(&pf.episode_id) {
                latest.insert(&pf.episode_id, pf);
            }
        }
        latest.into_values().collect()
    }

    pub fn progress(&self) -> Progress {
        let mut p = Progress {
            total: self.entries.len(),
            parse_failed: self.open_parse_failures().len(),
            ..Progress::default()
        };
        for e in &self.entries {
            match e.proposal.status {
                ProposalStatus::Pending => p.pending += 1,
                ProposalStatus::Accepted => p.accepted += 1,
                ProposalStatus::Rejected => p.rejected += 1,
                ProposalStatus::Edited => p.edited += 1,
            }
        }
        p.decided = p.total - p.pending;
        p
    }
}
