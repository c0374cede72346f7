//! Execution-consensus failure: episodes that every expert agent failed.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::dataset::{Action, AgentTrace, Dataset};
use crate::grounding::{EvalConfig, Evaluator};
use crate::metrics::{index_traces, judge_all, MetricsError};

#[derive(Debug, thiserror::Error)]
pub enum ConsensusError {
    #[error("the expert agent set is empty")]
    EmptyAgentSet,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("candidate file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentFailure {
    pub first_failing_step: u32,
    /// What the agent predicted at the candidate's flagged step.
    pub flagged_action: Option<Action>,
}

/// One episode every expert failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub episode_id: String,
    /// The step failed by the most agents (earliest on ties). When some step
    /// is failed by all agents this is the first such step.
    pub flagged_step: u32,
    pub failures: BTreeMap<String, AgentFailure>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    /// Sorted by episode id.
    pub candidates: Vec<Candidate>,
    /// Agents that had no trace for some episode (counted as failing it).
    #[serde(default)]
    pub missing_traces: Vec<(String, String)>,
}

impl CandidateSet {
    pub fn episode_ids(&self) -> Vec<&str> {
        self.candidates.iter().map(|c| c.episode_id.as_str()).collect()
    }

    pub fn contains(&self, episode_id: &str) -> bool {
        self.candidates
            .binary_search_by(|c| c.episode_id.as_str().cmp(episode_id))
            .is_ok()
    }

    /// episode → agent → first failing step.
    pub fn per_episode_failures(&self) -> BTreeMap<&str, BTreeMap<&str, u32>> {
        self.candidates
            .iter()
            .map(|c| {
                let per_agent = c
                    .failures
                    .iter()
                    .map(|(a, f)| (a.as_str(), f.first_failing_step))
                    .collect();
                (c.episode_id.as_str(), per_agent)
            })
            .collect()
    }

    /// One JSON object per candidate per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for c in &self.candidates {
            serde_json::to_writer(&mut out, c)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self, ConsensusError> {
        let mut candidates = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let c: Candidate = serde_json::from_str(&line).map_err(|e| ConsensusError::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?;
            candidates.push(c);
        }
        candidates.sort_by(|a, b| a.episode_id.cmp(&b.episode_id));
        Ok(CandidateSet {
            candidates,
            missing_traces: Vec::new(),
        })
    }
}

/// Keeps episode `T` iff no agent in `agents` succeeds on it.
pub fn filter_consensus(
    dataset: &Dataset,
    traces: &[AgentTrace],
    agents: &[String],
    evaluator: Evaluator,
    cfg: &EvalConfig,
) -> Result<CandidateSet, ConsensusError> {
    if agents.is_empty() {
        return Err(ConsensusError::EmptyAgentSet);
    }
    let mut agents = agents.to_vec();
    agents.sort();
    agents.dedup();

    let table = judge_all(dataset, traces, &agents, evaluator, cfg)?;
    let index = index_traces(dataset, traces)?;

    let mut out = CandidateSet::default();
    for (idx, ep) in dataset.episodes().iter().enumerate() {
        for a in &agents {
            if !index.contains_key(&(a.as_str(), ep.episode_id.as_str())) {
                tracing::warn!(agent = %a, episode = %ep.episode_id, "no trace; counted as failure");
                out.missing_traces.push((a.clone(), ep.episode_id.clone()));
            }
        }
        if agents.iter().any(|a| table[a][idx].success) {
            continue;
        }

        let mut fail_counts = vec![0usize; ep.steps.len()];
        for a in &agents {
            for (slot, v) in table[a][idx].verdicts.iter().enumerate() {
                fail_counts[slot] += usize::from(!v.step_correct);
            }
        }
        let max = *fail_counts.iter().max().unwrap_or(&0);
        let flagged_slot = fail_counts.iter().position(|&c| c == max).unwrap_or(0);
        let flagged_step = ep.steps[flagged_slot].step_id;

        let failures = agents
            .iter()
            .map(|a| {
                let first = table[a][idx].first_failure(ep).unwrap_or(flagged_step);
                let flagged_action = index
                    .get(&(a.as_str(), ep.episode_id.as_str()))
                    .and_then(|t| t.predictions.get(&flagged_step))
                    .cloned();
                (
                    a.clone(),
                    AgentFailure {
                        first_failing_step: first,
                        flagged_action,
                    },
                )
            })
            .collect();
        out.candidates.push(Candidate {
            episode_id: ep.episode_id.clone(),
            flagged_step,
            failures,
        });
    }
    out.candidates.sort_by(|a, b| a.episode_id.cmp(&b.episode_id));
    Ok(out)
}
