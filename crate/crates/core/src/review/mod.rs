//! LLM-assisted review of consensus-failure candidates.
//!
//! The flow is: build a deterministic prompt for the flagged step of each
//! candidate ([`build_review_prompt`]), send it to a [`ReviewerClient`], parse
//! the strict JSON reply into a [`CorrectionProposal`], and persist it in a
//! [`ProposalStore`]. Human decisions are appended to the store's ledger; the
//! queue state is always the replay of that ledger.

mod client;
mod prompt;
mod reply;
mod run;
mod store;

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::dataset::Action;

pub use client::{
    CannedClient, HttpReviewerClient, ReviewRequest, ReviewerClient, ReviewerClientConfig, TransportError,
};
pub use prompt::build_review_prompt;
pub use reply::{parse_reply, ReviewerReply};
pub use run::{run_review, ReviewOutcome, RunOptions};
pub use store::{
    Decision, DecisionRecord, ParseFailure, Progress, ProposalEdit, ProposalStore, QueueEntry, StoreError, Verdict,
    LEDGER_FILE, QUEUE_FILE,
};

/// Why every expert failed a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DeficiencyCause {
    MultipleValidActions,
    UnclearTask,
    WrongGroundTruth,
    /// The task is valid; the agents genuinely failed it.
    NotADataDeficiency,
}

impl DeficiencyCause {
    pub const ALL: [DeficiencyCause; 4] = [
        DeficiencyCause::MultipleValidActions,
        DeficiencyCause::UnclearTask,
        DeficiencyCause::WrongGroundTruth,
        DeficiencyCause::NotADataDeficiency,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DeficiencyCause::MultipleValidActions => "MultipleValidActions",
            DeficiencyCause::UnclearTask => "UnclearTask",
            DeficiencyCause::WrongGroundTruth => "WrongGroundTruth",
            DeficiencyCause::NotADataDeficiency => "NotADataDeficiency",
        }
    }

    pub fn is_deficiency(self) -> bool {
        self != DeficiencyCause::NotADataDeficiency
    }

    pub(crate) fn describe(self) -> &'static str {
        match self {
            DeficiencyCause::MultipleValidActions => {
                "the labeled action is valid but other actions are equally valid; \
                 put the additional accepted actions in revised_gt"
            }
            DeficiencyCause::UnclearTask => {
                "the instruction is too ambiguous to determine the labeled action; \
                 put a clearer instruction in revised_instruction"
            }
            DeficiencyCause::WrongGroundTruth => {
                "the labeled action is factually wrong for this screen and goal; \
                 put the full replacement list of correct actions in revised_gt"
            }
            DeficiencyCause::NotADataDeficiency => {
                "the task and label are fine and the agents simply failed; \
                 leave revised_instruction and revised_gt null"
            }
        }
    }
}

impl fmt::Display for DeficiencyCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DeficiencyCause {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DeficiencyCause::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("`{s}` is not in the deficiency taxonomy"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProposalStatus {
    Pending,
    Accepted,
    Rejected,
    Edited,
}

impl ProposalStatus {
    pub fn is_terminal(self) -> bool {
        self != ProposalStatus::Pending
    }

    /// Accepted or edited: the correction should be applied.
    pub fn is_approved(self) -> bool {
        matches!(self, ProposalStatus::Accepted | ProposalStatus::Edited)
    }
}

/// A reviewer's analysis of one candidate step: cause, revised instruction,
/// revised ground truth, rationale, plus its human-review status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionProposal {
    pub proposal_id: String,
    pub episode_id: String,
    pub step_id: Option<u32>,
    pub cause: DeficiencyCause,
    pub revised_instruction: Option<String>,
    /// Full replacement (or, for multiple valid actions, additions) for the
    /// step's accepted actions.
    pub revised_gt: Option<Vec<Action>>,
    pub rationale: String,
    pub status: ProposalStatus,
    #[serde(default)]
    pub decided_by: Option<String>,
    #[serde(default)]
    pub decided_at: Option<DateTime<Utc>>,
}

impl CorrectionProposal {
    pub fn proposal_id_for(episode_id: &str, step_id: u32) -> String {
        format!("p-{episode_id}-{step_id}")
    }

    /// Revision presence must agree with the cause.
    pub fn check_revisions(
        cause: DeficiencyCause,
        revised_instruction: Option<&str>,
        revised_gt: Option<&[Action]>,
    ) -> Result<(), String> {
        if revised_gt.is_some_and(<[Action]>::is_empty) {
            return Err("revised_gt must not be an empty list".into());
        }
        let has_any = revised_instruction.is_some() || revised_gt.is_some();
        match (cause.is_deficiency(), has_any) {
            (true, false) => Err(format!("cause {cause} needs revised_instruction or revised_gt")),
            (false, true) => Err("NotADataDeficiency must not carry revisions".into()),
            _ => Ok(()),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        Self::check_revisions(
            self.cause,
            self.revised_instruction.as_deref(),
            self.revised_gt.as_deref(),
        )
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error("candidate `{0}` has no failure traces")]
    NoFailures(String),
    #[error("unknown episode `{0}`")]
    UnknownEpisode(String),
    #[error("episode `{episode_id}` has no step {step_id}")]
    UnknownStep { episode_id: String, step_id: u32 },
    #[error("reviewer transport failed for `{episode_id}`: {source}")]
    Transport {
        episode_id: String,
        #[source]
        source: TransportError,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("invalid reviewer configuration: {0}")]
    Config(String),
}
