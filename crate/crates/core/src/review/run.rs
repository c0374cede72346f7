use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::{
    build_review_prompt, parse_reply, CorrectionProposal, DeficiencyCause, ParseFailure, ProposalStatus, ProposalStore,
    QueueEntry, ReviewError, ReviewRequest, ReviewerClient, TransportError,
};
use crate::consensus::{Candidate, CandidateSet};
use crate::dataset::{Action, Dataset};

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub max_concurrent: usize,
    /// Extra attempts after the first; a candidate gets `max_retries + 1` calls.
    pub max_retries: u32,
    pub taxonomy: Vec<DeficiencyCause>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            max_concurrent: 4,
            max_retries: 2,
            taxonomy: DeficiencyCause::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize)]
pub struct ReviewOutcome {
    /// Ids of proposals created by this run, in candidate order.
    pub proposed: Vec<String>,
    pub parse_failures: Vec<ParseFailure>,
    /// Episodes that already had a proposal in the store.
    pub skipped: Vec<String>,
}

enum JobResult {
    Proposed(QueueEntry),
    ParseFailed(ParseFailure),
    Transport(TransportError),
}

struct Job<'a> {
    candidate: &'a Candidate,
    prompt: String,
    failures: BTreeMap<String, Option<Action>>,
}

fn retry_prompt(prompt: &str, error: &str) -> String {
    format!(
        "{prompt}\nYour previous reply was rejected: {error}\n\
         Reply again with only the JSON object in the required format.\n"
    )
}

fn review_one(job: &Job<'_>, dataset: &Dataset, client: &dyn ReviewerClient, opts: &RunOptions) -> JobResult {
    let c = job.candidate;
    let step = dataset
        .step(&c.episode_id, c.flagged_step)
        .expect("candidate steps are checked before dispatch");
    let mut prompt = job.prompt.clone();
    let mut last_error = String::new();
    let mut last_reply = None;
    let mut last_transport = None;
    for attempt in 0..=opts.max_retries {
        let req = ReviewRequest {
            episode_id: &c.episode_id,
            step_id: c.flagged_step,
            prompt: &prompt,
            attempt,
        };
        let text = match client.complete(&req) {
            Ok(t) => t,
            Err(e) => {
                tracing::warn!(episode = %c.episode_id, attempt, error = %e, "reviewer call failed");
                last_transport = Some(e);
                continue;
            }
        };
        last_transport = None;
        match parse_reply(&text, step, &opts.taxonomy) {
            Ok(reply) => {
                let proposal = CorrectionProposal {
                    proposal_id: CorrectionProposal::proposal_id_for(&c.episode_id, c.flagged_step),
                    episode_id: c.episode_id.clone(),
                    step_id: Some(c.flagged_step),
                    cause: reply.cause,
                    revised_instruction: reply.revised_instruction,
                    revised_gt: reply.revised_gt,
                    rationale: reply.rationale,
                    status: ProposalStatus::Pending,
                    decided_by: None,
                    decided_at: None,
                };
                return JobResult::Proposed(QueueEntry {
                    proposal,
                    failures: job.failures.clone(),
                });
            }
            Err(e) => {
                tracing::debug!(episode = %c.episode_id, attempt, error = %e, "unusable reply");
                prompt = retry_prompt(&job.prompt, &e);
                last_error = e;
                last_reply = Some(text);
            }
        }
    }
    match last_transport {
        Some(e) => JobResult::Transport(e),
        None => JobResult::ParseFailed(ParseFailure {
            episode_id: c.episode_id.clone(),
            step_id: c.flagged_step,
            attempts: opts.max_retries + 1,
            error: last_error,
            last_reply,
        }),
    }
}

/// Sends every unsettled candidate to the reviewer and persists the results.
///
/// Requests run on up to `max_concurrent` threads; results are written to
/// the store in candidate order regardless of completion order. Episodes
/// that already have a proposal are skipped, so the call can be repeated
/// after an interruption. Replies that still fail to parse after all retries
/// are recorded as parse failures. If a candidate exhausts its retries on
/// transport errors, the other results are still persisted and the first
/// such error is returned.
pub fn run_review(
    candidates: &CandidateSet,
    dataset: &Dataset,
    client: &dyn ReviewerClient,
    store: &mut ProposalStore,
    opts: &RunOptions,
) -> Result<ReviewOutcome, ReviewError> {
    if opts.max_concurrent == 0 {
        return Err(ReviewError::Config("max_concurrent must be at least 1".into()));
    }
    if opts.taxonomy.is_empty() {
        return Err(ReviewError::Config("taxonomy is empty".into()));
    }

    let mut outcome = ReviewOutcome::default();
    let mut jobs = Vec::new();
    for c in &candidates.candidates {
        if store.has_proposal_for(&c.episode_id) {
            outcome.skipped.push(c.episode_id.clone());
            continue;
        }
        let episode = dataset
            .get(&c.episode_id)
            .ok_or_else(|| ReviewError::UnknownEpisode(c.episode_id.clone()))?;
        let failures: BTreeMap<String, Option<Action>> = c
            .failures
            .iter()
            .map(|(agent, f)| (agent.clone(), f.flagged_action.clone()))
            .collect();
        let prompt = build_review_prompt(episode, c.flagged_step, &failures, &opts.taxonomy)?;
        jobs.push(Job {
            candidate: c,
            prompt,
            failures,
        });
    }

    let results: Vec<Mutex<Option<JobResult>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = opts.max_concurrent.min(jobs.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let r = review_one(job, dataset, client, opts);
                *results[i].lock().expect("result slot poisoned") = Some(r);
            });
        }
    });

    let mut first_transport = None;
    for (job, slot) in jobs.iter().zip(results) {
        match slot.into_inner().expect("result slot poisoned").expect("every job ran") {
            JobResult::Proposed(entry) => {
                outcome.proposed.push(entry.proposal.proposal_id.clone());
                store.add(entry)?;
            }
            JobResult::ParseFailed(pf) => {
                tracing::warn!(episode = %pf.episode_id, error = %pf.error, "reply never parsed; queued for triage");
                store.record_parse_failure(pf.clone())?;
                outcome.parse_failures.push(pf);
            }
            JobResult::Transport(e) => {
                if first_transport.is_none() {
                    first_transport = Some(ReviewError::Transport {
                        episode_id: job.candidate.episode_id.clone(),
                        source: e,
                    });
                }
            }
        }
    }
    match first_transport {
        Some(e) => Err(e),
        None => Ok(outcome),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::AgentFailure;
    use crate::dataset::{BBox, Episode, Point, Split, Step, UiElement};
    use crate::review::CannedClient;

    fn dataset(ids: &[&str]) -> Dataset {
        Dataset::new(
            ids.iter()
                .map(|id| Episode {
                    episode_id: (*id).into(),
                    goal: "open settings".into(),
                    split: Split::Easy,
                    steps: vec![Step {
                        step_id: 0,
                        screenshot_path: format!("{id}/0.png"),
                        screen_w: 100,
                        screen_h: 100,
                        elements: vec![UiElement {
                            element_id: "gear".into(),
                            bbox: BBox::new(10.0, 10.0, 30.0, 30.0),
                            interactive: true,
                            text: None,
                            resource_id: None,
                        }],
                        gt_actions: vec![Action::Click(Point::new(20.0, 20.0))],
                    }],
                    provenance: None,
                })
                .collect(),
        )
        .unwrap()
    }

    fn candidates(ids: &[&str]) -> CandidateSet {
        CandidateSet {
            candidates: ids
                .iter()
                .map(|id| Candidate {
                    episode_id: (*id).into(),
                    flagged_step: 0,
                    failures: BTreeMap::from([(
                        "A".to_string(),
                        AgentFailure {
                            first_failing_step: 0,
                            flagged_action: Some(Action::NavigateBack),
                        },
                    )]),
                })
                .collect(),
            missing_traces: vec![],
        }
    }

    const WRONG_GT: &str = r#"{"cause":"WrongGroundTruth","revised_instruction":null,"revised_gt":[{"kind":"click","point":{"x":50,"y":50}}],"rationale":"label hits the wrong icon"}"#;
    const TYPO: &str = r#"{"cause":"Typo","revised_instruction":"x","revised_gt":null,"rationale":"r"}"#;
    const NO_DEF: &str =
        r#"{"cause":"NotADataDeficiency","revised_instruction":null,"revised_gt":null,"rationale":"agents misread"}"#;

    #[test]
    fn proposals_parse_failures_and_idempotence() {
        let ds = dataset(&["e1", "e2", "e3"]);
        let client = CannedClient::new()
            .with_replies("e1", vec![WRONG_GT.into()])
            .with_replies("e2", vec![TYPO.into()])
            .with_replies("e3", vec![TYPO.into(), NO_DEF.into()]);
        let dir = tempfile::tempdir().unwrap();
        let mut store = ProposalStore::open(dir.path()).unwrap();
        let cands = candidates(&["e1", "e2", "e3"]);
        let out = run_review(&cands, &ds, &client, &mut store, &RunOptions::default()).unwrap();
        assert_eq!(out.proposed, vec!["p-e1-0", "p-e3-0"]);
        assert_eq!(out.parse_failures.len(), 1);
        assert_eq!(out.parse_failures[0].attempts, 3);
        let e1 = &store.get("p-e1-0").unwrap().proposal;
        assert_eq!(
            (e1.cause, e1.status),
            (DeficiencyCause::WrongGroundTruth, ProposalStatus::Pending)
        );
        let e3 = &store.get("p-e3-0").unwrap().proposal;
        assert!(e3.revised_gt.is_none() && e3.revised_instruction.is_none());

        let again = run_review(&cands, &ds, &client, &mut store, &RunOptions::default()).unwrap();
        assert_eq!(again.skipped, vec!["e1", "e3"]);
        assert!(again.proposed.is_empty());
        assert_eq!(store.entries().len(), 2);
    }

    struct Flaky;
    impl ReviewerClient for Flaky {
        fn complete(&self, req: &ReviewRequest<'_>) -> Result<String, TransportError> {
            if req.episode_id == "e2" {
                Err(TransportError("connection refused".into()))
            } else {
                Ok(WRONG_GT.into())
            }
        }
    }

    #[test]
    fn transport_failure_keeps_other_results() {
        let ds = dataset(&["e1", "e2", "e3"]);
        let dir = tempfile::tempdir().unwrap();
        let mut store = ProposalStore::open(dir.path()).unwrap();
        let opts = RunOptions {
            max_concurrent: 2,
            ..RunOptions::default()
        };
        let err = run_review(&candidates(&["e1", "e2", "e3"]), &ds, &Flaky, &mut store, &opts).unwrap_err();
        assert!(matches!(err, ReviewError::Transport { ref episode_id, .. } if episode_id == "e2"));
        assert_eq!(store.entries().len(), 2);
    }

    #[test]
    fn retry_prompt_carries_feedback() {
        struct Recorder(Mutex<Vec<String>>);
        impl ReviewerClient for Recorder {
            fn complete(&self, req: &ReviewRequest<'_>) -> Result<String, TransportError> {
                self.0.lock().unwrap().push(req.prompt.to_owned());
                Ok(TYPO.into())
            }
        }
        let rec = Recorder(Mutex::new(vec![]));
        let dir = tempfile::tempdir().unwrap();
        let mut store = ProposalStore::open(dir.path()).unwrap();
        run_review(
            &candidates(&["e1"]),
            &dataset(&["e1"]),
            &rec,
            &mut store,
            &RunOptions::default(),
        )
        .unwrap();
        let prompts = rec.0.into_inner().unwrap();
        assert_eq!(prompts.len(), 3);
        assert!(!prompts[0].contains("rejected"));
        assert!(prompts[1].contains("Typo"));
    }
}
