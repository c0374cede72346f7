//! Applying verified corrections, deficiency statistics, and before/after
//! comparison reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{AgentTrace, Dataset, DatasetError, Provenance, Split};
use crate::grounding::{EvalConfig, Evaluator};
use crate::metrics::{evaluate, AgentMetrics, MetricsError, MetricsReport};
use crate::review::{CorrectionProposal, DeficiencyCause};

#[derive(Debug, thiserror::Error)]
pub enum CurationError {
    #[error("proposal `{0}` has not been decided by a reviewer")]
    UnverifiedProposal(String),
    #[error("proposal `{proposal_id}` ({cause}) lacks {field}")]
    RevisionMissing {
        proposal_id: String,
        cause: DeficiencyCause,
        field: &'static str,
    },
    #[error("proposal `{proposal_id}` targets {target}, which does not exist")]
    UnknownTarget { proposal_id: String, target: String },
    #[error("corrected dataset is invalid: {0}")]
    Invalid(#[from] DatasetError),
}

fn missing(p: &CorrectionProposal, field: &'static str) -> CurationError {
    CurationError::RevisionMissing {
        proposal_id: p.proposal_id.clone(),
        cause: p.cause,
        field,
    }
}

/// Produces the curated dataset from `dataset` and decided proposals.
///
/// Only accepted or edited proposals change anything:
///
/// - `UnclearTask` replaces the episode goal with the revised instruction;
/// - `WrongGroundTruth` replaces the step's accepted actions with `revised_gt`;
/// - `MultipleValidActions` appends the `revised_gt` entries not already accepted.
///
/// Proposals are applied in the given order. Every changed episode records
/// the proposal ids in its provenance. Applying the same proposals twice
/// gives the same dataset as applying them once.
pub fn apply_corrections(dataset: &Dataset, proposals: &[CorrectionProposal]) -> Result<Dataset, CurationError> {
    let mut episodes = dataset.episodes().to_vec();
    let index: BTreeMap<&str, usize> = dataset
        .episodes()
        .iter()
        .enumerate()
        .map(|(i, e)| (e.episode_id.as_str(), i))
        .collect();

    for p in proposals {
        if !p.status.is_terminal() {
            return Err(CurationError::UnverifiedProposal(p.proposal_id.clone()));
        }
        let &idx = index
            .get(p.episode_id.as_str())
            .ok_or_else(|| CurationError::UnknownTarget {
                proposal_id: p.proposal_id.clone(),
                target: format!("episode `{}`", p.episode_id),
            })?;
        if !p.status.is_approved() || !p.cause.is_deficiency() {
            continue;
        }
        let ep = &mut episodes[idx];
        let unknown_step = || CurationError::UnknownTarget {
            proposal_id: p.proposal_id.clone(),
            target: match p.step_id {
                Some(s) => format!("step {s} of `{}`", p.episode_id),
                None => format!("an unspecified step of `{}`", p.episode_id),
            },
        };
        match p.cause {
            DeficiencyCause::UnclearTask => {
                let goal = p
                    .revised_instruction
                    .as_ref()
                    .ok_or_else(|| missing(p, "revised_instruction"))?;
                ep.goal = goal.clone();
            }
            DeficiencyCause::WrongGroundTruth => {
                let gt = p.revised_gt.as_ref().ok_or_else(|| missing(p, "revised_gt"))?;
                let step = p.step_id.and_then(|s| ep.step_mut(s)).ok_or_else(unknown_step)?;
                step.gt_actions = gt.clone();
            }
            DeficiencyCause::MultipleValidActions => {
                let extra = p.revised_gt.as_ref().ok_or_else(|| missing(p, "revised_gt"))?;
                let step = p.step_id.and_then(|s| ep.step_mut(s)).ok_or_else(unknown_step)?;
                for a in extra {
                    if !step.gt_actions.contains(a) {
                        step.gt_actions.push(a.clone());
                    }
                }
            }
            DeficiencyCause::NotADataDeficiency => unreachable!("filtered above"),
        }
        let prov = ep.provenance.get_or_insert_with(|| Provenance {
            source_episode_id: ep.episode_id.clone(),
            proposal_ids: Vec::new(),
        });
        if !prov.proposal_ids.contains(&p.proposal_id) {
            prov.proposal_ids.push(p.proposal_id.clone());
        }
    }
    Ok(Dataset::new(episodes)?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CauseStat {
    pub count: usize,
    /// `count` over the dataset size.
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeficiencyStats {
    pub dataset_size: usize,
    pub accepted_only: bool,
    pub by_cause: BTreeMap<DeficiencyCause, CauseStat>,
}

impl DeficiencyStats {
    /// Share of the dataset with an actual deficiency.
    pub fn deficient_fraction(&self) -> f64 {
        self.by_cause
            .iter()
            .filter(|(c, _)| c.is_deficiency())
            .map(|(_, s)| s.fraction)
            .sum()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<22} {:>8} {:>9}", "Cause", "Count", "Share (%)");
        for (cause, s) in &self.by_cause {
            let _ = writeln!(out, "{:<22} {:>8} {:>9.2}", cause.as_str(), s.count, s.fraction * 100.0);
        }
        let _ = writeln!(
            out,
            "{} episodes; {} proposals counted",
            self.dataset_size,
            if self.accepted_only { "approved" } else { "all" }
        );
        out
    }
}

/// Counts proposals per cause. With `accepted_only`, only accepted or edited
/// proposals count. Every cause appears in the result, with zeros if absent.
pub fn deficiency_stats(proposals: &[CorrectionProposal], dataset_size: usize, accepted_only: bool) -> DeficiencyStats {
    let mut by_cause: BTreeMap<DeficiencyCause, CauseStat> = DeficiencyCause::ALL
        .iter()
        .map(|&c| (c, CauseStat::default()))
        .collect();
    for p in proposals {
        if accepted_only && !p.status.is_approved() {
            continue;
        }
        by_cause.get_mut(&p.cause).expect("all causes present").count += 1;
    }
    for s in by_cause.values_mut() {
        s.fraction = if dataset_size == 0 {
            0.0
        } else {
            s.count as f64 / dataset_size as f64
        };
    }
    DeficiencyStats {
        dataset_size,
        accepted_only,
        by_cause,
    }
}

fn pick(m: &AgentMetrics, split: Option<Split>) -> MetricsReport {
    match split {
        None => m.overall.clone(),
        Some(s) => m
            .by_split
            .get(&s)
            .cloned()
            .unwrap_or_else(|| crate::metrics::Tally::default().report(Some(s), crate::metrics::Averaging::Micro)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffRow {
    pub agent_id: String,
    pub before: MetricsReport,
    pub after: MetricsReport,
}

impl DiffRow {
    pub fn sr_delta(&self) -> f64 {
        self.after.sr - self.before.sr
    }
    pub fn type_delta(&self) -> f64 {
        self.after.type_acc - self.before.type_acc
    }
    pub fn grounding_delta(&self) -> f64 {
        self.after.grounding_acc - self.before.grounding_acc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub split: Option<Split>,
    pub rows: Vec<DiffRow>,
}

fn pct(v: f64) -> String {
    format!("{:.1}", v * 100.0)
}

fn signed_pct(v: f64) -> String {
    format!("{:+.1}", v * 100.0)
}

impl DiffReport {
    pub fn render(&self) -> String {
        let w = self.rows.iter().map(|r| r.agent_id.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<w$} | {:>6} {:>9} {:>6} | {:>6} {:>9} {:>6} {:>8} | {:>6} {:>9}",
            "Agent", "Type", "Grounding", "SR", "Type", "Grounding", "SR", "SR Impr.", "dType", "dGround."
        );
        let _ = writeln!(
            out,
            "{:<w$} | {:^23} | {:^32} | {:^16}",
            "", "before", "after", "deltas"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<w$} | {:>6} {:>9} {:>6} | {:>6} {:>9} {:>6} {:>8} | {:>6} {:>9}",
                r.agent_id,
                pct(r.before.type_acc),
                pct(r.before.grounding_acc),
                pct(r.before.sr),
                pct(r.after.type_acc),
                pct(r.after.grounding_acc),
                pct(r.after.sr),
                signed_pct(r.sr_delta()),
                signed_pct(r.type_delta()),
                signed_pct(r.grounding_delta()),
            );
        }
        out
    }
}

/// Per-agent metrics on `before` and `after` under the same evaluator.
/// Both datasets must share episode and step ids so the traces apply to each.
pub fn diff_report(
    before: &Dataset,
    after: &Dataset,
    traces: &[AgentTrace],
    evaluator: Evaluator,
    cfg: &EvalConfig,
    split: Option<Split>,
) -> Result<DiffReport, MetricsError> {
    let b = evaluate(before, traces, evaluator, cfg)?;
    let a = evaluate(after, traces, evaluator, cfg)?;
    let rows = b
        .iter()
        .map(|(agent, mb)| DiffRow {
            agent_id: agent.clone(),
            before: pick(mb, split),
            after: pick(&a[agent], split),
        })
        .collect();
    Ok(DiffReport { split, rows })
}

/// The three benchmark profiles compared in the ladder report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Original labels, point matching.
    Original,
    /// Original labels, bounding-box matching.
    CuratedBox,
    /// Corrected labels, bounding-box matching.
    Curated,
}

impl Profile {
    pub const ALL: [Profile; 3] = [Profile::Original, Profile::CuratedBox, Profile::Curated];

    pub fn evaluator(self) -> Evaluator {
        match self {
            Profile::Original => Evaluator::Point,
            Profile::CuratedBox | Profile::Curated => Evaluator::Bbox,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Original => "original",
            Profile::CuratedBox => "curated-box",
            Profile::Curated => "curated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub agent_id: String,
    pub original: MetricsReport,
    pub curated_box: MetricsReport,
    pub curated: MetricsReport,
}

impl LadderRow {
    /// SR gain from switching to bounding-box matching.
    pub fn sr_impr_g(&self) -> f64 {
        self.curated_box.sr - self.original.sr
    }

    /// SR gain from the label corrections.
    pub fn sr_impr_t(&self) -> f64 {
        self.curated.sr - self.curated_box.sr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderReport {
    pub split: Option<Split>,
    pub rows: Vec<LadderRow>,
}

impl LadderReport {
    pub fn render(&self) -> String {
        let w = self.rows.iter().map(|r| r.agent_id.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<w$} | {:^23} | {:^36} | {:^36}",
            "",
            Profile::Original.as_str(),
            Profile::CuratedBox.as_str(),
            Profile::Curated.as_str()
        );
        let _ = writeln!(
            out,
            "{:<w$} | {:>6} {:>9} {:>6} | {:>6} {:>9} {:>6} {:>12} | {:>6} {:>9} {:>6} {:>12}",
            "Agent",
            "Type",
            "Grounding",
            "SR",
            "Type",
            "Grounding",
            "SR",
            "SR Impr. (G)",
            "Type",
            "Grounding",
            "SR",
            "SR Impr. (T)"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<w$} | {:>6} {:>9} {:>6} | {:>6} {:>9} {:>6} {:>12} | {:>6} {:>9} {:>6} {:>12}",
                r.agent_id,
                pct(r.original.type_acc),
                pct(r.original.grounding_acc),
                pct(r.original.sr),
                pct(r.curated_box.type_acc),
                pct(r.curated_box.grounding_acc),
                pct(r.curated_box.sr),
                signed_pct(r.sr_impr_g()),
                pct(r.curated.type_acc),
                pct(r.curated.grounding_acc),
                pct(r.curated.sr),
                signed_pct(r.sr_impr_t()),
            );
        }
        out
    }
}

/// Evaluates every agent on the original, curated-box and curated profiles.
pub fn ladder_report(
    original: &Dataset,
    curated: &Dataset,
    traces: &[AgentTrace],
    cfg: &EvalConfig,
    split: Option<Split>,
) -> Result<LadderReport, MetricsError> {
    let o = evaluate(original, traces, Profile::Original.evaluator(), cfg)?;
    let cb = evaluate(original, traces, Profile::CuratedBox.evaluator(), cfg)?;
    let c = evaluate(curated, traces, Profile::Curated.evaluator(), cfg)?;
    let rows = o
        .iter()
        .map(|(agent, mo)| LadderRow {
            agent_id: agent.clone(),
            original: pick(mo, split),
            curated_box: pick(&cb[agent], split),
            curated: pick(&c[agent], split),
        })
        .collect();
    Ok(LadderReport { split, rows })
}
