use serde::Deserialize;

use super::{CorrectionProposal, DeficiencyCause};
use crate::dataset::{Action, ActionRecord, Step};

/// A parsed and validated reviewer reply.
#[derive(Debug, Clone, PartialEq)]
pub struct ReviewerReply {
    pub cause: DeficiencyCause,
    pub revised_instruction: Option<String>,
    pub revised_gt: Option<Vec<Action>>,
    pub rationale: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReplyRecord {
    cause: String,
    #[serde(default)]
    revised_instruction: Option<String>,
    #[serde(default)]
    revised_gt: Option<Vec<ActionRecord>>,
    rationale: String,
}

/// Strips a single surrounding Markdown code fence, if present.
fn unfence(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let rest = rest.strip_prefix("json").unwrap_or(rest);
    rest.strip_suffix("```").unwrap_or(rest).trim()
}

/// Parses a reviewer reply for `step`.
///
/// The reply must be one JSON object with exactly the fields `cause`,
/// `revised_instruction`, `revised_gt` and `rationale`. The cause must be in
/// `taxonomy`, every revised action must be well formed and lie on screen,
/// and revisions must agree with the cause.
pub fn parse_reply(text: &str, step: &Step, taxonomy: &[DeficiencyCause]) -> Result<ReviewerReply, String> {
    let rec: ReplyRecord = serde_json::from_str(unfence(text)).map_err(|e| format!("malformed reply: {e}"))?;
    let cause: DeficiencyCause = rec.cause.parse()?;
    if !taxonomy.contains(&cause) {
        return Err(format!("cause `{cause}` is not offered in this review"));
    }
    let revised_instruction = rec
        .revised_instruction
        .map(|s| s.trim().to_owned())
        .filter(|s| !s.is_empty());
    let revised_gt = match rec.revised_gt {
        None => None,
        Some(list) => {
            let mut actions = Vec::with_capacity(list.len());
            for (i, r) in list.into_iter().enumerate() {
                let a = Action::try_from(r).map_err(|e| format!("revised_gt[{i}]: {e}"))?;
                if let Some(p) = a.point() {
                    let on_screen = p.is_valid() && p.x <= f64::from(step.screen_w) && p.y <= f64::from(step.screen_h);
                    if !on_screen {
                        return Err(format!("revised_gt[{i}]: point ({}, {}) is off screen", p.x, p.y));
                    }
                }
                actions.push(a);
            }
            Some(actions)
        }
    };
    CorrectionProposal::check_revisions(cause, revised_instruction.as_deref(), revised_gt.as_deref())?;
    if rec.rationale.trim().is_empty() {
        return Err("rationale is empty".into());
    }
    Ok(ReviewerReply {
        cause,
        revised_instruction,
        revised_gt,
        rationale: rec.rationale,
    })
}
