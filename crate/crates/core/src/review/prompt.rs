use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{DeficiencyCause, ReviewError};
use crate::dataset::{Action, Episode};

fn action_json(a: &Action) -> String {
    serde_json::to_string(a).expect("actions always serialize")
}

/// Renders the reviewer prompt for one flagged step.
///
/// The output depends only on its arguments, so the same candidate always
/// yields byte-identical text.
pub fn build_review_prompt(
    episode: &Episode,
    step_id: u32,
    failures: &BTreeMap<String, Option<Action>>,
    taxonomy: &[DeficiencyCause],
) -> Result<String, ReviewError> {
    if failures.is_empty() {
        return Err(ReviewError::NoFailures(episode.episode_id.clone()));
    }
    let step = episode.step(step_id).ok_or_else(|| ReviewError::UnknownStep {
        episode_id: episode.episode_id.clone(),
        step_id,
    })?;

    let mut p = String::new();
    p.push_str(
        "You are auditing one step of a GUI-agent benchmark. Several strong agents all failed this \
         task, which suggests the task or its label may be flawed. Decide why they failed.\n\n",
    );
    let _ = writeln!(p, "Goal: {}", episode.goal);
    let _ = writeln!(p, "Episode: {} (split: {})", episode.episode_id, episode.split);
    let _ = writeln!(
        p,
        "Step: {} ({} of {}), screen {}x{} px, screenshot {}",
        step.step_id,
        episode.steps.iter().position(|s| s.step_id == step_id).unwrap_or(0) + 1,
        episode.steps.len(),
        step.screen_w,
        step.screen_h,
        step.screenshot_path
    );

    let history: Vec<_> = episode.steps.iter().take_while(|s| s.step_id < step_id).collect();
    if !history.is_empty() {
        p.push_str("\nPrevious steps (labeled actions):\n");
        for s in history {
            let _ = writeln!(p, "- step {}: {}", s.step_id, action_json(s.canonical_action()));
        }
    }

    p.push_str("\nUI elements (id | bbox [x1, y1, x2, y2] | interactive | text):\n");
    for el in &step.elements {
        let b = el.bbox;
        let _ = writeln!(
            p,
            "- {} | [{}, {}, {}, {}] | {} | {}",
            el.element_id,
            b.x1,
            b.y1,
            b.x2,
            b.y2,
            if el.interactive { "yes" } else { "no" },
            el.text.as_deref().map_or_else(|| "-".to_owned(), |t| format!("{t:?}"))
        );
    }

    let _ = writeln!(p, "\nLabeled action: {}", action_json(step.canonical_action()));
    for alt in &step.gt_actions[1..] {
        let _ = writeln!(p, "Also accepted: {}", action_json(alt));
    }

    p.push_str("\nFailing agent predictions at this step:\n");
    for (agent, action) in failures {
        match action {
            Some(a) => {
                let _ = writeln!(p, "- {agent}: {}", action_json(a));
            }
            None => {
                let _ = writeln!(p, "- {agent}: (no prediction)");
            }
        }
    }

    p.push_str("\nChoose exactly one cause from this taxonomy:\n");
    for cause in taxonomy {
        let _ = writeln!(p, "- {}: {}", cause.as_str(), cause.describe());
    }

    p.push_str(
        "\nReply with a single JSON object and nothing else, with exactly these fields:\n\
         {\"cause\": <one of the causes above>, \"revised_instruction\": <string or null>, \
         \"revised_gt\": <list of actions or null>, \"rationale\": <string>}\n\
         Actions use the form {\"kind\": K, ...} where K is one of click, long_press, type, scroll, \
         swipe, open_app, navigate_back, navigate_home, wait, complete. click and long_press take \
         \"point\": {\"x\": X, \"y\": Y} in screen pixels; type and open_app take \"text\"; scroll \
         and swipe take \"direction\" (up, down, left, right). Other kinds take no parameters.\n",
    );
    Ok(p)
}
