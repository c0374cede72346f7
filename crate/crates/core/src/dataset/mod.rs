//! Domain types for benchmark episodes and agent traces.
//!
//! Coordinates are raw screen pixels with the origin at the top-left corner.
//! Everything in here is immutable once loaded; [`Dataset::new`] is the single
//! place where episode invariants are checked, so a `Dataset` value is always
//! valid.

mod action;
mod io;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub use action::{Action, ActionError, ActionKind, ActionRecord, Direction};
pub use io::{
    load_dataset, load_dataset_with, load_traces, load_traces_with, read_dataset, read_traces, write_dataset,
    write_traces, LoadOptions, TraceRecord,
};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("episode `{episode_id}`: {reason}")]
    Validation { episode_id: String, reason: String },
    #[error("duplicate episode id `{episode_id}`")]
    DuplicateId { episode_id: String },
    #[error("unknown episode `{episode_id}`")]
    UnknownEpisode { episode_id: String },
    #[error("episode `{episode_id}` has no step {step_id}")]
    UnknownStep { episode_id: String, step_id: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn distance_sq(self, other: Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn is_valid(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.x >= 0.0 && self.y >= 0.0
    }
}

/// Axis-aligned box `[x1, x2] × [y1, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// A zero-area box at `p`.
    pub fn at_point(p: Point) -> Self {
        Self::new(p.x, p.y, p.x, p.y)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point {
        Point::new((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Membership test; `inclusive` decides whether the border counts.
    pub fn contains(&self, p: Point, inclusive: bool) -> bool {
        if inclusive {
            self.x1 <= p.x && p.x <= self.x2 && self.y1 <= p.y && p.y <= self.y2
        } else {
            self.x1 < p.x && p.x < self.x2 && self.y1 < p.y && p.y < self.y2
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }

    fn within_screen(&self, w: u32, h: u32) -> bool {
        self.x2 <= f64::from(w) && self.y2 <= f64::from(h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UiElement {
    pub element_id: String,
    pub bbox: BBox,
    pub interactive: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resource_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Easy,
    Hard,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Easy => "easy",
            Split::Hard => "hard",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub step_id: u32,
    pub screenshot_path: String,
    pub screen_w: u32,
    pub screen_h: u32,
    pub elements: Vec<UiElement>,
    /// First entry is the canonical label, the rest are accepted alternatives.
    pub gt_actions: Vec<Action>,
}

impl Step {
    pub fn canonical_action(&self) -> &Action {
        &self.gt_actions[0]
    }

    fn validate(&self) -> Result<(), String> {
        let sid = self.step_id;
        let mut seen = HashSet::new();
        for el in &self.elements {
            if !seen.insert(el.element_id.as_str()) {
                return Err(format!("step {sid}: duplicate element id `{}`", el.element_id));
            }
            if !el.bbox.is_valid() {
                return Err(format!("step {sid}: element `{}` has a malformed bbox", el.element_id));
            }
            if !el.bbox.within_screen(self.screen_w, self.screen_h) {
                return Err(format!(
                    "step {sid}: element `{}` lies outside the {}x{} screen",
                    el.element_id, self.screen_w, self.screen_h
                ));
            }
        }
        if self.gt_actions.is_empty() {
            return Err(format!("step {sid}: gt_actions is empty"));
        }
        for action in &self.gt_actions {
            if let Some(p) = action.point() {
                if !p.is_valid() || p.x > f64::from(self.screen_w) || p.y > f64::from(self.screen_h) {
                    return Err(format!(
                        "step {sid}: ground-truth point ({}, {}) outside screen",
                        p.x, p.y
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Link from a curated episode back to its source and the corrections applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_episode_id: String,
    pub proposal_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub episode_id: String,
    pub goal: String,
    pub split: Split,
    pub steps: Vec<Step>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl Episode {
    pub fn step(&self, step_id: u32) -> Option<&Step> {
        self.steps
            .binary_search_by_key(&step_id, |s| s.step_id)
            .ok()
            .map(|i| &self.steps[i])
    }

    pub fn step_mut(&mut self, step_id: u32) -> Option<&mut Step> {
        self.steps
            .binary_search_by_key(&step_id, |s| s.step_id)
            .ok()
            .map(move |i| &mut self.steps[i])
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let fail = |reason: String| DatasetError::Validation {
            episode_id: self.episode_id.clone(),
            reason,
        };
        if self.steps.is_empty() {
            return Err(fail("episode has no steps".into()));
        }
        if self.steps[0].step_id != 0 {
            return Err(fail(format!("first step id is {}, expected 0", self.steps[0].step_id)));
        }
        for pair in self.steps.windows(2) {
            if pair[1].step_id <= pair[0].step_id {
                return Err(fail(format!(
                    "step ids not strictly increasing ({} then {})",
                    pair[0].step_id, pair[1].step_id
                )));
            }
        }
        for step in &self.steps {
            step.validate().map_err(fail)?;
        }
        Ok(())
    }
}

/// A validated, ordered collection of episodes with unique ids.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    episodes: Vec<Episode>,
    index: HashMap<String, usize>,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.episodes == other.episodes
    }
}

impl Dataset {
    pub fn new(episodes: Vec<Episode>) -> Result<Self, DatasetError> {
        let mut index = HashMap::with_capacity(episodes.len());
        for (i, ep) in episodes.iter().enumerate() {
            ep.validate()?;
            if index.insert(ep.episode_id.clone(), i).is_some() {
                return Err(DatasetError::DuplicateId {
                    episode_id: ep.episode_id.clone(),
                });
            }
        }
        Ok(Self { episodes, index })
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    pub fn into_episodes(self) -> Vec<Episode> {
        self.episodes
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn get(&self, episode_id: &str) -> Option<&Episode> {
        self.index.get(episode_id).map(|&i| &self.episodes[i])
    }

    pub fn step(&self, episode_id: &str, step_id: u32) -> Result<&Step, DatasetError> {
        let ep = self.get(episode_id).ok_or_else(|| DatasetError::UnknownEpisode {
            episode_id: episode_id.to_owned(),
        })?;
        ep.step(step_id).ok_or_else(|| DatasetError::UnknownStep {
            episode_id: episode_id.to_owned(),
            step_id,
        })
    }
}

/// One agent's predicted action per step for one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrace {
    pub agent_id: String,
    pub episode_id: String,
    pub predictions: BTreeMap<u32, Action>,
}

impl AgentTrace {
    /// Checks that the trace only references steps that exist.
    pub fn check_against(&self, dataset: &Dataset) -> Result<(), DatasetError> {
        for &step_id in self.predictions.keys() {
            dataset.step(&self.episode_id, step_id)?;
        }
        if self.predictions.is_empty() {
            dataset
                .get(&self.episode_id)
                .ok_or_else(|| DatasetError::UnknownEpisode {
                    episode_id: self.episode_id.clone(),
                })?;
        }
        Ok(())
    }
}

/// Normalization used when comparing typed text: outer whitespace trimmed,
/// internal whitespace runs collapsed to one space, lower-cased.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}
