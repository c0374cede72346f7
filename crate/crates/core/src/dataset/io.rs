//! Line-delimited JSON readers and writers for datasets and traces.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Action, ActionRecord, AgentTrace, Dataset, DatasetError, Episode, Provenance, Split, Step, UiElement};

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Accept records with unknown fields (they are dropped with a warning).
    pub lenient: bool,
}

#[derive(Deserialize)]
struct EpisodeRecord {
    episode_id: String,
    goal: String,
    split: Split,
    steps: Vec<StepRecord>,
    #[serde(default)]
    provenance: Option<Provenance>,
}

#[derive(Deserialize)]
struct StepRecord {
    step_id: u32,
    screenshot_path: String,
    screen_w: u32,
    screen_h: u32,
    elements: Vec<UiElement>,
    gt_actions: Vec<ActionRecord>,
}

/// One line of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub agent_id: String,
    pub episode_id: String,
    pub step_id: u32,
    pub action: ActionRecord,
}

fn open(path: &Path) -> Result<BufReader<File>, DatasetError> {
    File::open(path).map(BufReader::new).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parses one JSON record, reporting fields the schema does not know about.
fn parse_line<T: DeserializeOwned>(text: &str, line: usize, opts: LoadOptions) -> Result<T, DatasetError> {
    let mut unknown = Vec::new();
    let mut de = serde_json::Deserializer::from_str(text);
    let value: T = serde_ignored::deserialize(&mut de, |path| unknown.push(path.to_string()))
        .and_then(|v| de.end().map(|()| v))
        .map_err(|e| DatasetError::Parse {
            line,
            reason: e.to_string(),
        })?;
    if let Some(first) = unknown.first() {
        if !opts.lenient {
            return Err(DatasetError::Parse {
                line,
                reason: format!("unknown field `{first}`"),
            });
        }
        for path in &unknown {
            tracing::warn!(line, field = %path, "ignoring unknown field");
        }
    }
    Ok(value)
}

/// Iterates non-blank lines with 1-based line numbers.
fn records<R: BufRead>(reader: R) -> impl Iterator<Item = Result<(usize, String), DatasetError>> {
    reader.lines().enumerate().filter_map(|(i, line)| match line {
        Ok(l) if l.trim().is_empty() => None,
        Ok(l) => Some(Ok((i + 1, l))),
        Err(source) => Some(Err(DatasetError::Io {
            path: format!("<line {}>", i + 1),
            source,
        })),
    })
}

fn into_episode(rec: EpisodeRecord) -> Result<Episode, DatasetError> {
    let mut steps = Vec::with_capacity(rec.steps.len());
    for s in rec.steps {
        let mut gt_actions = Vec::with_capacity(s.gt_actions.len());
        for (i, a) in s.gt_actions.into_iter().enumerate() {
            let action = Action::try_from(a).map_err(|e| DatasetError::Validation {
                episode_id: rec.episode_id.clone(),
                reason: format!("step {}: gt_actions[{i}]: {e}", s.step_id),
            })?;
            gt_actions.push(action);
        }
        steps.push(Step {
            step_id: s.step_id,
            screenshot_path: s.screenshot_path,
            screen_w: s.screen_w,
            screen_h: s.screen_h,
            elements: s.elements,
            gt_actions,
        });
    }
    let episode = Episode {
        episode_id: rec.episode_id,
        goal: rec.goal,
        split: rec.split,
        steps,
        provenance: rec.provenance,
    };
    episode.validate()?;
    Ok(episode)
}

pub fn read_dataset<R: BufRead>(reader: R, opts: LoadOptions) -> Result<Dataset, DatasetError> {
    let mut episodes = Vec::new();
    let mut seen = HashSet::new();
    for item in records(reader) {
        let (line, text) = item?;
        let rec: EpisodeRecord = parse_line(&text, line, opts)?;
        let episode = into_episode(rec)?;
        if !seen.insert(episode.episode_id.clone()) {
            return Err(DatasetError::DuplicateId {
                episode_id: episode.episode_id,
            });
        }
        episodes.push(episode);
    }
    Dataset::new(episodes)
}

/// Loads a dataset file with strict schema checking.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    load_dataset_with(path, LoadOptions::default())
}

pub fn load_dataset_with(path: impl AsRef<Path>, opts: LoadOptions) -> Result<Dataset, DatasetError> {
    read_dataset(open(path.as_ref())?, opts)
}

pub fn write_dataset<W: Write>(dataset: &Dataset, mut out: W) -> std::io::Result<()> {
    for ep in dataset.episodes() {
        serde_json::to_writer(&mut out, ep)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Reads trace lines and groups them per (agent, episode) in order of first
/// appearance. Every referenced episode and step must exist in `dataset`.
pub fn read_traces<R: BufRead>(
    reader: R,
    dataset: &Dataset,
    opts: LoadOptions,
) -> Result<Vec<AgentTrace>, DatasetError> {
    let mut traces: Vec<AgentTrace> = Vec::new();
    let mut slot: HashMap<(String, String), usize> = HashMap::new();
    for item in records(reader) {
        let (line, text) = item?;
        let rec: TraceRecord = parse_line(&text, line, opts)?;
        dataset.step(&rec.episode_id, rec.step_id)?;
        let action = Action::try_from(rec.action).map_err(|e| DatasetError::Parse {
            line,
            reason: e.to_string(),
        })?;
        if let Some(p) = action.point() {
            if !p.is_valid() {
                return Err(DatasetError::Parse {
                    line,
                    reason: format!("predicted point ({}, {}) is negative or non-finite", p.x, p.y),
                });
            }
        }
        let key = (rec.agent_id, rec.episode_id);
        let idx = *slot.entry(key.clone()).or_insert_with(|| {
            traces.push(AgentTrace {
                agent_id: key.0.clone(),
                episode_id: key.1.clone(),
                predictions: BTreeMap::new(),
            });
            traces.len() - 1
        });
        if traces[idx].predictions.insert(rec.step_id, action).is_some() {
            return Err(DatasetError::Parse {
                line,
                reason: format!(
                    "duplicate prediction for agent `{}` episode `{}` step {}",
                    key.0, key.1, rec.step_id
                ),
            });
        }
    }
    Ok(traces)
}

pub fn load_traces(path: impl AsRef<Path>, dataset: &Dataset) -> Result<Vec<AgentTrace>, DatasetError> {
    load_traces_with(path, dataset, LoadOptions::default())
}

pub fn load_traces_with(
    path: impl AsRef<Path>,
    dataset: &Dataset,
    opts: LoadOptions,
) -> Result<Vec<AgentTrace>, DatasetError> {
    read_traces(open(path.as_ref())?, dataset, opts)
}

pub fn write_traces<W: Write>(traces: &[AgentTrace], out: W) -> std::io::Result<()> {
    let mut out = BufWriter::new(out);
    for t in traces {
        for (&step_id, action) in &t.predictions {
            let rec = TraceRecord {
                agent_id: t.agent_id.clone(),
                episode_id: t.episode_id.clone(),
                step_id,
                action: action.clone().into(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()
}
