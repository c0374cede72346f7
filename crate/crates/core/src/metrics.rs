//! Step verdicts and aggregate Type / Grounding / SR metrics.
//!
//! Scoring is offline: each step's prediction is compared to the labeled
//! action(s), and an episode succeeds only if every step is correct. A step
//! with no prediction is scored as wrong.
//!
//! Step-level fractions are micro-averaged by default. Grounding accuracy is
//! computed over steps whose canonical label carries a point; a step counts as
//! grounded if the prediction matches the kind of some point-bearing accepted
//! alternative and lands on it under the active evaluator. Because the
//! denominator only depends on the canonical label, appending alternatives can
//! never lower any metric.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{normalize_text, Action, ActionKind, AgentTrace, Dataset, DatasetError, Episode, Split, Step};
use crate::grounding::{eval_grounding, EvalConfig, Evaluator, TextMatch};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("agent `{agent_id}` has more than one trace for episode `{episode_id}`")]
    DuplicateTrace { agent_id: String, episode_id: String },
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepVerdict {
    pub type_correct: bool,
    /// Present iff the step's canonical label carries a point.
    pub grounding_correct: Option<bool>,
    pub step_correct: bool,
    /// Accepted alternative the prediction was matched against (full match
    /// preferred over kind-only match).
    pub matched_gt_index: Option<usize>,
    /// The bbox evaluator fell back to point matching for this step.
    pub fallback: bool,
}

impl StepVerdict {
    /// Verdict for a step the agent did not act on.
    pub fn missing(step: &Step) -> Self {
        StepVerdict {
            type_correct: false,
            grounding_correct: step.canonical_action().kind().requires_point().then_some(false),
            step_correct: false,
            matched_gt_index: None,
            fallback: false,
        }
    }
}

fn text_eq(a: &str, b: &str, mode: TextMatch) -> bool {
    match mode {
        TextMatch::Normalized => normalize_text(a) == normalize_text(b),
        TextMatch::Exact => a == b,
    }
}

/// Judges one prediction against every accepted alternative of `step`.
pub fn judge_step(pred: &Action, step: &Step, evaluator: Evaluator, cfg: &EvalConfig) -> StepVerdict {
    let mut kind_match = None;
    let mut full_match = None;
    let mut grounded = false;
    let mut fallback = false;

    for (i, gt) in step.gt_actions.iter().enumerate() {
        if gt.kind() != pred.kind() {
            continue;
        }
        kind_match.get_or_insert(i);
        let ok = match (pred, gt) {
            (Action::Click(p), Action::Click(g)) | (Action::LongPress(p), Action::LongPress(g)) => {
                let out = eval_grounding(evaluator, *p, *g, &step.elements, cfg);
                fallback |= out.fallback;
                grounded |= out.hit;
                out.hit
            }
            (Action::Type(p), Action::Type(g)) | (Action::OpenApp(p), Action::OpenApp(g)) => {
                text_eq(p, g, cfg.text_match)
            }
            (Action::Scroll(p), Action::Scroll(g)) | (Action::Swipe(p), Action::Swipe(g)) => p == g,
            _ => true,
        };
        if ok && full_match.is_none() {
            full_match = Some(i);
        }
    }

    StepVerdict {
        type_correct: kind_match.is_some(),
        grounding_correct: step.canonical_action().kind().requires_point().then_some(grounded),
        step_correct: full_match.is_some(),
        matched_gt_index: full_match.or(kind_match),
        fallback,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub verdicts: Vec<StepVerdict>,
    pub success: bool,
}

impl EpisodeOutcome {
    /// Step id of the first incorrect step, if any.
    pub fn first_failure(&self, episode: &Episode) -> Option<u32> {
        self.verdicts
            .iter()
            .zip(&episode.steps)
            .find(|(v, _)| !v.step_correct)
            .map(|(_, s)| s.step_id)
    }
}

/// Judges every step of `episode`; `trace == None` means the agent never ran it.
pub fn judge_episode(
    episode: &Episode,
    trace: Option<&AgentTrace>,
    evaluator: Evaluator,
    cfg: &EvalConfig,
) -> EpisodeOutcome {
    let verdicts: Vec<StepVerdict> = episode
        .steps
        .iter()
        .map(|step| match trace.and_then(|t| t.predictions.get(&step.step_id)) {
            Some(pred) => judge_step(pred, step, evaluator, cfg),
            None => StepVerdict::missing(step),
        })
        .collect();
    let success = verdicts.iter().all(|v| v.step_correct);
    EpisodeOutcome { verdicts, success }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    Micro,
    /// Per-episode fractions averaged over episodes.
    Macro,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindTally {
    pub steps: u64,
    pub type_correct: u64,
    pub grounding_steps: u64,
    pub grounding_correct: u64,
}

/// Additive counters behind a [`MetricsReport`]. Merging is associative.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub episodes: u64,
    pub successes: u64,
    pub steps: u64,
    pub type_correct: u64,
    pub step_correct: u64,
    pub grounding_steps: u64,
    pub grounding_correct: u64,
    pub fallbacks: u64,
    pub macro_type_sum: f64,
    pub macro_grounding_sum: f64,
    pub macro_grounding_episodes: u64,
    pub per_kind: BTreeMap<ActionKind, KindTally>,
}

impl Tally {
    pub fn from_episode(episode: &Episode, outcome: &EpisodeOutcome) -> Self {
        let mut t = Tally {
            episodes: 1,
            successes: u64::from(outcome.success),
            ..Tally::default()
        };
        for (v, step) in outcome.verdicts.iter().zip(&episode.steps) {
            t.steps += 1;
            t.type_correct += u64::from(v.type_correct);
            t.step_correct += u64::from(v.step_correct);
            t.fallbacks += u64::from(v.fallback);
            let k = t.per_kind.entry(step.canonical_action().kind()).or_default();
            k.steps += 1;
            k.type_correct += u64::from(v.type_correct);
            if let Some(g) = v.grounding_correct {
                t.grounding_steps += 1;
                t.grounding_correct += u64::from(g);
                k.grounding_steps += 1;
                k.grounding_correct += u64::from(g);
            }
        }
        if t.steps > 0 {
            t.macro_type_sum = t.type_correct as f64 / t.steps as f64;
        }
        if t.grounding_steps > 0 {
            t.macro_grounding_sum = t.grounding_correct as f64 / t.grounding_steps as f64;
            t.macro_grounding_episodes = 1;
        }
        t
    }

    pub fn merge(&mut self, other: &Tally) {
        self.episodes += other.episodes;
        self.successes += other.successes;
        self.steps += other.steps;
        self.type_correct += other.type_correct;
        self.step_correct += other.step_correct;
        self.grounding_steps += other.grounding_steps;
        self.grounding_correct += other.grounding_correct;
        self.fallbacks += other.fallbacks;
        self.macro_type_sum += other.macro_type_sum;
        self.macro_grounding_sum += other.macro_grounding_sum;
        self.macro_grounding_episodes += other.macro_grounding_episodes;
        for (kind, k) in &other.per_kind {
            let e = self.per_kind.entry(*kind).or_default();
            e.steps += k.steps;
            e.type_correct += k.type_correct;
            e.grounding_steps += k.grounding_steps;
            e.grounding_correct += k.grounding_correct;
        }
    }

    pub fn report(&self, split: Option<Split>, averaging: Averaging) -> MetricsReport {
        let (type_acc, grounding_acc) = match averaging {
            Averaging::Micro => (
                frac(self.type_correct, self.steps),
                frac(self.grounding_correct, self.grounding_steps),
            ),
            Averaging::Macro => (
                ratio(self.macro_type_sum, self.episodes),
                ratio(self.macro_grounding_sum, self.macro_grounding_episodes),
            ),
        };
        MetricsReport {
            split,
            n_episodes: self.episodes,
            n_steps: self.steps,
            type_acc,
            grounding_acc,
            step_acc: frac(self.step_correct, self.steps),
            sr: frac(self.successes, self.episodes),
            fallback_steps: self.fallbacks,
            per_action_type: self
                .per_kind
                .iter()
                .map(|(kind, k)| {
                    (
                        *kind,
                        KindBreakdown {
                            count: k.steps,
                            type_acc: frac(k.type_correct, k.steps),
                            grounding_acc: (k.grounding_steps > 0)
                                .then(|| frac(k.grounding_correct, k.grounding_steps)),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Fraction with an empty denominator reported as 0.
fn frac(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn ratio(sum: f64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        sum / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindBreakdown {
    pub count: u64,
    pub type_acc: f64,
    pub grounding_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `None` for the report over all splits.
    pub split: Option<Split>,
    pub n_episodes: u64,
    pub n_steps: u64,
    pub type_acc: f64,
    pub grounding_acc: f64,
    pub step_acc: f64,
    pub sr: f64,
    /// Steps where the bbox evaluator had to fall back to point matching.
    pub fallback_steps: u64,
    pub per_action_type: BTreeMap<ActionKind, KindBreakdown>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentMetrics {
    pub agent_id: String,
    pub overall: MetricsReport,
    pub by_split: BTreeMap<Split, MetricsReport>,
}

/// Per-agent, per-episode outcomes in dataset order.
pub type OutcomeTable = BTreeMap<String, Vec<EpisodeOutcome>>;

/// Builds the (agent, episode) → trace lookup after checking every trace
/// against the dataset.
pub(crate) fn index_traces<'a>(
    dataset: &Dataset,
    traces: &'a [AgentTrace],
) -> Result<HashMap<(&'a str, &'a str), &'a AgentTrace>, MetricsError> {
    let mut index = HashMap::with_capacity(traces.len());
    for t in traces {
        t.check_against(dataset)?;
        if index.insert((t.agent_id.as_str(), t.episode_id.as_str()), t).is_some() {
            return Err(MetricsError::DuplicateTrace {
                agent_id: t.agent_id.clone(),
                episode_id: t.episode_id.clone(),
            });
        }
    }
    Ok(index)
}

/// Judges every episode for each of `agents`. Episodes are processed in
/// parallel; the result order follows the dataset.
pub fn judge_all(
    dataset: &Dataset,
    traces: &[AgentTrace],
    agents: &[String],
    evaluator: Evaluator,
    cfg: &EvalConfig,
) -> Result<OutcomeTable, MetricsError> {
    cfg.validate().map_err(MetricsError::InvalidConfig)?;
    let index = index_traces(dataset, traces)?;
    Ok(agents
        .iter()
        .map(|agent| {
            let outcomes = dataset
                .episodes()
                .par_iter()
                .map(|ep| {
                    let trace = index.get(&(agent.as_str(), ep.episode_id.as_str())).copied();
                    judge_episode(ep, trace, evaluator, cfg)
                })
                .collect();
            (agent.clone(), outcomes)
        })
        .collect())
}

/// Agent ids appearing in `traces`, sorted.
pub fn agent_ids(traces: &[AgentTrace]) -> Vec<String> {
    let mut ids: Vec<String> = traces.iter().map(|t| t.agent_id.clone()).collect();
    ids.sort();
    ids.dedup();
    ids
}

pub fn evaluate(
    dataset: &Dataset,
    traces: &[AgentTrace],
    evaluator: Evaluator,
    cfg: &EvalConfig,
) -> Result<BTreeMap<String, AgentMetrics>, MetricsError> {
    evaluate_with(dataset, traces, evaluator, cfg, Averaging::Micro)
}

/// Evaluates every agent that appears in `traces` over the whole dataset.
pub fn evaluate_with(
    dataset: &Dataset,
    traces: &[AgentTrace],
    evaluator: Evaluator,
    cfg: &EvalConfig,
    averaging: Averaging,
) -> Result<BTreeMap<String, AgentMetrics>, MetricsError> {
    let agents = agent_ids(traces);
    let table = judge_all(dataset, traces, &agents, evaluator, cfg)?;
    Ok(table
        .into_iter()
        .map(|(agent_id, outcomes)| {
            let mut overall = Tally::default();
            let mut by_split: BTreeMap<Split, Tally> = BTreeMap::new();
            for (ep, outcome) in dataset.episodes().iter().zip(&outcomes) {
                let t = Tally::from_episode(ep, outcome);
                overall.merge(&t);
                by_split.entry(ep.split).or_default().merge(&t);
            }
            let metrics = AgentMetrics {
                agent_id: agent_id.clone(),
                overall: overall.report(None, averaging),
                by_split: by_split
                    .into_iter()
                    .map(|(s, t)| (s, t.report(Some(s), averaging)))
                    .collect(),
            };
            (agent_id, metrics)
        })
        .collect())
}

fn pct(v: f64) -> String {
    format!("{:.1}", v * 100.0)
}

/// Plain-text table: one row per agent, Type / Grounding / SR per split.
pub fn render_table(reports: &BTreeMap<String, AgentMetrics>) -> String {
    let groups: [(&str, Option<Split>); 3] = [("Easy", Some(Split::Easy)), ("Hard", Some(Split::Hard)), ("All", None)];
    let width = reports.keys().map(String::len).max().unwrap_or(5).max(5);
    let mut out = String::new();
    let _ = write!(out, "{:<width$}", "Model");
    for (name, _) in &groups {
        let _ = write!(out, " | {:^28}", name);
    }
    out.push('\n');
    let _ = write!(out, "{:<width$}", "");
    for _ in &groups {
        let _ = write!(out, " | {:>8} {:>10} {:>8}", "Type (%)", "Ground (%)", "SR (%)");
    }
    out.push('\n');
    for (agent, m) in reports {
        let _ = write!(out, "{agent:<width$}");
        for (_, split) in &groups {
            let r = match split {
                Some(s) => m.by_split.get(s),
                None => Some(&m.overall),
            };
            match r {
                Some(r) => {
                    let _ = write!(
                        out,
                        " | {:>8} {:>10} {:>8}",
                        pct(r.type_acc),
                        pct(r.grounding_acc),
                        pct(r.sr)
                    );
                }
                None => {
                    let _ = write!(out, " | {:>8} {:>10} {:>8}", "-", "-", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{BBox, Direction, Point, UiElement};

    fn click_step(step_id: u32, gt: Point) -> Step {
        Step {
            step_id,
            screenshot_path: String::new(),
            screen_w: 200,
            screen_h: 200,
            elements: vec![UiElement {
                element_id: "btn".into(),
                bbox: BBox::new(25.0, 25.0, 75.0, 75.0),
                interactive: true,
                text: None,
                resource_id: None,
            }],
            gt_actions: vec![Action::Click(gt)],
        }
    }

    fn with_gt(gt: Vec<Action>) -> Step {
        Step {
            gt_actions: gt,
            ..click_step(0, Point::new(0.0, 0.0))
        }
    }

    #[test]
    fn click_inside_gt_element() {
        let step = click_step(0, Point::new(50.0, 50.0));
        let v = judge_step(
            &Action::Click(Point::new(70.0, 30.0)),
            &step,
            Evaluator::Bbox,
            &EvalConfig::default(),
        );
        assert!(v.step_correct && v.type_correct);
        assert_eq!(v.grounding_correct, Some(true));
        assert_eq!(v.matched_gt_index, Some(0));
        let v = judge_step(
            &Action::Click(Point::new(70.0, 30.0)),
            &step,
            Evaluator::Point,
            &EvalConfig::default(),
        );
        assert!(!v.step_correct && v.type_correct);
        assert_eq!(v.grounding_correct, Some(false));
    }

    #[test]
    fn typed_text_is_normalized() {
        let step = with_gt(vec![Action::Type("venison goulash".into())]);
        let v = judge_step(
            &Action::Type("Venison Goulash ".into()),
            &step,
            Evaluator::Bbox,
            &EvalConfig::default(),
        );
        assert!(v.step_correct);
        assert_eq!(v.grounding_correct, None);
        let exact = EvalConfig {
            text_match: TextMatch::Exact,
            ..EvalConfig::default()
        };
        assert!(!judge_step(&Action::Type("Venison Goulash ".into()), &step, Evaluator::Bbox, &exact).step_correct);
    }

    #[test]
    fn kind_mismatch() {
        let step = with_gt(vec![Action::Swipe(Direction::Left)]);
        let v = judge_step(
            &Action::Scroll(Direction::Up),
            &step,
            Evaluator::Bbox,
            &EvalConfig::default(),
        );
        assert!(!v.type_correct && !v.step_correct);
        assert_eq!(v.matched_gt_index, None);
        let v = judge_step(
            &Action::Swipe(Direction::Right),
            &step,
            Evaluator::Bbox,
            &EvalConfig::default(),
        );
        assert!(v.type_correct && !v.step_correct);
    }

    #[test]
    fn alternatives_prefer_full_match() {
        let step = with_gt(vec![
            Action::Type("pasta".into()),
            Action::Click(Point::new(50.0, 50.0)),
        ]);
        let v = judge_step(
            &Action::Click(Point::new(30.0, 30.0)),
            &step,
            Evaluator::Bbox,
            &EvalConfig::default(),
        );
        assert!(v.step_correct);
        assert_eq!(v.matched_gt_index, Some(1));
        // canonical is not point-bearing: grounding not scored
        assert_eq!(v.grounding_correct, None);

        let step = with_gt(vec![Action::Scroll(Direction::Up), Action::Scroll(Direction::Down)]);
        let v = judge_step(
            &Action::Scroll(Direction::Down),
            &step,
            Evaluator::Bbox,
            &EvalConfig::default(),
        );
        assert_eq!(v.matched_gt_index, Some(1));
    }

    #[test]
    fn parameterless_kinds_need_only_kind() {
        let step = with_gt(vec![Action::NavigateBack]);
        assert!(judge_step(&Action::NavigateBack, &step, Evaluator::Point, &EvalConfig::default()).step_correct);
        assert!(!judge_step(&Action::NavigateHome, &step, Evaluator::Point, &EvalConfig::default()).step_correct);
    }

    fn episode(id: &str, split: Split, n: u32) -> Episode {
        Episode {
            episode_id: id.into(),
            goal: "g".into(),
            split,
            steps: (0..n).map(|i| click_step(i, Point::new(50.0, 50.0))).collect(),
            provenance: None,
        }
    }

    fn trace(agent: &str, ep: &str, preds: &[(u32, Point)]) -> AgentTrace {
        AgentTrace {
            agent_id: agent.into(),
            episode_id: ep.into(),
            predictions: preds.iter().map(|(s, p)| (*s, Action::Click(*p))).collect(),
        }
    }

    #[test]
    fn success_rate_is_all_or_nothing() {
        let good = Point::new(50.0, 50.0);
        let bad = Point::new(150.0, 150.0);
        let ds = Dataset::new(vec![episode("e1", Split::Easy, 2), episode("e2", Split::Hard, 2)]).unwrap();
        let traces = vec![
            trace("A", "e1", &[(0, good), (1, good)]),
            trace("A", "e2", &[(0, good), (1, bad)]),
        ];
        let r = evaluate(&ds, &traces, Evaluator::Bbox, &EvalConfig::default()).unwrap();
        let a = &r["A"];
        assert_eq!(a.overall.sr, 0.5);
        assert_eq!(a.overall.type_acc, 1.0);
        assert_eq!(a.overall.grounding_acc, 0.75);
        assert_eq!(a.by_split[&Split::Easy].sr, 1.0);
        assert_eq!(a.by_split[&Split::Hard].sr, 0.0);
    }

    #[test]
    fn missing_predictions_count_as_wrong() {
        let good = Point::new(50.0, 50.0);
        let ds = Dataset::new(vec![episode("e1", Split::Easy, 3)]).unwrap();
        let traces = vec![trace("A", "e1", &[(0, good), (2, good)])];
        let r = &evaluate(&ds, &traces, Evaluator::Bbox, &EvalConfig::default()).unwrap()["A"].overall;
        assert_eq!(r.sr, 0.0);
        assert!((r.type_acc - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.grounding_acc - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.n_steps, 3);
    }

    #[test]
    fn macro_averaging_weights_episodes_equally() {
        let good = Point::new(50.0, 50.0);
        let bad = Point::new(150.0, 150.0);
        let ds = Dataset::new(vec![episode("e1", Split::Easy, 1), episode("e2", Split::Easy, 3)]).unwrap();
        let traces = vec![
            trace("A", "e1", &[(0, good)]),
            trace("A", "e2", &[(0, bad), (1, bad), (2, bad)]),
        ];
        let micro = &evaluate(&ds, &traces, Evaluator::Bbox, &EvalConfig::default()).unwrap()["A"].overall;
        let mac = &evaluate_with(&ds, &traces, Evaluator::Bbox, &EvalConfig::default(), Averaging::Macro).unwrap()["A"]
            .overall;
        assert_eq!(micro.grounding_acc, 0.25);
        assert_eq!(mac.grounding_acc, 0.5);
    }

    #[test]
    fn table_has_split_columns() {
        let ds = Dataset::new(vec![episode("e1", Split::Easy, 1)]).unwrap();
        let traces = vec![trace("agent-x", "e1", &[(0, Point::new(50.0, 50.0))])];
        let r = evaluate(&ds, &traces, Evaluator::Bbox, &EvalConfig::default()).unwrap();
        let table = render_table(&r);
        assert!(table.contains("Easy") && table.contains("Hard") && table.contains("SR (%)"));
        assert!(table.contains("agent-x"));
        assert!(table.contains("100.0"));
    }
}
