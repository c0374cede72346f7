#![allow(dead_code)]

use std::collections::BTreeMap;

use forge_core::dataset::{
    Action, ActionKind, AgentTrace, BBox, Dataset, Direction, Episode, Point, Split, Step, UiElement,
};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const W: u32 = 720;
pub const H: u32 = 1280;

pub fn elements(rng: &mut ChaCha8Rng) -> Vec<UiElement> {
    (0..rng.random_range(0..=5))
        .map(|i| {
            let x1 = f64::from(rng.random_range(0..W - 30));
            let y1 = f64::from(rng.random_range(0..H - 30));
            let x2 = (x1 + rng.random_range(10.0..300.0)).min(f64::from(W));
            let y2 = (y1 + rng.random_range(10.0..200.0)).min(f64::from(H));
            UiElement {
                element_id: format!("e{i}"),
                bbox: BBox::new(x1, y1, x2, y2),
                interactive: rng.random_bool(0.6),
                text: None,
                resource_id: None,
            }
        })
        .collect()
}

pub fn point(rng: &mut ChaCha8Rng, els: &[UiElement]) -> Point {
    match els.choose(rng) {
        Some(e) if rng.random_bool(0.7) => Point::new(
            rng.random_range(e.bbox.x1..=e.bbox.x2),
            rng.random_range(e.bbox.y1..=e.bbox.y2),
        ),
        _ => Point::new(
            rng.random_range(0.0..=f64::from(W)),
            rng.random_range(0.0..=f64::from(H)),
        ),
    }
}

pub fn action(rng: &mut ChaCha8Rng, els: &[UiElement]) -> Action {
    let dirs = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];
    let words = ["hello", " Hello", "world"];
    let kind = if rng.random_bool(0.5) {
        ActionKind::Click
    } else {
        *ActionKind::ALL.choose(rng).unwrap()
    };
    match kind {
        ActionKind::Click => Action::Click(point(rng, els)),
        ActionKind::LongPress => Action::LongPress(point(rng, els)),
        ActionKind::Type => Action::Type(words.choose(rng).unwrap().to_string()),
        ActionKind::OpenApp => Action::OpenApp(words.choose(rng).unwrap().to_string()),
        ActionKind::Scroll => Action::Scroll(*dirs.choose(rng).unwrap()),
        ActionKind::Swipe => Action::Swipe(*dirs.choose(rng).unwrap()),
        ActionKind::NavigateBack => Action::NavigateBack,
        ActionKind::NavigateHome => Action::NavigateHome,
        ActionKind::Wait => Action::Wait,
        ActionKind::Complete => Action::Complete,
    }
}

pub struct World {
    pub dataset: Dataset,
    pub traces: Vec<AgentTrace>,
    pub agents: Vec<String>,
}

/// Random dataset plus traces for `n_agents` agents, fully determined by `seed`.
pub fn world(seed: u64, n_episodes: usize, n_agents: usize) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let episodes: Vec<Episode> = (0..n_episodes)
        .map(|i| {
            let steps = (0..rng.random_range(1..=4u32))
                .map(|sid| {
                    let els = elements(&mut rng);
                    let mut gt = vec![action(&mut rng, &els)];
                    if rng.random_bool(0.25) {
                        let alt = action(&mut rng, &els);
                        if !gt.contains(&alt) {
                            gt.push(alt);
                        }
                    }
                    Step {
                        step_id: sid,
                        screenshot_path: format!("{i}/{sid}.png"),
                        screen_w: W,
                        screen_h: H,
                        elements: els,
                        gt_actions: gt,
                    }
                })
                .collect();
            Episode {
                episode_id: format!("ep{i:02}"),
                goal: format!("goal {i}"),
                split: if rng.random_bool(0.5) { Split::Easy } else { Split::Hard },
                steps,
                provenance: None,
            }
        })
        .collect();
    let agents: Vec<String> = (0..n_agents).map(|a| format!("a{a}")).collect();
    let mut traces = Vec::new();
    for agent in &agents {
        let skill = rng.random_range(0.4..0.95);
        for ep in &episodes {
            if rng.random_bool(0.05) {
                continue;
            }
            let mut predictions = BTreeMap::new();
            for s in &ep.steps {
                if !rng.random_bool(0.95) {
                    continue;
                }
                let a = if rng.random_bool(skill) {
                    s.gt_actions.choose(&mut rng).unwrap().clone()
                } else {
                    action(&mut rng, &s.elements)
                };
                predictions.insert(s.step_id, a);
            }
            traces.push(AgentTrace {
                agent_id: agent.clone(),
                episode_id: ep.episode_id.clone(),
                predictions,
            });
        }
    }
    World {
        dataset: Dataset::new(episodes).unwrap(),
        traces,
        agents,
    }
}
