//! Point-to-element mapping and the two grounding evaluators.
//!
//! [`eval_point`] is the legacy exact-point check: the prediction must lie
//! within `tau` pixels of the labeled point. [`eval_bbox`] instead upgrades the
//! labeled point to the smallest UI element containing it and accepts any
//! prediction inside that element's box.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::dataset::{Point, UiElement};

/// Which grounding evaluator a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Evaluator {
    Point,
    Bbox,
}

impl std::str::FromStr for Evaluator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "point" => Ok(Evaluator::Point),
            "bbox" => Ok(Evaluator::Bbox),
            other => Err(format!("unknown evaluator `{other}` (expected point|bbox)")),
        }
    }
}

impl std::fmt::Display for Evaluator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Evaluator::Point => "point",
            Evaluator::Bbox => "bbox",
        })
    }
}

/// How predicted and labeled text are compared for `type`/`open_app` actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextMatch {
    /// Trim, collapse whitespace, ignore case.
    #[default]
    Normalized,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Point-match tolerance in pixels.
    pub tau: f64,
    pub boundary_inclusive: bool,
    /// Tolerance used by the bbox evaluator when the labeled point hits no element.
    pub fallback_radius: f64,
    #[serde(default)]
    pub text_match: TextMatch,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tau: 0.0,
            boundary_inclusive: true,
            fallback_radius: 0.0,
            text_match: TextMatch::Normalized,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tau.is_finite() && self.tau >= 0.0) {
            return Err(format!("tau must be finite and >= 0, got {}", self.tau));
        }
        if !(self.fallback_radius.is_finite() && self.fallback_radius >= 0.0) {
            return Err(format!(
                "fallback_radius must be finite and >= 0, got {}",
                self.fallback_radius
            ));
        }
        Ok(())
    }
}

/// Orders candidate elements: interactive first, then smaller area, then
/// smaller `y1`, smaller `x1`, and finally element id.
fn candidate_order(a: &UiElement, b: &UiElement) -> Ordering {
    b.interactive
        .cmp(&a.interactive)
        .then_with(|| a.bbox.area().total_cmp(&b.bbox.area()))
        .then_with(|| a.bbox.y1.total_cmp(&b.bbox.y1))
        .then_with(|| a.bbox.x1.total_cmp(&b.bbox.x1))
        .then_with(|| a.element_id.cmp(&b.element_id))
}

/// Returns the minimal element whose (closed) box contains `p`, or `None`.
///
/// Interactive elements win over non-interactive ones; the remaining ties are
/// broken without regard to the order of `elements`.
pub fn map_point_to_element(p: Point, elements: &[UiElement]) -> Option<&UiElement> {
    elements
        .iter()
        .filter(|e| e.bbox.contains(p, true))
        .min_by(|a, b| candidate_order(a, b))
}

/// Exact point matching: `‖pred − gt‖₂ ≤ tau`.
pub fn eval_point(pred: Point, gt: Point, cfg: &EvalConfig) -> bool {
    pred.distance(gt) <= cfg.tau
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BboxOutcome {
    pub hit: bool,
    /// The labeled point was inside no element, so the point fallback decided.
    pub fallback: bool,
}

/// Bounding-box intent alignment with fallback reporting.
pub fn eval_bbox_detailed(pred: Point, gt: Point, elements: &[UiElement], cfg: &EvalConfig) -> BboxOutcome {
    match map_point_to_element(gt, elements) {
        Some(target) => BboxOutcome {
            hit: target.bbox.contains(pred, cfg.boundary_inclusive),
            fallback: false,
        },
        None => BboxOutcome {
            hit: pred.distance(gt) <= cfg.fallback_radius,
            fallback: true,
        },
    }
}

/// Bounding-box intent alignment: is `pred` inside the element that `gt` maps to?
pub fn eval_bbox(pred: Point, gt: Point, elements: &[UiElement], cfg: &EvalConfig) -> bool {
    eval_bbox_detailed(pred, gt, elements, cfg).hit
}

/// Dispatches to the configured evaluator.
pub fn eval_grounding(
    evaluator: Evaluator,
    pred: Point,
    gt: Point,
    elements: &[UiElement],
    cfg: &EvalConfig,
) -> BboxOutcome {
    match evaluator {
        Evaluator::Point => BboxOutcome {
            hit: eval_point(pred, gt, cfg),
            fallback: false,
        },
        Evaluator::Bbox => eval_bbox_detailed(pred, gt, elements, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::BBox;
    use proptest::prelude::*;

    fn el(id: &str, x1: f64, y1: f64, x2: f64, y2: f64) -> UiElement {
        UiElement {
            element_id: id.into(),
            bbox: BBox::new(x1, y1, x2, y2),
            interactive: true,
            text: None,
            resource_id: None,
        }
    }

    fn nested() -> Vec<UiElement> {
        vec![el("A", 0.0, 0.0, 100.0, 100.0), el("B", 25.0, 25.0, 75.0, 75.0)]
    }

    #[test]
    fn maps_to_minimal_containing_element() {
        let els = nested();
        let id = |p| map_point_to_element(p, &els).map(|e| e.element_id.as_str());
        assert_eq!(id(Point::new(50.0, 50.0)), Some("B"));
        assert_eq!(id(Point::new(10.0, 10.0)), Some("A"));
        assert_eq!(id(Point::new(200.0, 200.0)), None);
    }

    #[test]
    fn interactive_elements_take_priority() {
        let mut els = nested();
        els[1].interactive = false;
        let hit = map_point_to_element(Point::new(50.0, 50.0), &els).unwrap();
        assert_eq!(hit.element_id, "A");
        els[0].interactive = false;
        let hit = map_point_to_element(Point::new(50.0, 50.0), &els).unwrap();
        assert_eq!(hit.element_id, "B");
    }

    #[test]
    fn equal_area_ties_use_position_then_id() {
        let els = vec![el("z", 10.0, 0.0, 30.0, 20.0), el("y", 0.0, 0.0, 20.0, 20.0)];
        let hit = map_point_to_element(Point::new(15.0, 10.0), &els).unwrap();
        assert_eq!(hit.element_id, "y");
        let els = vec![el("z", 0.0, 0.0, 20.0, 20.0), el("y", 0.0, 0.0, 20.0, 20.0)];
        let hit = map_point_to_element(Point::new(15.0, 10.0), &els).unwrap();
        assert_eq!(hit.element_id, "y");
    }

    #[test]
    fn point_matching() {
        let strict = EvalConfig::default();
        assert!(eval_point(Point::new(100.0, 200.0), Point::new(100.0, 200.0), &strict));
        assert!(!eval_point(Point::new(101.0, 200.0), Point::new(100.0, 200.0), &strict));
        let five = EvalConfig { tau: 5.0, ..strict };
        // 3-4-5 triangle sits exactly on the tolerance
        assert!(eval_point(Point::new(103.0, 204.0), Point::new(100.0, 200.0), &five));
    }

    #[test]
    fn bbox_matching() {
        let cfg = EvalConfig::default();
        let els = nested();
        let gt = Point::new(50.0, 50.0);
        assert!(eval_bbox(Point::new(70.0, 30.0), gt, &els, &cfg));
        assert!(!eval_bbox(Point::new(80.0, 80.0), gt, &els, &cfg));

        let off = Point::new(150.0, 150.0);
        let out = eval_bbox_detailed(off, off, &els, &cfg);
        assert_eq!(
            out,
            BboxOutcome {
                hit: true,
                fallback: true
            }
        );
        assert!(!eval_bbox(Point::new(151.0, 150.0), off, &els, &cfg));
    }

    #[test]
    fn boundary_exclusive_mode() {
        let els = nested();
        let gt = Point::new(50.0, 50.0);
        let edge = Point::new(25.0, 50.0);
        assert!(eval_bbox(edge, gt, &els, &EvalConfig::default()));
        let excl = EvalConfig {
            boundary_inclusive: false,
            ..EvalConfig::default()
        };
        assert!(!eval_bbox(edge, gt, &els, &excl));
    }

    #[test]
    fn config_validation() {
        assert!(EvalConfig::default().validate().is_ok());
        assert!(EvalConfig {
            tau: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(EvalConfig {
            fallback_radius: f64::NAN,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    fn arb_elements() -> impl Strategy<Value = Vec<UiElement>> {
        prop::collection::vec((0u32..80, 0u32..80, 1u32..60, 1u32..60, any::<bool>()), 1..8).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (x, y, w, h, interactive))| UiElement {
                    element_id: format!("e{i}"),
                    bbox: BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64),
                    interactive,
                    text: None,
                    resource_id: None,
                })
                .collect()
        })
    }

    fn arb_point() -> impl Strategy<Value = Point> {
        (0u32..150, 0u32..150).prop_map(|(x, y)| Point::new(x as f64, y as f64))
    }

    proptest! {
        #[test]
        fn self_containment(els in arb_elements(), pick in any::<prop::sample::Index>(), fx in 0.0f64..=1.0, fy in 0.0f64..=1.0) {
            let b = els[pick.index(els.len())].bbox;
            let gt = Point::new(b.x1 + fx * b.width(), b.y1 + fy * b.height());
            prop_assert!(map_point_to_element(gt, &els).is_some());
            prop_assert!(eval_bbox(gt, gt, &els, &EvalConfig::default()));
        }

        #[test]
        fn bbox_dominates_point_at_zero_tau(els in arb_elements(), gt in arb_point(), pred in arb_point(), snap in any::<bool>()) {
            let pred = if snap { gt } else { pred };
            let cfg = EvalConfig::default();
            prop_assert!(eval_bbox(pred, gt, &els, &cfg) >= eval_point(pred, gt, &cfg));
        }

        #[test]
        fn mapping_ignores_element_order(els in arb_elements(), p in arb_point(), rot in 0usize..8) {
            let mut shuffled = els.clone();
            shuffled.reverse();
            let len = shuffled.len();
            shuffled.rotate_left(rot % len);
            let a = map_point_to_element(p, &els).map(|e| e.element_id.clone());
            let b = map_point_to_element(p, &shuffled).map(|e| e.element_id.clone());
            prop_assert_eq!(a, b);
        }

        #[test]
        fn translation_invariance(els in arb_elements(), gt in arb_point(), pred in arb_point(), dx in 0u32..500, dy in 0u32..500, tau in 0u32..20) {
            let (dx, dy) = (dx as f64, dy as f64);
            let cfg = EvalConfig { tau: tau as f64, fallback_radius: tau as f64, ..EvalConfig::default() };
            let shift = |p: Point| Point::new(p.x + dx, p.y + dy);
            let moved: Vec<UiElement> = els.iter().cloned().map(|mut e| {
                e.bbox = BBox::new(e.bbox.x1 + dx, e.bbox.y1 + dy, e.bbox.x2 + dx, e.bbox.y2 + dy);
                e
            }).collect();
            prop_assert_eq!(eval_point(pred, gt, &cfg), eval_point(shift(pred), shift(gt), &cfg));
            prop_assert_eq!(eval_bbox(pred, gt, &els, &cfg), eval_bbox(shift(pred), shift(gt), &moved, &cfg));
        }
    }
}
