//! GUI actions and their on-disk record form.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Point;

/// The closed set of action kinds an agent can emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Click,
    LongPress,
    Type,
    Scroll,
    Swipe,
    OpenApp,
    NavigateBack,
    NavigateHome,
    Wait,
    Complete,
}

impl ActionKind {
    pub const ALL: [ActionKind; 10] = [
        ActionKind::Click,
        ActionKind::LongPress,
        ActionKind::Type,
        ActionKind::Scroll,
        ActionKind::Swipe,
        ActionKind::OpenApp,
        ActionKind::NavigateBack,
        ActionKind::NavigateHome,
        ActionKind::Wait,
        ActionKind::Complete,
    ];

    /// Whether actions of this kind carry a screen point.
    pub fn requires_point(self) -> bool {
        matches!(self, ActionKind::Click | ActionKind::LongPress)
    }

    pub fn requires_text(self) -> bool {
        matches!(self, ActionKind::Type | ActionKind::OpenApp)
    }

    pub fn requires_direction(self) -> bool {
        matches!(self, ActionKind::Scroll | ActionKind::Swipe)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::Click => "click",
            ActionKind::LongPress => "long_press",
            ActionKind::Type => "type",
            ActionKind::Scroll => "scroll",
            ActionKind::Swipe => "swipe",
            ActionKind::OpenApp => "open_app",
            ActionKind::NavigateBack => "navigate_back",
            ActionKind::NavigateHome => "navigate_home",
            ActionKind::Wait => "wait",
            ActionKind::Complete => "complete",
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ActionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown action kind `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Up => "up",
            Direction::Down => "down",
            Direction::Left => "left",
            Direction::Right => "right",
        })
    }
}

/// A single GUI action with exactly the parameters its kind demands.
///
/// Serialized through [`ActionRecord`], so the wire form is a flat object
/// `{"kind": ..., "point"?: ..., "text"?: ..., "direction"?: ...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ActionRecord", into = "ActionRecord")]
pub enum Action {
    Click(Point),
    LongPress(Point),
    Type(String),
    Scroll(Direction),
    Swipe(Direction),
    OpenApp(String),
    NavigateBack,
    NavigateHome,
    Wait,
    Complete,
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::Click(_) => ActionKind::Click,
            Action::LongPress(_) => ActionKind::LongPress,
            Action::Type(_) => ActionKind::Type,
            Action::Scroll(_) => ActionKind::Scroll,
            Action::Swipe(_) => ActionKind::Swipe,
            Action::OpenApp(_) => ActionKind::OpenApp,
            Action::NavigateBack => ActionKind::NavigateBack,
            Action::NavigateHome => ActionKind::NavigateHome,
            Action::Wait => ActionKind::Wait,
            Action::Complete => ActionKind::Complete,
        }
    }

    pub fn point(&self) -> Option<Point> {
        match self {
            Action::Click(p) | Action::LongPress(p) => Some(*p),
            _ => None,
        }
    }

    pub fn text(&self) -> Option<&str> {
        match self {
            Action::Type(t) | Action::OpenApp(t) => Some(t),
            _ => None,
        }
    }

    pub fn direction(&self) -> Option<Direction> {
        match self {
            Action::Scroll(d) | Action::Swipe(d) => Some(*d),
            _ => None,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Click(p) | Action::LongPress(p) => {
                write!(f, "{}({}, {})", self.kind(), p.x, p.y)
            }
            Action::Type(t) | Action::OpenApp(t) => write!(f, "{}({t:?})", self.kind()),
            Action::Scroll(d) | Action::Swipe(d) => write!(f, "{}({d})", self.kind()),
            _ => write!(f, "{}", self.kind()),
        }
    }
}

/// Flat record form of an [`Action`]. Parameters are optional here; the
/// conversion into [`Action`] enforces which ones each kind requires.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub kind: ActionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<Point>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ActionError {
    #[error("{kind} action requires `{param}`")]
    Missing { kind: ActionKind, param: &'static str },
    #[error("{kind} action does not take `{param}`")]
    Extraneous { kind: ActionKind, param: &'static str },
}

impl TryFrom<ActionRecord> for Action {
    type Error = ActionError;

    fn try_from(rec: ActionRecord) -> Result<Self, Self::Error> {
        let kind = rec.kind;
        let check = |present: bool, required: bool, param: &'static str| match (present, required) {
            (false, true) => Err(ActionError::Missing { kind, param }),
            (true, false) => Err(ActionError::Extraneous { kind, param }),
            _ => Ok(()),
        };
        check(rec.point.is_some(), kind.requires_point(), "point")?;
        check(rec.text.is_some(), kind.requires_text(), "text")?;
        check(rec.direction.is_some(), kind.requires_direction(), "direction")?;

        Ok(match kind {
            ActionKind::Click => Action::Click(rec.point.unwrap()),
            ActionKind::LongPress => Action::LongPress(rec.point.unwrap()),
            ActionKind::Type => Action::Type(rec.text.unwrap()),
            ActionKind::OpenApp => Action::OpenApp(rec.text.unwrap()),
            ActionKind::Scroll => Action::Scroll(rec.direction.unwrap()),
            ActionKind::Swipe => Action::Swipe(rec.direction.unwrap()),
            ActionKind::NavigateBack => Action::NavigateBack,
            ActionKind::NavigateHome => Action::NavigateHome,
            ActionKind::Wait => Action::Wait,
            ActionKind::Complete => Action::Complete,
        })
    }
}

impl From<Action> for ActionRecord {
    fn from(action: Action) -> Self {
        let kind = action.kind();
        let point = action.point();
        let direction = action.direction();
        let text = match action {
            Action::Type(t) | Action::OpenApp(t) => Some(t),
            _ => None,
        };
        ActionRecord {
            kind,
            point,
            text,
            direction,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(kind: ActionKind) -> ActionRecord {
        ActionRecord {
            kind,
            point: None,
            text: None,
            direction: None,
        }
    }

    #[test]
    fn click_without_point_is_rejected() {
        let err = Action::try_from(rec(ActionKind::Click)).unwrap_err();
        assert_eq!(
            err,
            ActionError::Missing {
                kind: ActionKind::Click,
                param: "point"
            }
        );
    }

    #[test]
    fn extraneous_parameters_are_rejected() {
        let mut r = rec(ActionKind::Wait);
        r.text = Some("x".into());
        assert!(matches!(
            Action::try_from(r),
            Err(ActionError::Extraneous { param: "text", .. })
        ));

        let mut r = rec(ActionKind::Swipe);
        r.direction = Some(Direction::Left);
        r.point = Some(Point::new(1.0, 1.0));
        assert!(matches!(
            Action::try_from(r),
            Err(ActionError::Extraneous { param: "point", .. })
        ));
    }

    #[test]
    fn wire_form_is_flat() {
        let a = Action::Swipe(Direction::Left);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            r#"{"kind":"swipe","direction":"left"}"#
        );
        let b: Action = serde_json::from_str(r#"{"kind":"click","point":{"x":3.0,"y":4.5}}"#).unwrap();
        assert_eq!(b, Action::Click(Point::new(3.0, 4.5)));
        assert!(serde_json::from_str::<Action>(r#"{"kind":"type"}"#).is_err());
    }

    #[test]
    fn kind_round_trips_through_str() {
        for k in ActionKind::ALL {
            assert_eq!(k.as_str().parse::<ActionKind>().unwrap(), k);
        }
        assert!("tap".parse::<ActionKind>().is_err());
    }
}
