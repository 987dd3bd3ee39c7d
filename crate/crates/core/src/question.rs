//! Questions asked during a session and the fixed surface forms of the
//! template questions.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::Segment;

pub const FIRST_HALF_PREFIX: &str = "in the first half of the video, ";
pub const SECOND_HALF_PREFIX: &str = "in the second half of the video, ";
pub const OBJECT_IDENTIFY_QUESTION: &str = "what object is in the video?";
pub const OBJECT_INVENTORY_QUESTION: &str = "what other objects are in the video?";

const ACTION_PREFIX: &str = "what is the ";
const ACTION_SUFFIX: &str = " doing?";
const SCENE_PREFIX: &str = "where is the ";
const SLOT_QUESTION_SUFFIX: &str = " in the video?";

/// `"what is the {object} doing?"`
#[must_use]
pub fn action_question(object: &str) -> String {
    format!("{ACTION_PREFIX}{object}{ACTION_SUFFIX}")
}

/// `"where is the {object}?"`
#[must_use]
pub fn scene_question(object: &str) -> String {
    format!("{SCENE_PREFIX}{object}?")
}

/// `"what is the {slot} in the video?"`, the synthetic language model's form.
#[must_use]
pub fn slot_question(slot: &str) -> String {
    format!("{ACTION_PREFIX}{slot}{SLOT_QUESTION_SUFFIX}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    Action,
    Scene,
    ObjectIdentify,
    ObjectInventory,
    Open,
}

impl fmt::Display for QuestionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuestionKind::Action => "action",
            QuestionKind::Scene => "scene",
            QuestionKind::ObjectIdentify => "object_identify",
            QuestionKind::ObjectInventory => "object_inventory",
            QuestionKind::Open => "open",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Question {
    pub text: String,
    pub kind: QuestionKind,
    pub segment: Segment,
}

impl Question {
    pub fn new(text: impl Into<String>, kind: QuestionKind) -> Self {
        Self {
            text: text.into(),
            kind,
            segment: Segment::Whole,
        }
    }

    /// Scope the question to one half, prefixing the text so a human answerer
    /// sees the scope too.
    #[must_use]
    pub fn for_half(&self, segment: Segment) -> Self {
        let prefix = match segment {
            Segment::Whole => "",
            Segment::FirstHalf => FIRST_HALF_PREFIX,
            Segment::SecondHalf => SECOND_HALF_PREFIX,
        };
        Self {
            text: format!("{prefix}{}", self.text),
            kind: self.kind,
            segment,
        }
    }

    /// The question once for each half.
    #[must_use]
    pub fn per_half(&self) -> [Self; 2] {
        [
            self.for_half(Segment::FirstHalf),
            self.for_half(Segment::SecondHalf),
        ]
    }
}

/// Remove a leading half-segment prefix, if any.
#[must_use]
pub fn strip_segment_prefix(text: &str) -> (&str, Option<Segment>) {
    let lower = text.trim_start();
    for (prefix, segment) in [
        (FIRST_HALF_PREFIX, Segment::FirstHalf),
        (SECOND_HALF_PREFIX, Segment::SecondHalf),
    ] {
        if lower
            .get(..prefix.len())
            .is_some_and(|head| head.eq_ignore_ascii_case(prefix))
        {
            return (&lower[prefix.len()..], Some(segment));
        }
    }
    (lower, None)
}

/// Recognise the template families from question text alone. Anything that is
/// not one of the fixed surface forms is `Open`.
#[must_use]
pub fn classify(text: &str) -> QuestionKind {
    let (body, _) = strip_segment_prefix(text);
    let body = body.trim().to_lowercase();
    if body == OBJECT_IDENTIFY_QUESTION {
        QuestionKind::ObjectIdentify
    } else if body == OBJECT_INVENTORY_QUESTION {
        QuestionKind::ObjectInventory
    } else if body.starts_with(ACTION_PREFIX)
        && body.ends_with(ACTION_SUFFIX)
        && body.len() > ACTION_PREFIX.len() + ACTION_SUFFIX.len()
    {
        QuestionKind::Action
    } else if body.starts_with(SCENE_PREFIX) && body.ends_with('?') {
        QuestionKind::Scene
    } else {
        QuestionKind::Open
    }
}

/// For `"what is the {slot} in the video?"` questions, the slot name.
#[must_use]
pub fn slot_focus(text: &str) -> Option<String> {
    let (body, _) = strip_segment_prefix(text);
    let body = body.trim().to_lowercase();
    let inner = body
        .strip_prefix(ACTION_PREFIX)?
        .strip_suffix(SLOT_QUESTION_SUFFIX)?;
    (!inner.is_empty() && !inner.contains(' ')).then(|| inner.to_string())
}
