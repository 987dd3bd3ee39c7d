//! Language-model question generators (Auto-text and Auto-text-vid).

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Segment;
use crate::gateway::{GatewayError, ModelGateway};
use crate::question::{strip_segment_prefix, Question, QuestionKind, OBJECT_INVENTORY_QUESTION};
use crate::ranking::RankedList;

pub const AUTO_TEXT_TEMPLATE: &str = "Suppose you are given the following video descriptions {Q}, What question would you ask to help you unique identify the video?";
pub const AUTO_TEXT_VID_TEMPLATE: &str = "Suppose you are given the following video descriptions: {C}. What question would you ask to help you unique identify the video described as follows: {Q}?";
pub const CAPTION_SEPARATOR: &str = "; ";
pub const DEFAULT_CAPTION_K: usize = 5;
pub const LM_MAX_TOKENS: usize = 32;

const AUTO_TEXT_PREFIX: &str = "Suppose you are given the following video descriptions ";
const AUTO_TEXT_SUFFIX: &str = ", What question would you ask to help you unique identify the video?";
const AUTO_TEXT_VID_PREFIX: &str = "Suppose you are given the following video descriptions: ";
const AUTO_TEXT_VID_MIDDLE: &str =
    ". What question would you ask to help you unique identify the video described as follows: ";
const AUTO_TEXT_VID_SUFFIX: &str = "?";

#[derive(Debug, Error)]
pub enum ParametricError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("caption set is empty")]
    NoCaptions,
    #[error("caption for video {0:?} is empty")]
    EmptyCaption(String),
    #[error("asked for {k} captions from a ranking of {len}")]
    KOutOfRange { k: usize, len: usize },
    #[error("captioning video {video_id:?} failed: {source}")]
    Caption {
        video_id: String,
        #[source]
        source: GatewayError,
    },
    #[error("question generation failed: {0}")]
    Generate(#[source] GatewayError),
    #[error("language model returned an empty question")]
    EmptyGeneration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParametricKind {
    AutoText,
    AutoTextVid,
}

/// Captions of the current top-k videos, in rank order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSet {
    pub round: usize,
    pub entries: Vec<(String, String)>,
}

impl CaptionSet {
    #[must_use]
    pub fn joined(&self) -> String {
        self.entries
            .iter()
            .map(|(_, c)| c.as_str())
            .collect::<Vec<_>>()
            .join(CAPTION_SEPARATOR)
    }
}

pub fn render_auto_text(query: &str) -> Result<String, ParametricError> {
    if query.trim().is_empty() {
        return Err(ParametricError::EmptyQuery);
    }
    Ok(format!("{AUTO_TEXT_PREFIX}{query}{AUTO_TEXT_SUFFIX}"))
}

pub fn render_auto_text_vid(query: &str, captions: &CaptionSet) -> Result<String, ParametricError> {
    if query.trim().is_empty() {
        return Err(ParametricError::EmptyQuery);
    }
    if captions.entries.is_empty() {
        return Err(ParametricError::NoCaptions);
    }
    if let Some((id, _)) = captions.entries.iter().find(|(_, c)| c.trim().is_empty()) {
        return Err(ParametricError::EmptyCaption(id.clone()));
    }
    Ok(format!(
        "{AUTO_TEXT_VID_PREFIX}{}{AUTO_TEXT_VID_MIDDLE}{query}{AUTO_TEXT_VID_SUFFIX}",
        captions.joined()
    ))
}

/// The query embedded in an Auto-text prompt.
#[must_use]
pub fn split_auto_text_prompt(prompt: &str) -> Option<&str> {
    prompt
        .strip_prefix(AUTO_TEXT_PREFIX)?
        .strip_suffix(AUTO_TEXT_SUFFIX)
}

/// The joined captions and the query embedded in an Auto-text-vid prompt.
#[must_use]
pub fn split_auto_text_vid_prompt(prompt: &str) -> Option<(&str, &str)> {
    prompt
        .strip_prefix(AUTO_TEXT_VID_PREFIX)?
        .strip_suffix(AUTO_TEXT_VID_SUFFIX)?
        .split_once(AUTO_TEXT_VID_MIDDLE)
}

/// Per-video caption memo. Captions do not depend on the query.
#[derive(Debug, Default)]
pub struct CaptionCache {
    captions: Mutex<HashMap<String, String>>,
}

impl CaptionCache {
    #[must_use]
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_fetch(
        &self,
        video_id: &str,
        gateway: &dyn ModelGateway,
    ) -> Result<String, ParametricError> {
        if let Some(c) = self.captions.lock().expect("caption cache").get(video_id) {
            return Ok(c.clone());
        }
        let caption = gateway
            .caption(video_id)
            .map_err(|source| ParametricError::Caption {
                video_id: video_id.to_string(),
                source,
            })?;
        self.captions
            .lock()
            .expect("caption cache")
            .insert(video_id.to_string(), caption.clone());
        Ok(caption)
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.captions.lock().expect("caption cache").len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Captions of the first `k` entries of `list`.
pub fn gather_captions(
    list: &RankedList,
    k: usize,
    round: usize,
    gateway: &dyn ModelGateway,
    cache: Option<&CaptionCache>,
) -> Result<CaptionSet, ParametricError> {
    if k == 0 || k > list.len() {
        return Err(ParametricError::KOutOfRange { k, len: list.len() });
    }
    let entries = list
        .ids()
        .take(k)
        .map(|id| {
            let caption = match cache {
                Some(cache) => cache.get_or_fetch(id, gateway)?,
                None => gateway
                    .caption(id)
                    .map_err(|source| ParametricError::Caption {
                        video_id: id.to_string(),
                        source,
                    })?,
            };
            let caption = caption.trim().to_string();
            if caption.is_empty() {
                return Err(ParametricError::EmptyCaption(id.to_string()));
            }
            Ok((id.to_string(), caption))
        })
        .collect::<Result<_, _>>()?;
    Ok(CaptionSet { round, entries })
}

/// Ask the language model for a question and normalise it to end with `?`.
pub fn generate_question(prompt: &str, gateway: &dyn ModelGateway) -> Result<Question, ParametricError> {
    if prompt.trim().is_empty() {
        return Err(ParametricError::EmptyQuery);
    }
    let raw = gateway
        .lm_generate(prompt, LM_MAX_TOKENS)
        .map_err(ParametricError::Generate)?;
    let text = raw.trim();
    if text.is_empty() {
        return Err(ParametricError::EmptyGeneration);
    }
    let text = if text.ends_with('?') {
        text.to_string()
    } else {
        format!("{text}?")
    };
    Ok(Question::new(text, QuestionKind::Open))
}

/// Round-by-round schedule of a parametric generator.
///
/// With Ask Object the inventory question takes round `ao_round`. With Ask
/// Segment each generated question is asked for the first half, then for the
/// second half in the following round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParametricPlan {
    pub kind: ParametricKind,
    pub ask_segment: bool,
    pub ask_object: bool,
    pub ao_round: usize,
    inventory_done: bool,
    carry: Option<Question>,
}

/// Inputs to one parametric proposal.
pub struct ProposalContext<'a> {
    pub round: usize,
    pub query: &'a str,
    pub ranking: &'a RankedList,
    pub caption_k: usize,
    pub gateway: &'a dyn ModelGateway,
    pub cache: Option<&'a CaptionCache>,
}

impl ParametricPlan {
    #[must_use]
    pub fn new(kind: ParametricKind, ask_segment: bool, ask_object: bool, ao_round: usize) -> Self {
        Self {
            kind,
            ask_segment,
            ask_object,
            ao_round,
            inventory_done: false,
            carry: None,
        }
    }

    /// The question for `ctx.round`. Does not change the plan.
    pub fn propose(&self, ctx: &ProposalContext<'_>) -> Result<Question, ParametricError> {
        if let Some(q) = &self.carry {
            return Ok(q.clone());
        }
        let base = if self.ask_object && !self.inventory_done && ctx.round >= self.ao_round {
            Question::new(OBJECT_INVENTORY_QUESTION, QuestionKind::ObjectInventory)
        } else {
            let prompt = match self.kind {
                ParametricKind::AutoText => render_auto_text(ctx.query)?,
                ParametricKind::AutoTextVid => {
                    let captions =
                        gather_captions(ctx.ranking, ctx.caption_k, ctx.round, ctx.gateway, ctx.cache)?;
                    render_auto_text_vid(ctx.query, &captions)?
                }
            };
            generate_question(&prompt, ctx.gateway)?
        };
        Ok(if self.ask_segment {
            base.for_half(Segment::FirstHalf)
        } else {
            base
        })
    }

    /// Record that `asked` was answered.
    pub fn advance(&mut self, asked: &Question) {
        if asked.kind == QuestionKind::ObjectInventory {
            self.inventory_done = true;
        }
        self.carry = match asked.segment {
            Segment::FirstHalf => {
                let (body, _) = strip_segment_prefix(&asked.text);
                Some(Question::new(body, asked.kind).for_half(Segment::SecondHalf))
            }
            _ => None,
        };
    }
}
