//! Answer providers: VideoQA, caption-then-LM, scripted oracle and a human relay.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AttributeTruth, Segment, Slot};
use crate::gateway::synthetic::slot_named;
use crate::gateway::{Endpoint, GatewayError, ModelGateway};
use crate::parametric::LM_MAX_TOKENS;
use crate::question::{slot_focus, Question, QuestionKind};

pub const CAP_LM_PROMPT_PREFIX: &str = "Answer the question based on the description. Description: ";
pub const CAP_LM_QUESTION_MARKER: &str = " Question: ";
pub const EMPTY_SLOT_ANSWER: &str = "nothing";

pub const DEFAULT_DEADLINE: Duration = Duration::from_secs(30);
pub const HUMAN_DEADLINE: Duration = Duration::from_secs(300);

/// `"Answer the question based on the description. Description: {caption} Question: {question}"`
#[must_use]
pub fn cap_lm_prompt(caption: &str, question: &str) -> String {
    format!("{CAP_LM_PROMPT_PREFIX}{caption}{CAP_LM_QUESTION_MARKER}{question}")
}

/// One token of an oracle answer, tagged with the slot it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerPart {
    pub slot: Option<Slot>,
    pub token: String,
}

/// Structured oracle answer; [`TruthAnswer::render`] gives the surface text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TruthAnswer {
    pub parts: Vec<AnswerPart>,
    pub separator: &'static str,
    pub article: bool,
}

impl TruthAnswer {
    #[must_use]
    pub fn render(&self) -> String {
        if self.parts.is_empty() {
            return EMPTY_SLOT_ANSWER.to_string();
        }
        let body = self
            .parts
            .iter()
            .map(|p| p.token.as_str())
            .collect::<Vec<_>>()
            .join(self.separator);
        if self.article {
            format!("a {body}")
        } else {
            body
        }
    }
}

/// The oracle answering rule over ground truth.
///
/// | kind               | answer                                          |
/// |--------------------|-------------------------------------------------|
/// | `action`           | action tokens joined by `" and "`               |
/// | `scene`            | scene tokens joined by `" "`                    |
/// | `object_identify`  | `"a "` + first object token                     |
/// | `object_inventory` | object tokens after the first, joined by `", "` |
/// | `open`             | the focused slot, else every slot, by `" "`     |
///
/// Object tokens are `object` then `extra_objects`. An empty answer renders as
/// `"nothing"`. Returns `None` when the segment is absent from the truth.
#[must_use]
pub fn truth_answer(
    question_text: &str,
    kind: QuestionKind,
    segment: Segment,
    truth: &AttributeTruth,
) -> Option<TruthAnswer> {
    let slots = truth.segment(segment)?;
    let take = |slot: Slot| -> Vec<AnswerPart> {
        slots
            .get(&slot)
            .into_iter()
            .flatten()
            .map(|t| AnswerPart {
                slot: Some(slot),
                token: t.clone(),
            })
            .collect()
    };
    let objects = || {
        let mut parts = take(Slot::Object);
        parts.extend(take(Slot::ExtraObjects));
        parts
    };
    let (parts, separator, article) = match kind {
        QuestionKind::Action => (take(Slot::Action), " and ", false),
        QuestionKind::Scene => (take(Slot::Scene), " ", false),
        QuestionKind::ObjectIdentify => {
            let mut parts = objects();
            parts.truncate(1);
            let article = !parts.is_empty();
            (parts, " ", article)
        }
        QuestionKind::ObjectInventory => (objects().into_iter().skip(1).collect(), ", ", false),
        QuestionKind::Open => match slot_focus(question_text).as_deref().and_then(slot_named) {
            Some(slot) => (take(slot), " ", false),
            None => (
                Slot::ALL.into_iter().flat_map(take).collect(),
                " ",
                false,
            ),
        },
    };
    Some(TruthAnswer {
        parts,
        separator,
        article,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderTag {
    #[serde(rename = "videoqa")]
    VideoQa,
    CapLm,
    Scripted,
    Human,
}

impl ProviderTag {
    #[must_use]
    pub const fn as_str(self) -> &'static str {
        match self {
            ProviderTag::VideoQa => "videoqa",
            ProviderTag::CapLm => "cap_lm",
            ProviderTag::Scripted => "scripted",
            ProviderTag::Human => "human",
        }
    }
}

impl fmt::Display for ProviderTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Who is being asked: a target video (simulation) or a live session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnswerSubject {
    Video(String),
    Session(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnswerRequest {
    pub subject: AnswerSubject,
    pub question: Question,
    pub deadline: Duration,
}

impl AnswerRequest {
    pub fn for_video(video_id: impl Into<String>, question: Question, deadline: Duration) -> Self {
        Self {
            subject: AnswerSubject::Video(video_id.into()),
            question,
            deadline,
        }
    }

    pub fn for_session(session_id: impl Into<String>, question: Question, deadline: Duration) -> Self {
        Self {
            subject: AnswerSubject::Session(session_id.into()),
            question,
            deadline,
        }
    }

    fn video_id(&self) -> Result<&str, AnswerError> {
        match &self.subject {
            AnswerSubject::Video(id) => Ok(id),
            AnswerSubject::Session(_) => Err(AnswerError::WrongSubject),
        }
    }

    fn check(&self) -> Result<(), AnswerError> {
        if self.deadline.is_zero() {
            return Err(AnswerError::InvalidDeadline);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnswerResult {
    pub answer: String,
    pub latency: Duration,
    pub provider: ProviderTag,
}

#[derive(Debug, Clone, Error)]
pub enum AnswerError {
    #[error("{call} failed: {source}")]
    Gateway {
        call: Endpoint,
        #[source]
        source: GatewayError,
    },
    #[error("answer took {elapsed:?}, past the {deadline:?} deadline")]
    DeadlineExceeded { deadline: Duration, elapsed: Duration },
    #[error("no ground truth for video {0:?}")]
    MissingTruth(String),
    #[error("video {video_id:?} has no {segment} segment")]
    MissingSegment { video_id: String, segment: Segment },
    #[error("provider returned an empty answer")]
    Empty,
    #[error("deadline must be positive")]
    InvalidDeadline,
    #[error("this provider answers for videos, not live sessions (or vice versa)")]
    WrongSubject,
    #[error("session {0:?} is not attached to the relay")]
    NotAttached(String),
    #[error("session {0:?} detached before answering")]
    Detached(String),
    #[error("session {0:?} already has a pending question")]
    AlreadyPending(String),
}

/// How latency is reported. `Null` reports zero so that reports built from it
/// are byte-reproducible; deadlines are still enforced against wall time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyClock {
    #[default]
    Wall,
    Null,
}

impl LatencyClock {
    fn report(self, elapsed: Duration) -> Duration {
        match self {
            LatencyClock::Wall => elapsed,
            LatencyClock::Null => Duration::ZERO,
        }
    }
}

pub trait AnswerProvider: Send + Sync {
    fn tag(&self) -> ProviderTag;

    fn answer(&self, request: &AnswerRequest) -> Result<AnswerResult, AnswerError>;
}

fn normalize_answer(raw: &str) -> Result<String, AnswerError> {
    let answer = raw.trim().to_lowercase();
    if answer.is_empty() {
        Err(AnswerError::Empty)
    } else {
        Ok(answer)
    }
}

fn finish(
    tag: ProviderTag,
    clock: LatencyClock,
    request: &AnswerRequest,
    started: Instant,
    raw: &str,
) -> Result<AnswerResult, AnswerError> {
    let elapsed = started.elapsed();
    if elapsed > request.deadline {
        return Err(AnswerError::DeadlineExceeded {
            deadline: request.deadline,
            elapsed,
        });
    }
    Ok(AnswerResult {
        answer: normalize_answer(raw)?,
        latency: clock.report(elapsed),
        provider: tag,
    })
}

/// Ask the VideoQA model directly about the target video.
pub struct VideoQaAnswerer {
    gateway: Arc<dyn ModelGateway>,
    clock: LatencyClock,
}

impl VideoQaAnswerer {
    pub fn new(gateway: Arc<dyn ModelGateway>, clock: LatencyClock) -> Self {
        Self { gateway, clock }
    }
}

impl AnswerProvider for VideoQaAnswerer {
    fn tag(&self) -> ProviderTag {
        ProviderTag::VideoQa
    }

    fn answer(&self, request: &AnswerRequest) -> Result<AnswerResult, AnswerError> {
        request.check()?;
        let video_id = request.video_id()?;
        let started = Instant::now();
        let raw = self
            .gateway
            .vqa(video_id, &request.question.text, request.question.segment)
            .map_err(|source| AnswerError::Gateway {
                call: Endpoint::Vqa,
                source,
            })?;
        finish(self.tag(), self.clock, request, started, &raw)
    }
}

/// Caption the target video, then let the language model answer from the
/// caption text alone.
pub struct CapLmAnswerer {
    gateway: Arc<dyn ModelGateway>,
    clock: LatencyClock,
}

impl CapLmAnswerer {
    pub fn new(gateway: Arc<dyn ModelGateway>, clock: LatencyClock) -> Self {
        Self { gateway, clock }
    }
}

impl AnswerProvider for CapLmAnswerer {
    fn tag(&self) -> ProviderTag {
        ProviderTag::CapLm
    }

    fn answer(&self, request: &AnswerRequest) -> Result<AnswerResult, AnswerError> {
        request.check()?;
        let video_id = request.video_id()?;
        let started = Instant::now();
        let caption = self
            .gateway
            .caption(video_id)
            .map_err(|source| AnswerError::Gateway {
                call: Endpoint::Caption,
                source,
            })?;
        let prompt = cap_lm_prompt(caption.trim(), &request.question.text);
        let raw = self
            .gateway
            .lm_generate(&prompt, LM_MAX_TOKENS)
            .map_err(|source| AnswerError::Gateway {
                call: Endpoint::LmGenerate,
                source,
            })?;
        finish(self.tag(), self.clock, request, started, &raw)
    }
}

/// Answers straight from ground truth.
pub struct ScriptedAnswerer {
    truths: Arc<BTreeMap<String, AttributeTruth>>,
    clock: LatencyClock,
}

impl ScriptedAnswerer {
    pub fn new(truths: Arc<BTreeMap<String, AttributeTruth>>, clock: LatencyClock) -> Self {
        Self { truths, clock }
    }
}

impl AnswerProvider for ScriptedAnswerer {
    fn tag(&self) -> ProviderTag {
        ProviderTag::Scripted
    }

    fn answer(&self, request: &AnswerRequest) -> Result<AnswerResult, AnswerError> {
        request.check()?;
        let video_id = request.video_id()?;
        let started = Instant::now();
        let truth = self
            .truths
            .get(video_id)
            .ok_or_else(|| AnswerError::MissingTruth(video_id.to_string()))?;
        let q = &request.question;
        let answer = truth_answer(&q.text, q.kind, q.segment, truth).ok_or_else(|| {
            AnswerError::MissingSegment {
                video_id: video_id.to_string(),
                segment: q.segment,
            }
        })?;
        finish(self.tag(), self.clock, request, started, &answer.render())
    }
}

#[derive(Debug, Default)]
struct RelayEntry {
    question: Option<(Question, Instant)>,
    answer: Option<(String, Instant)>,
    detached: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RelayError {
    #[error("unknown session {0:?}")]
    UnknownSession(String),
    #[error("no question is pending")]
    NoPendingQuestion,
    #[error("answer must not be empty")]
    EmptyAnswer,
}

/// Rendezvous between a session waiting for a human answer and the API
/// request that delivers it. Holds at most one pending question per session.
#[derive(Debug, Default)]
pub struct HumanRelay {
    entries: Mutex<HashMap<String, RelayEntry>>,
    changed: Condvar,
}

impl HumanRelay {
    #[must_use]
    pub fn new() -> Self {
        Self::default()
    }

    pub fn attach(&self, session_id: &str) {
        let mut entries = self.entries.lock().expect("relay lock");
        entries.insert(session_id.to_string(), RelayEntry::default());
    }

    /// Forget the session and wake anyone waiting on it.
    pub fn detach(&self, session_id: &str) {
        let mut entries = self.entries.lock().expect("relay lock");
        if let Some(entry) = entries.get_mut(session_id) {
            entry.detached = true;
        }
        self.changed.notify_all();
    }

    pub fn remove(&self, session_id: &str) {
        self.entries.lock().expect("relay lock").remove(session_id);
        self.changed.notify_all();
    }

    /// Publish a question; fails if one is already pending.
    pub fn post(&self, session_id: &str, question: Question) -> Result<(), AnswerError> {
        let mut entries = self.entries.lock().expect("relay lock");
        let entry = entries
            .get_mut(session_id)
            .ok_or_else(|| AnswerError::NotAttached(session_id.to_string()))?;
        if entry.question.is_some() {
            return Err(AnswerError::AlreadyPending(session_id.to_string()));
        }
        entry.detached = false;
        entry.answer = None;
        entry.question = Some((question, Instant::now()));
        self.changed.notify_all();
        Ok(())
    }

    #[must_use]
    pub fn pending(&self, session_id: &str) -> Option<Question> {
        let entries = self.entries.lock().expect("relay lock");
        entries
            .get(session_id)
            .and_then(|e| e.question.as_ref().map(|(q, _)| q.clone()))
    }

    /// Block until a question is posted for the session, or `timeout` passes.
    #[must_use]
    pub fn wait_for_question(&self, session_id: &str, timeout: Duration) -> Option<Question> {
        let deadline = Instant::now() + timeout;
        let mut entries = self.entries.lock().expect("relay lock");
        loop {
            match entries.get(session_id) {
                None => return None,
                Some(e) if e.detached => return None,
                Some(RelayEntry {
                    question: Some((q, _)),
                    ..
                }) => return Some(q.clone()),
                Some(_) => {}
            }
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            entries = self
                .changed
                .wait_timeout(entries, deadline - now)
                .expect("relay lock")
                .0;
        }
    }

    /// Deliver the human's answer. Empty answers are refused and the question
    /// stays pending.
    pub fn submit(&self, session_id: &str, answer: &str) -> Result<(), RelayError> {
        let mut entries = self.entries.lock().expect("relay lock");
        let entry = entries
            .get_mut(session_id)
            .ok_or_else(|| RelayError::UnknownSession(session_id.to_string()))?;
        if entry.question.is_none() || entry.answer.is_some() {
            return Err(RelayError::NoPendingQuestion);
        }
        if answer.trim().is_empty() {
            return Err(RelayError::EmptyAnswer);
        }
        entry.answer = Some((answer.to_string(), Instant::now()));
        self.changed.notify_all();
        Ok(())
    }

    /// Wait for the answer to the pending question. Returns the answer and the
    /// time from posting to submission. Clears the pending question.
    pub fn await_answer(
        &self,
        session_id: &str,
        deadline: Duration,
    ) -> Result<(String, Duration), AnswerError> {
        let started = Instant::now();
        let mut entries = self.entries.lock().expect("relay lock");
        loop {
            let entry = entries
                .get_mut(session_id)
                .ok_or_else(|| AnswerError::NotAttached(session_id.to_string()))?;
            if entry.detached {
                entry.question = None;
                return Err(AnswerError::Detached(session_id.to_string()));
            }
            if let Some((answer, answered_at)) = entry.answer.take() {
                let posted_at = entry
                    .question
                    .take()
                    .map_or(started, |(_, posted_at)| posted_at);
                return Ok((answer, answered_at.saturating_duration_since(posted_at)));
            }
            let elapsed = started.elapsed();
            if elapsed >= deadline {
                entry.question = None;
                return Err(AnswerError::DeadlineExceeded { deadline, elapsed });
            }
            entries = self
                .changed
                .wait_timeout(entries, deadline - elapsed)
                .expect("relay lock")
                .0;
        }
    }
}

/// Relays questions to a person through a [`HumanRelay`].
pub struct HumanAnswerer {
    relay: Arc<HumanRelay>,
}

impl HumanAnswerer {
    pub fn new(relay: Arc<HumanRelay>) -> Self {
        Self { relay }
    }
}

impl AnswerProvider for HumanAnswerer {
    fn tag(&self) -> ProviderTag {
        ProviderTag::Human
    }

    fn answer(&self, request: &AnswerRequest) -> Result<AnswerResult, AnswerError> {
        request.check()?;
        let AnswerSubject::Session(session_id) = &request.subject else {
            return Err(AnswerError::WrongSubject);
        };
        self.relay.post(session_id, request.question.clone())?;
        let (answer, latency) = self.relay.await_answer(session_id, request.deadline)?;
        Ok(AnswerResult {
            answer: normalize_answer(&answer)?,
            latency,
            provider: ProviderTag::Human,
        })
    }
}
