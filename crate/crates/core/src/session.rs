//! The interaction loop: propose a question, obtain an answer, fold it into
//! the query and rank again.
//!
//! A [`Session`] is a single-writer state machine. [`Session::commit`] works
//! on copies and only swaps them in once ranking has succeeded, so a failed
//! round leaves the session untouched.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::{
    AnswerError, AnswerProvider, AnswerRequest, AnswerResult, ProviderTag, DEFAULT_DEADLINE,
    HUMAN_DEADLINE,
};
use crate::corpus::{normalize, EmbeddingMatrix};
use crate::gateway::{GatewayError, ModelGateway};
use crate::heuristic::{plan_initial, HeuristicError, QuestionPlan, MAX_QUESTIONS};
use crate::lexicon::ObjectLexicon;
use crate::parametric::{
    CaptionCache, ParametricError, ParametricKind, ParametricPlan, ProposalContext,
    DEFAULT_CAPTION_K,
};
use crate::question::Question;
use crate::ranking::{
    rank_aggregate, rank_cosine, rank_of, rerank_itm, similarity_aggregate, RankedList,
    RankingError,
};

pub const SESSION_SCHEMA: &str = "iviq-session/1";
pub const SEPARATOR: &str = " [SEP] ";
pub const ROUND_CAP: usize = 10;
pub const DEFAULT_RERANK_K: usize = 128;
pub const DEFAULT_TOP_N: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Heuristic,
    AutoText,
    AutoTextVid,
}

impl GeneratorKind {
    #[must_use]
    pub const fn as_str(self) -> &'static str {
        match self {
            GeneratorKind::Heuristic => "heuristic",
            GeneratorKind::AutoText => "auto_text",
            GeneratorKind::AutoTextVid => "auto_text_vid",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComposerStrategy {
    #[default]
    ConcatSep,
    SimilarityAggregation,
    RankAggregation,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FragmentStyle {
    #[default]
    QuestionPlusAnswer,
    AnswerOnly,
}

/// Ask Segment and Ask Object.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augmentations {
    pub ask_segment: bool,
    pub ask_object: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub generator: GeneratorKind,
    pub composer: ComposerStrategy,
    pub fragment_style: FragmentStyle,
    /// `None` means 6 for the heuristic generator and 10 otherwise.
    pub max_rounds: Option<usize>,
    pub rerank: bool,
    /// Rerank window; clamped to the gallery size.
    pub rerank_k: usize,
    pub caption_k: usize,
    pub augmentations: Augmentations,
    /// Round that carries the inventory question for parametric generators.
    pub ao_round: usize,
    pub answerer: ProviderTag,
    /// `None` means 30 s, or 300 s for human answerers.
    pub answer_deadline_secs: Option<f64>,
    pub top_n: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorKind::Heuristic,
            composer: ComposerStrategy::ConcatSep,
            fragment_style: FragmentStyle::QuestionPlusAnswer,
            max_rounds: None,
            rerank: true,
            rerank_k: DEFAULT_RERANK_K,
            caption_k: DEFAULT_CAPTION_K,
            augmentations: Augmentations::default(),
            ao_round: 1,
            answerer: ProviderTag::VideoQa,
            answer_deadline_secs: None,
            top_n: DEFAULT_TOP_N,
        }
    }
}

impl SessionConfig {
    #[must_use]
    pub fn max_rounds(&self) -> usize {
        self.max_rounds.unwrap_or(match self.generator {
            GeneratorKind::Heuristic => MAX_QUESTIONS,
            _ => ROUND_CAP,
        })
    }

    #[must_use]
    pub fn answer_deadline(&self) -> Duration {
        match self.answer_deadline_secs {
            Some(secs) if secs > 0.0 && secs.is_finite() => Duration::from_secs_f64(secs),
            _ if self.answerer == ProviderTag::Human => HUMAN_DEADLINE,
            _ => DEFAULT_DEADLINE,
        }
    }

    /// Every problem with the config, not just the first.
    #[must_use]
    pub fn problems(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.caption_k == 0 {
            problems.push("caption_k must be at least 1".to_string());
        }
        if let Some(n) = self.max_rounds {
            if n > ROUND_CAP {
                problems.push(format!("max_rounds {n} exceeds the cap of {ROUND_CAP}"));
            }
        }
        if self.rerank_k == 0 {
            problems.push("rerank_k must be at least 1".to_string());
        }
        if self.ao_round == 0 {
            problems.push("ao_round must be at least 1".to_string());
        }
        if self.top_n == 0 {
            problems.push("top_n must be at least 1".to_string());
        }
        if let Some(secs) = self.answer_deadline_secs {
            if !(secs > 0.0 && secs.is_finite()) {
                problems.push(format!("answer_deadline_secs {secs} must be positive"));
            }
        }
        problems
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SessionError::InvalidConfig(problems))
        }
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("initial query is empty")]
    EmptyQuery,
    #[error("invalid session config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("{0}")]
    Capability(String),
    #[error("target video {0:?} is not in the index")]
    UnknownTarget(String),
    #[error("embedding the query failed: {0}")]
    Embed(#[source] GatewayError),
    #[error("query embedding is degenerate")]
    DegenerateQuery,
    #[error(transparent)]
    Ranking(#[from] RankingError),
    #[error(transparent)]
    Question(#[from] ParametricError),
    #[error(transparent)]
    Plan(#[from] HeuristicError),
    #[error(transparent)]
    Answer(#[from] AnswerError),
    #[error("answer is empty")]
    EmptyAnswer,
    #[error("proposal for round {got} does not match the session at round {expected}")]
    StaleProposal { expected: usize, got: usize },
    #[error("session has no more questions")]
    Exhausted,
    #[error("replay diverged at round {round}: {detail}")]
    ReplayMismatch { round: usize, detail: String },
    #[error("malformed session record: {0}")]
    Record(String),
}

/// `question + " " + trimmed answer`.
pub fn compose_fragment(question: &Question, answer: &str) -> Result<String, SessionError> {
    let answer = answer.trim();
    if answer.is_empty() {
        return Err(SessionError::EmptyAnswer);
    }
    Ok(format!("{} {answer}", question.text))
}

fn fragment_for(style: FragmentStyle, question: &Question, answer: &str) -> Result<String, SessionError> {
    match style {
        FragmentStyle::QuestionPlusAnswer => compose_fragment(question, answer),
        FragmentStyle::AnswerOnly => {
            let answer = answer.trim();
            if answer.is_empty() {
                Err(SessionError::EmptyAnswer)
            } else {
                Ok(answer.to_string())
            }
        }
    }
}

/// The evolving query: initial text plus one fragment per completed round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryState {
    pub initial: String,
    pub fragments: Vec<String>,
    pub composed: String,
}

impl QueryState {
    pub fn new(initial: impl Into<String>) -> Self {
        let initial = initial.into();
        Self {
            composed: initial.clone(),
            initial,
            fragments: Vec::new(),
        }
    }

    /// Human-dialogue baseline: the initial query followed by answers alone.
    pub fn from_answers<S: AsRef<str>>(initial: impl Into<String>, answers: &[S]) -> Self {
        let mut state = Self::new(initial);
        for a in answers {
            let a = a.as_ref().trim();
            if !a.is_empty() {
                state.push(a.to_string());
            }
        }
        state
    }

    pub fn push(&mut self, fragment: String) {
        self.fragments.push(fragment);
        self.composed = self.recompose();
    }

    /// Initial query and fragments joined with `" [SEP] "`.
    #[must_use]
    pub fn recompose(&self) -> String {
        let mut s = self.initial.clone();
        for f in &self.fragments {
            s.push_str(SEPARATOR);
            s.push_str(f);
        }
        s
    }

    pub fn pieces(&self) -> impl Iterator<Item = &str> + '_ {
        std::iter::once(self.initial.as_str()).chain(self.fragments.iter().map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueRound {
    pub round_index: usize,
    pub question: Question,
    pub answer: String,
    pub generator: GeneratorKind,
    pub answer_provider: ProviderTag,
    /// Seconds.
    pub answer_latency: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundSnapshot {
    pub round: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_rank: Option<usize>,
    pub top: Vec<String>,
}

/// Serializable log of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub schema: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_video_id: Option<String>,
    pub config: SessionConfig,
    pub query: QueryState,
    pub rounds: Vec<DialogueRound>,
    /// Round 0 plus one entry per completed round.
    pub trajectory: Vec<RoundSnapshot>,
}

impl SessionRecord {
    #[must_use]
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("session record serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SessionError> {
        let record: Self =
            serde_json::from_str(text).map_err(|e| SessionError::Record(e.to_string()))?;
        if record.schema != SESSION_SCHEMA {
            return Err(SessionError::Record(format!(
                "unsupported schema {:?}",
                record.schema
            )));
        }
        if record.trajectory.len() != record.rounds.len() + 1 {
            return Err(SessionError::Record(format!(
                "{} rounds but {} trajectory entries",
                record.rounds.len(),
                record.trajectory.len()
            )));
        }
        Ok(record)
    }

    /// Target ranks per round, when a target is attached.
    #[must_use]
    pub fn target_ranks(&self) -> Vec<usize> {
        self.trajectory.iter().filter_map(|s| s.target_rank).collect()
    }
}

/// Shared, read-only resources for sessions over one gallery.
pub struct SessionContext {
    pub index: Arc<EmbeddingMatrix>,
    pub gateway: Arc<dyn ModelGateway>,
    pub lexicon: Arc<ObjectLexicon>,
    pub captions: Arc<CaptionCache>,
    /// Concurrent ITM calls per rerank.
    pub itm_parallelism: usize,
}

impl SessionContext {
    pub fn new(index: Arc<EmbeddingMatrix>, gateway: Arc<dyn ModelGateway>) -> Self {
        Self {
            index,
            gateway,
            lexicon: Arc::new(ObjectLexicon::default()),
            captions: Arc::new(CaptionCache::new()),
            itm_parallelism: 1,
        }
    }

    #[must_use]
    pub fn with_lexicon(mut self, lexicon: Arc<ObjectLexicon>) -> Self {
        self.lexicon = lexicon;
        self
    }

    #[must_use]
    pub fn with_itm_parallelism(mut self, n: usize) -> Self {
        self.itm_parallelism = n.max(1);
        self
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, SessionError> {
        let raw = self.gateway.embed_text(text).map_err(SessionError::Embed)?;
        normalize(&raw).ok_or(SessionError::DegenerateQuery)
    }

    /// Rank the gallery for a query state under a config.
    pub fn rank(&self, config: &SessionConfig, state: &QueryState) -> Result<RankedList, SessionError> {
        let cosine = match config.composer {
            ComposerStrategy::ConcatSep => rank_cosine(&self.embed(&state.composed)?, &self.index)?,
            strategy => {
                let lists = state
                    .pieces()
                    .map(|p| Ok(rank_cosine(&self.embed(p)?, &self.index)?))
                    .collect::<Result<Vec<_>, SessionError>>()?;
                if strategy == ComposerStrategy::SimilarityAggregation {
                    similarity_aggregate(&lists)?
                } else {
                    rank_aggregate(&lists)?
                }
            }
        };
        if !config.rerank {
            return Ok(cosine);
        }
        let k = config.rerank_k.min(cosine.len());
        Ok(rerank_itm(
            &cosine,
            &state.composed,
            k,
            self.gateway.as_ref(),
            self.itm_parallelism,
        )?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum GeneratorState {
    Heuristic(QuestionPlan),
    Parametric(ParametricPlan),
}

/// A question ready to be put to the answerer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    pub round_index: usize,
    pub question: Question,
    pub generator: GeneratorKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepOutcome {
    Advanced(RoundSnapshot),
    Exhausted,
}

#[derive(Debug, Clone)]
pub struct Session {
    record: SessionRecord,
    generator: GeneratorState,
    ranking: RankedList,
}

fn snapshot(round: usize, ranking: &RankedList, target: Option<&str>, top_n: usize) -> Result<RoundSnapshot, SessionError> {
    Ok(RoundSnapshot {
        round,
        target_rank: target.map(|t| rank_of(ranking, t)).transpose()?,
        top: ranking.top_ids(top_n),
    })
}

impl Session {
    /// Validate, rank the initial query, and record round 0.
    pub fn start(
        ctx: &SessionContext,
        initial_query: &str,
        config: SessionConfig,
        target: Option<&str>,
    ) -> Result<Self, SessionError> {
        let initial = initial_query.trim();
        if initial.is_empty() {
            return Err(SessionError::EmptyQuery);
        }
        config.validate()?;
        let gallery = ctx.index.video_count();
        if gallery == 0 {
            return Err(SessionError::Capability("the index holds no videos".into()));
        }
        if config.augmentations.ask_segment && !ctx.index.has_halves() {
            return Err(SessionError::Capability(
                "ask_segment needs half-segment embeddings, which this corpus does not have".into(),
            ));
        }
        if config.generator == GeneratorKind::AutoTextVid && config.caption_k > gallery {
            return Err(SessionError::Capability(format!(
                "caption_k {} exceeds the gallery size {gallery}",
                config.caption_k
            )));
        }
        if let Some(t) = target {
            if !ctx.index.contains_video(t) {
                return Err(SessionError::UnknownTarget(t.to_string()));
            }
        }

        let generator = match config.generator {
            GeneratorKind::Heuristic => {
                GeneratorState::Heuristic(plan_initial(initial, &ctx.lexicon, config.augmentations))
            }
            GeneratorKind::AutoText | GeneratorKind::AutoTextVid => {
                let kind = if config.generator == GeneratorKind::AutoText {
                    ParametricKind::AutoText
                } else {
                    ParametricKind::AutoTextVid
                };
                GeneratorState::Parametric(ParametricPlan::new(
                    kind,
                    config.augmentations.ask_segment,
                    config.augmentations.ask_object,
                    config.ao_round,
                ))
            }
        };
        let query = QueryState::new(initial);
        let ranking = ctx.rank(&config, &query)?;
        let round0 = snapshot(0, &ranking, target, config.top_n)?;
        Ok(Self {
            record: SessionRecord {
                schema: SESSION_SCHEMA.to_string(),
                session_id: None,
                target_video_id: target.map(str::to_string),
                config,
                query,
                rounds: Vec::new(),
                trajectory: vec![round0],
            },
            generator,
            ranking,
        })
    }

    #[must_use]
    pub fn record(&self) -> &SessionRecord {
        &self.record
    }

    #[must_use]
    pub fn into_record(self) -> SessionRecord {
        self.record
    }

    #[must_use]
    pub fn config(&self) -> &SessionConfig {
        &self.record.config
    }

    #[must_use]
    pub fn query(&self) -> &QueryState {
        &self.record.query
    }

    #[must_use]
    pub fn ranking(&self) -> &RankedList {
        &self.ranking
    }

    #[must_use]
    pub fn rounds_completed(&self) -> usize {
        self.record.rounds.len()
    }

    pub fn set_session_id(&mut self, id: impl Into<String>) {
        self.record.session_id = Some(id.into());
    }

    /// Next question, or `None` when the session is over. Does not change the
    /// session.
    pub fn propose(&self, ctx: &SessionContext) -> Result<Option<Proposal>, SessionError> {
        let round = self.rounds_completed() + 1;
        if round > self.config().max_rounds() {
            return Ok(None);
        }
        let question = match &self.generator {
            GeneratorState::Heuristic(plan) => match plan.peek() {
                Some(q) => q.clone(),
                None => return Ok(None),
            },
            GeneratorState::Parametric(plan) => plan.propose(&ProposalContext {
                round,
                query: &self.record.query.composed,
                ranking: &self.ranking,
                caption_k: self.config().caption_k,
                gateway: ctx.gateway.as_ref(),
                cache: Some(&ctx.captions),
            })?,
        };
        Ok(Some(Proposal {
            round_index: round,
            question,
            generator: self.config().generator,
        }))
    }

    /// The request an answerer needs for a proposal: the target video in
    /// simulation, the session id otherwise.
    #[must_use]
    pub fn answer_request(&self, proposal: &Proposal) -> AnswerRequest {
        let deadline = self.config().answer_deadline();
        match (&self.record.target_video_id, &self.record.session_id) {
            (Some(target), _) if self.config().answerer != ProviderTag::Human => {
                AnswerRequest::for_video(target, proposal.question.clone(), deadline)
            }
            (_, Some(id)) => AnswerRequest::for_session(id, proposal.question.clone(), deadline),
            (Some(target), None) => {
                AnswerRequest::for_video(target, proposal.question.clone(), deadline)
            }
            (None, None) => AnswerRequest::for_session("", proposal.question.clone(), deadline),
        }
    }

    /// Complete the proposed round with an answer. All-or-nothing.
    pub fn commit(
        &mut self,
        ctx: &SessionContext,
        proposal: &Proposal,
        answer: &AnswerResult,
    ) -> Result<RoundSnapshot, SessionError> {
        let expected = self.rounds_completed() + 1;
        if proposal.round_index != expected {
            return Err(SessionError::StaleProposal {
                expected,
                got: proposal.round_index,
            });
        }
        let config = &self.record.config;
        let fragment = fragment_for(config.fragment_style, &proposal.question, &answer.answer)?;

        let mut generator = self.generator.clone();
        match &mut generator {
            GeneratorState::Heuristic(plan) => {
                if plan.peek() != Some(&proposal.question) {
                    return Err(SessionError::StaleProposal {
                        expected,
                        got: proposal.round_index,
                    });
                }
                let q = plan.emit().expect("peeked above");
                plan.on_answer(&q, &answer.answer, &ctx.lexicon)?;
            }
            GeneratorState::Parametric(plan) => plan.advance(&proposal.question),
        }

        let mut query = self.record.query.clone();
        query.push(fragment);
        let ranking = ctx.rank(config, &query)?;
        let snap = snapshot(
            expected,
            &ranking,
            self.record.target_video_id.as_deref(),
            config.top_n,
        )?;

        self.record.rounds.push(DialogueRound {
            round_index: expected,
            question: proposal.question.clone(),
            answer: answer.answer.trim().to_string(),
            generator: proposal.generator,
            answer_provider: answer.provider,
            answer_latency: answer.latency.as_secs_f64(),
        });
        self.record.query = query;
        self.record.trajectory.push(snap.clone());
        self.generator = generator;
        self.ranking = ranking;
        Ok(snap)
    }

    /// One full round: question, answer, recompose, rank.
    pub fn step(
        &mut self,
        ctx: &SessionContext,
        answerer: &dyn AnswerProvider,
    ) -> Result<StepOutcome, SessionError> {
        let Some(proposal) = self.propose(ctx)? else {
            return Ok(StepOutcome::Exhausted);
        };
        let answer = answerer.answer(&self.answer_request(&proposal))?;
        self.commit(ctx, &proposal, &answer).map(StepOutcome::Advanced)
    }

    /// Step until the generator or the round budget runs out.
    pub fn run(&mut self, ctx: &SessionContext, answerer: &dyn AnswerProvider) -> Result<(), SessionError> {
        while let StepOutcome::Advanced(_) = self.step(ctx, answerer)? {}
        Ok(())
    }
}

/// Recompute every composed query and ranking of a record and compare them
/// with what was logged.
pub fn replay(ctx: &SessionContext, record: &SessionRecord) -> Result<(), SessionError> {
    let config = &record.config;
    let target = record.target_video_id.as_deref();
    if record.trajectory.len() != record.rounds.len() + 1 {
        return Err(SessionError::Record(format!(
            "{} rounds but {} trajectory entries",
            record.rounds.len(),
            record.trajectory.len()
        )));
    }
    let mut state = QueryState::new(record.query.initial.clone());
    let check = |round: usize, state: &QueryState| -> Result<(), SessionError> {
        let ranking = ctx.rank(config, state)?;
        let got = snapshot(round, &ranking, target, config.top_n)?;
        if got != record.trajectory[round] {
            return Err(SessionError::ReplayMismatch {
                round,
                detail: format!("logged {:?}, recomputed {:?}", record.trajectory[round], got),
            });
        }
        Ok(())
    };
    check(0, &state)?;
    for (i, round) in record.rounds.iter().enumerate() {
        state.push(fragment_for(config.fragment_style, &round.question, &round.answer)?);
        if record.query.fragments.get(i) != state.fragments.last() {
            return Err(SessionError::ReplayMismatch {
                round: i + 1,
                detail: "fragment differs from the logged one".into(),
            });
        }
        check(i + 1, &state)?;
    }
    if state != record.query {
        return Err(SessionError::ReplayMismatch {
            round: record.rounds.len(),
            detail: format!("composed {:?} vs logged {:?}", state.composed, record.query.composed),
        });
    }
    Ok(())
}
