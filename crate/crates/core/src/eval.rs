//! Batch experiments: one session per evaluation caption, per-round R@K and
//! median rank, latency statistics, and the answer-timing study.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::{
    AnswerProvider, AnswerRequest, CapLmAnswerer, LatencyClock, ProviderTag, ScriptedAnswerer,
    VideoQaAnswerer,
};
use crate::corpus::{AttributeTruth, CorpusManifest};
use crate::gateway::{ModelGateway, ProviderDescriptor};
use crate::hashing::SplitMix64;
use crate::heuristic::plan_initial;
use crate::lexicon::ObjectLexicon;
use crate::ranking::rank_of;
use crate::session::{QueryState, Session, SessionConfig, SessionContext, SessionRecord};

pub const REPORT_SCHEMA: &str = "iviq-report/1";
pub const CSV_HEADER: &str = "round,R1,R5,R10,MdR";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no ranks to summarise")]
    EmptyRanks,
    #[error("rank {rank} is outside 1..={corpus_size}")]
    RankOutOfRange { rank: usize, corpus_size: usize },
    #[error("invalid experiment config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("the {0} answerer cannot run unattended")]
    UnattendedHuman(ProviderTag),
    #[error("the manifest has no evaluation captions")]
    NoCaptions,
    #[error("the timing study needs at least one provider")]
    NoProviders,
    #[error("sample of {sample_n} exceeds the {available} captioned videos")]
    SampleTooLarge { sample_n: usize, available: usize },
    #[error("reading config {path}: {message}")]
    Config { path: String, message: String },
    #[error("I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Session(#[from] crate::session::SessionError),
}

/// R@1/5/10 in percent and the median rank for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub round: usize,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub median_rank: f64,
}

fn median(sorted: &[usize]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    }
}

/// Summarise target ranks. Even counts take the mean of the two middle ranks.
pub fn compute_metrics(round: usize, ranks: &[usize], corpus_size: usize) -> Result<MetricsSnapshot, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::EmptyRanks);
    }
    if let Some(&rank) = ranks.iter().find(|&&r| r == 0 || r > corpus_size) {
        return Err(EvalError::RankOutOfRange { rank, corpus_size });
    }
    let n = ranks.len() as f64;
    let recall = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    Ok(MetricsSnapshot {
        round,
        recall_at_1: recall(1),
        recall_at_5: recall(5),
        recall_at_10: recall(10),
        median_rank: median(&sorted),
    })
}

fn default_parallelism() -> usize {
    1
}

fn default_clock() -> LatencyClock {
    LatencyClock::Null
}

/// Everything that shapes an experiment, as read from the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub session: SessionConfig,
    /// Sessions run concurrently; the report does not depend on it.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// `null` keeps reports byte-reproducible; `wall` records real latencies.
    #[serde(default = "default_clock")]
    pub clock: LatencyClock,
    /// Evaluate only the first `limit` captions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            session: SessionConfig::default(),
            parallelism: default_parallelism(),
            clock: default_clock(),
            limit: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, EvalError> {
        let config: Self = toml::from_str(text).map_err(|e| EvalError::Config {
            path: "<inline>".into(),
            message: e.to_string(),
        })?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| EvalError::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    #[must_use]
    pub fn problems(&self) -> Vec<String> {
        let mut problems = self.session.problems();
        if self.parallelism == 0 {
            problems.push("parallelism must be at least 1".into());
        }
        if self.session.answerer == ProviderTag::Human {
            problems.push("experiments cannot use the human answerer".into());
        }
        problems
    }
}

/// Build the unattended answerer named by `tag`.
pub fn answerer_for(
    tag: ProviderTag,
    gateway: Arc<dyn ModelGateway>,
    truths: Arc<BTreeMap<String, AttributeTruth>>,
    clock: LatencyClock,
) -> Result<Box<dyn AnswerProvider>, EvalError> {
    Ok(match tag {
        ProviderTag::VideoQa => Box::new(VideoQaAnswerer::new(gateway, clock)),
        ProviderTag::CapLm => Box::new(CapLmAnswerer::new(gateway, clock)),
        ProviderTag::Scripted => Box::new(ScriptedAnswerer::new(truths, clock)),
        ProviderTag::Human => return Err(EvalError::UnattendedHuman(tag)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub name: String,
    pub videos: usize,
    pub dimension: usize,
    pub provider: ProviderDescriptor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTrajectory {
    pub video_id: String,
    pub rounds_completed: usize,
    /// Target rank after each round, starting at round 0.
    pub ranks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionFailure {
    pub video_id: String,
    pub round: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStat {
    pub provider: ProviderTag,
    pub answers: usize,
    pub mean_secs: f64,
    pub total_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema: String,
    pub corpus: CorpusSummary,
    pub config: ExperimentConfig,
    /// Rerank window actually used: the configured K clamped to the gallery.
    pub effective_rerank_k: Option<usize>,
    pub sessions: usize,
    pub failure_count: usize,
    pub failures: Vec<SessionFailure>,
    /// One snapshot per round, 0 through the last round any session reached.
    /// Sessions that stopped early keep their last rank.
    pub metrics: Vec<MetricsSnapshot>,
    pub trajectories: Vec<SessionTrajectory>,
    pub latency: Vec<LatencyStat>,
}

impl ExperimentReport {
    #[must_use]
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Per-round table: `round,R1,R5,R10,MdR`.
    #[must_use]
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for m in &self.metrics {
            let _ = writeln!(
                out,
                "{},{:.2},{:.2},{:.2},{}",
                m.round, m.recall_at_1, m.recall_at_5, m.recall_at_10, m.median_rank
            );
        }
        out
    }

    #[must_use]
    pub fn final_metrics(&self) -> Option<&MetricsSnapshot> {
        self.metrics.last()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Write a report in one format.
pub fn emit_report(report: &ExperimentReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<(), EvalError> {
    let path = path.as_ref();
    let body = match format {
        ReportFormat::Json => report.to_json(),
        ReportFormat::Csv => report.to_csv(),
    };
    std::fs::write(path, body).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

struct SessionOutcome {
    video_id: String,
    record: Option<SessionRecord>,
    failure: Option<SessionFailure>,
}

fn run_one(
    ctx: &SessionContext,
    config: &SessionConfig,
    answerer: &dyn AnswerProvider,
    video_id: &str,
    query: &str,
) -> SessionOutcome {
    let fail = |round: usize, e: &dyn std::fmt::Display| SessionFailure {
        video_id: video_id.to_string(),
        round,
        message: e.to_string(),
    };
    let mut session = match Session::start(ctx, query, config.clone(), Some(video_id)) {
        Ok(s) => s,
        Err(e) => {
            return SessionOutcome {
                video_id: video_id.to_string(),
                record: None,
                failure: Some(fail(0, &e)),
            }
        }
    };
    let failure = session
        .run(ctx, answerer)
        .err()
        .map(|e| fail(session.rounds_completed() + 1, &e));
    SessionOutcome {
        video_id: video_id.to_string(),
        record: Some(session.into_record()),
        failure,
    }
}

/// Run one session per evaluation caption, in manifest order.
///
/// Returns the report and the session records of every session that started.
pub fn run_experiment(
    manifest: &CorpusManifest,
    ctx: &SessionContext,
    config: &ExperimentConfig,
) -> Result<(ExperimentReport, Vec<SessionRecord>), EvalError> {
    let problems = config.problems();
    if !problems.is_empty() {
        return Err(EvalError::InvalidConfig(problems));
    }
    let captions = &manifest.captions[..config.limit.unwrap_or(usize::MAX).min(manifest.captions.len())];
    if captions.is_empty() {
        return Err(EvalError::NoCaptions);
    }
    let answerer = answerer_for(
        config.session.answerer,
        ctx.gateway.clone(),
        Arc::new(manifest.truths()),
        config.clock,
    )?;

    let run = |c: &crate::corpus::EvalCaption| {
        run_one(ctx, &config.session, answerer.as_ref(), &c.video_id, &c.query)
    };
    let outcomes: Vec<SessionOutcome> = if config.parallelism <= 1 {
        captions.iter().map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.parallelism)
            .build()
            .expect("thread pool");
        pool.install(|| captions.par_iter().map(run).collect())
    };

    let corpus_size = ctx.index.video_count();
    let mut trajectories = Vec::new();
    let mut failures = Vec::new();
    let mut records = Vec::new();
    let mut latencies: BTreeMap<ProviderTag, Vec<f64>> = BTreeMap::new();
    for o in outcomes {
        if let Some(f) = o.failure {
            failures.push(f);
        }
        let Some(record) = o.record else { continue };
        for r in &record.rounds {
            latencies.entry(r.answer_provider).or_default().push(r.answer_latency);
        }
        trajectories.push(SessionTrajectory {
            video_id: o.video_id,
            rounds_completed: record.rounds.len(),
            ranks: record.target_ranks(),
        });
        records.push(record);
    }

    let last_round = trajectories.iter().map(|t| t.ranks.len()).max().unwrap_or(0);
    let metrics = (0..last_round)
        .map(|round| {
            let ranks: Vec<usize> = trajectories
                .iter()
                .map(|t| t.ranks[round.min(t.ranks.len() - 1)])
                .collect();
            compute_metrics(round, &ranks, corpus_size)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let latency = latencies
        .into_iter()
        .map(|(provider, secs)| {
            let total: f64 = secs.iter().sum();
            LatencyStat {
                provider,
                answers: secs.len(),
                mean_secs: total / secs.len() as f64,
                total_secs: total,
            }
        })
        .collect();

    let report = ExperimentReport {
        schema: REPORT_SCHEMA.to_string(),
        corpus: CorpusSummary {
            name: manifest.name.clone(),
            videos: corpus_size,
            dimension: manifest.dimension,
            provider: manifest.provider.clone(),
        },
        config: config.clone(),
        effective_rerank_k: config
            .session
            .rerank
            .then(|| config.session.rerank_k.min(corpus_size)),
        sessions: trajectories.len(),
        failure_count: failures.len(),
        failures,
        metrics,
        trajectories,
        latency,
    };
    Ok((report, records))
}

/// Baseline that appends each caption's human dialogue answers to the initial
/// query, without questions. Returns round-0 and final metrics.
pub fn human_dialog_baseline(
    manifest: &CorpusManifest,
    ctx: &SessionContext,
    config: &SessionConfig,
) -> Result<(MetricsSnapshot, MetricsSnapshot), EvalError> {
    if manifest.captions.is_empty() {
        return Err(EvalError::NoCaptions);
    }
    let corpus_size = ctx.index.video_count();
    let mut before = Vec::new();
    let mut after = Vec::new();
    for c in &manifest.captions {
        let initial = QueryState::new(c.query.clone());
        let answers: Vec<&str> = c.dialog.iter().map(|t| t.answer.as_str()).collect();
        let full = QueryState::from_answers(c.query.clone(), &answers);
        for (state, ranks) in [(&initial, &mut before), (&full, &mut after)] {
            let ranking = ctx.rank(config, state)?;
            ranks.push(rank_of(&ranking, &c.video_id).map_err(crate::session::SessionError::from)?);
        }
    }
    Ok((
        compute_metrics(0, &before, corpus_size)?,
        compute_metrics(1, &after, corpus_size)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub provider: ProviderTag,
    pub answers: usize,
    pub errors: usize,
    pub mean_secs: f64,
    pub total_secs: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub error_messages: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingTable {
    pub sample_n: usize,
    pub seed: u64,
    pub video_ids: Vec<String>,
    pub rows: Vec<TimingRow>,
}

impl TimingTable {
    #[must_use]
    pub fn row(&self, provider: ProviderTag) -> Option<&TimingRow> {
        self.rows.iter().find(|r| r.provider == provider)
    }

    #[must_use]
    pub fn to_csv(&self) -> String {
        let mut out = String::from("provider,answers,errors,mean_secs,total_secs\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.4},{:.4}",
                r.provider, r.answers, r.errors, r.mean_secs, r.total_secs
            );
        }
        out
    }
}

/// Mean wall-clock time per answer for each provider over a seeded sample of
/// captioned videos, asking each video the heuristic planner's questions.
pub fn timing_study(
    manifest: &CorpusManifest,
    gateway: Arc<dyn ModelGateway>,
    sample_n: usize,
    providers: &[ProviderTag],
    seed: u64,
) -> Result<TimingTable, EvalError> {
    if providers.is_empty() {
        return Err(EvalError::NoProviders);
    }
    let available = manifest.captions.len();
    if sample_n == 0 || sample_n > available {
        return Err(EvalError::SampleTooLarge { sample_n, available });
    }
    let mut order: Vec<usize> = (0..available).collect();
    SplitMix64::new(seed).shuffle(&mut order);
    let sample: Vec<_> = order[..sample_n].iter().map(|&i| &manifest.captions[i]).collect();

    let lexicon = ObjectLexicon::default();
    let truths = Arc::new(manifest.truths());
    let mut rows = Vec::with_capacity(providers.len());
    for &tag in providers {
        let answerer = answerer_for(tag, gateway.clone(), truths.clone(), LatencyClock::Wall)?;
        let mut secs = Vec::new();
        let mut errors = Vec::new();
        for caption in &sample {
            let mut plan = plan_initial(&caption.query, &lexicon, Default::default());
            while let Some(q) = plan.emit() {
                let request = AnswerRequest::for_video(&caption.video_id, q, Duration::from_secs(30));
                match answerer.answer(&request) {
                    Ok(result) => secs.push(result.latency.as_secs_f64()),
                    Err(e) => errors.push(format!("{}: {e}", caption.video_id)),
                }
            }
        }
        let total: f64 = secs.iter().sum();
        rows.push(TimingRow {
            provider: tag,
            answers: secs.len(),
            errors: errors.len(),
            mean_secs: if secs.is_empty() { 0.0 } else { total / secs.len() as f64 },
            total_secs: total,
            error_messages: errors,
        });
    }
    Ok(TimingTable {
        sample_n,
        seed,
        video_ids: sample.iter().map(|c| c.video_id.clone()).collect(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_ranks() {
        let m = compute_metrics(0, &[1, 5, 12], 100).unwrap();
        assert!((m.recall_at_1 - 100.0 / 3.0).abs() < 1e-9);
        assert!((m.recall_at_5 - 200.0 / 3.0).abs() < 1e-9);
        assert!((m.recall_at_10 - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(m.median_rank, 5.0);
    }

    #[test]
    fn even_count_median() {
        assert_eq!(compute_metrics(0, &[5, 6], 10).unwrap().median_rank, 5.5);
        let m = compute_metrics(0, &[1, 1, 1], 10).unwrap();
        assert_eq!((m.recall_at_1, m.median_rank), (100.0, 1.0));
    }

    #[test]
    fn bad_ranks() {
        assert!(matches!(compute_metrics(0, &[], 10), Err(EvalError::EmptyRanks)));
        assert!(matches!(
            compute_metrics(0, &[11], 10),
            Err(EvalError::RankOutOfRange { rank: 11, .. })
        ));
    }

    #[test]
    fn config_from_toml() {
        let c = ExperimentConfig::from_toml(
            "parallelism = 4\n[session]\ngenerator = \"auto_text\"\nmax_rounds = 3\n[session.augmentations]\nask_object = true\n",
        )
        .unwrap();
        assert_eq!(c.parallelism, 4);
        assert_eq!(c.session.max_rounds(), 3);
        assert!(c.session.augmentations.ask_object);
        assert_eq!(c.clock, LatencyClock::Null);
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
    }
}
