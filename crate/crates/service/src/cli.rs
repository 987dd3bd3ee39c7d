//! Command-line front end: indexing, simulation, evaluation, timing and the
//! HTTP servers.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, BufRead, Write as _};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use iviq_core::answer::{AnswerError, AnswerProvider, AnswerRequest, AnswerResult, ProviderTag};
use iviq_core::container::{load_index_with_dimension, save_index};
use iviq_core::corpus::{l2_norm, RowKey, UNIT_NORM_TOLERANCE};
use iviq_core::eval::{answerer_for, emit_report, run_experiment, timing_study, ExperimentConfig, ReportFormat};
use iviq_core::gateway::synthetic::WorldSpec;
use iviq_core::gateway::{DelayedGateway, ProviderDescriptor, ProviderKind};
use iviq_core::session::{replay, QueryState, StepOutcome};
use iviq_core::{build_index, load_manifest, open_provider, CorpusManifest, ModelGateway, Session, SessionContext, SessionRecord};
use serde::de::DeserializeOwned;

use crate::{api, models};

#[derive(Debug, Parser)]
#[command(name = "iviq", version, about = "Interactive text-to-video retrieval with question/answer query refinement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build or check the embedding index of a corpus.
    Index {
        #[command(subcommand)]
        action: IndexAction,
    },
    /// Run one session and print the dialogue.
    Simulate(SimulateArgs),
    /// Run one session per evaluation caption and write a report.
    Eval(EvalArgs),
    /// Measure mean answer latency per answer provider.
    Timing(TimingArgs),
    /// Host the session API and the UI bundle.
    Serve(ServeArgs),
    /// Serve the corpus provider over the model wire protocol.
    ServeModels(ServeModelsArgs),
    /// Write a synthetic corpus manifest.
    World(WorldArgs),
    /// Check that a saved session record reproduces exactly.
    Replay(ReplayArgs),
}

#[derive(Debug, Subcommand)]
pub enum IndexAction {
    /// Embed every video and save the index.
    Build(IndexBuildArgs),
    /// Check a saved index against the manifest.
    Verify(IndexVerifyArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CorpusArgs {
    /// Corpus manifest (JSON).
    #[arg(long, required = true)]
    pub manifest: PathBuf,
    /// Saved index; built in memory when absent.
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// `synthetic`, or the base URL of a model server.
    #[arg(long)]
    pub provider: Option<String>,
    /// Seed of the synthetic provider.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Answer noise rate of the synthetic provider, in [0, 1].
    #[arg(long)]
    pub noise: Option<f64>,
    /// Concurrent provider calls while building the index.
    #[arg(long, default_value_t = 4)]
    pub index_parallelism: usize,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Experiment config (TOML). Flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// heuristic, auto_text or auto_text_vid.
    #[arg(long)]
    pub generator: Option<String>,
    /// videoqa, cap_lm, scripted or human.
    #[arg(long)]
    pub answerer: Option<String>,
    /// concat_sep, similarity_aggregation or rank_aggregation.
    #[arg(long)]
    pub composer: Option<String>,
    #[arg(long)]
    pub max_rounds: Option<usize>,
    #[arg(long)]
    pub rerank_k: Option<usize>,
    /// Rank by cosine similarity only.
    #[arg(long)]
    pub no_rerank: bool,
    /// Ask which objects appear (AO).
    #[arg(long)]
    pub ask_object: bool,
    /// Ask about each half of the video (AS).
    #[arg(long)]
    pub ask_segment: bool,
    /// Sessions run concurrently.
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Evaluate only the first N captions.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct IndexBuildArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Output path; defaults to the manifest path with an `.idx` extension.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IndexVerifyArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Only check ids and norms; skip re-embedding the gallery.
    #[arg(long)]
    pub shallow: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Initial text query.
    #[arg(long)]
    pub query: String,
    /// Target video. Defaults to the video captioned by the query, else the
    /// top-ranked video.
    #[arg(long)]
    pub target: Option<String>,
    /// Write the session record here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Report path; `.csv` writes the per-round table, anything else JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the per-round table here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Write every session record into this directory.
    #[arg(long)]
    pub records: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TimingArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Videos sampled from the evaluation captions.
    #[arg(long, default_value_t = 50)]
    pub sample: usize,
    /// Comma-separated answer providers.
    #[arg(long, default_value = "videoqa,cap_lm")]
    pub providers: String,
    /// Fixed delay added to every model call, in milliseconds.
    #[arg(long)]
    pub delay_ms: Option<u64>,
    /// Table path; `.csv` writes CSV, anything else JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Session defaults come from the `[session]` table.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Built UI bundle to serve at `/`.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    /// Concurrent ITM calls per rerank.
    #[arg(long, default_value_t = 4)]
    pub itm_parallelism: usize,
}

#[derive(Debug, Args)]
pub struct ServeModelsArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 9090)]
    pub port: u16,
    /// Fixed delay added to every model call, in milliseconds.
    #[arg(long)]
    pub delay_ms: Option<u64>,
}

#[derive(Debug, Args)]
pub struct WorldArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub videos: usize,
    /// Answer noise rate of the synthetic provider.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Give every video first- and second-half truth.
    #[arg(long)]
    pub halves: bool,
    /// Evaluation captions use the full template instead of the object only.
    #[arg(long)]
    pub full_captions: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Session record (JSON).
    #[arg(long)]
    pub record: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Index { action } => match action {
            IndexAction::Build(args) => index_build(&args),
            IndexAction::Verify(args) => index_verify(&args),
        },
        Command::Simulate(args) => simulate(&args, &mut io::stdout().lock()),
        Command::Eval(args) => eval(&args),
        Command::Timing(args) => timing(&args),
        Command::Serve(args) => serve(args),
        Command::ServeModels(args) => serve_models(&args),
        Command::World(args) => world(&args),
        Command::Replay(args) => replay_record(&args),
    }
}

fn parse_name<T: DeserializeOwned>(what: &str, name: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(name.to_string()))
        .map_err(|_| anyhow!("unknown {what} {name:?}"))
}

impl CorpusArgs {
    /// Load the manifest and apply the provider flags.
    pub fn manifest(&self) -> Result<CorpusManifest> {
        let mut manifest = load_manifest(&self.manifest)?;
        match self.provider.as_deref() {
            None => {}
            Some("synthetic") => {
                if !matches!(manifest.provider.kind, ProviderKind::Synthetic { .. }) {
                    manifest.provider = ProviderDescriptor::synthetic(0, manifest.dimension);
                }
            }
            Some(url) if url.starts_with("http://") || url.starts_with("https://") => {
                let mut remote = ProviderDescriptor::remote(url, manifest.dimension);
                remote.timeout_secs = manifest.provider.timeout_secs;
                remote.max_concurrency = manifest.provider.max_concurrency;
                manifest.provider = remote;
            }
            Some(other) => bail!("--provider must be `synthetic` or an http(s) URL, not {other:?}"),
        }
        if let ProviderKind::Synthetic { seed, noise_rate } = &mut manifest.provider.kind {
            if let Some(s) = self.seed {
                *seed = s;
            }
            if let Some(n) = self.noise {
                *noise_rate = n;
            }
        } else if self.seed.is_some() || self.noise.is_some() {
            bail!("--seed and --noise apply to the synthetic provider only");
        }
        manifest.validate()?;
        Ok(manifest)
    }

    fn default_index_path(&self) -> PathBuf {
        self.manifest.with_extension("idx")
    }

    /// Open the provider and load or build the index.
    pub fn context(&self, manifest: &CorpusManifest) -> Result<SessionContext> {
        let gateway = open_provider(manifest)?;
        let index = match &self.index {
            Some(path) => {
                let index = load_index_with_dimension(path, manifest.dimension)
                    .with_context(|| format!("loading index {}", path.display()))?;
                let problems = index_problems(manifest, &index);
                if !problems.is_empty() {
                    bail!("index {} does not match the manifest:\n  {}", path.display(), problems.join("\n  "));
                }
                index
            }
            None => build_index(manifest, gateway.as_ref(), self.index_parallelism)?,
        };
        Ok(SessionContext::new(Arc::new(index), gateway))
    }
}

impl ConfigArgs {
    /// The effective experiment config: file, then flags. Every validation
    /// problem is reported at once.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        let s = &mut config.session;
        if let Some(g) = &self.generator {
            s.generator = parse_name("generator", g)?;
        }
        if let Some(a) = &self.answerer {
            s.answerer = parse_name("answerer", a)?;
        }
        if let Some(c) = &self.composer {
            s.composer = parse_name("composer", c)?;
        }
        if self.max_rounds.is_some() {
            s.max_rounds = self.max_rounds;
        }
        if let Some(k) = self.rerank_k {
            s.rerank_k = k;
        }
        if self.no_rerank {
            s.rerank = false;
        }
        s.augmentations.ask_object |= self.ask_object;
        s.augmentations.ask_segment |= self.ask_segment;
        if let Some(p) = self.parallelism {
            config.parallelism = p;
        }
        if self.limit.is_some() {
            config.limit = self.limit;
        }
        Ok(config)
    }
}

fn index_problems(manifest: &CorpusManifest, index: &iviq_core::EmbeddingMatrix) -> Vec<String> {
    let expected: BTreeSet<RowKey> = manifest
        .videos
        .iter()
        .flat_map(|v| manifest.segments().into_iter().map(|s| RowKey::new(v.video_id.as_str(), s)))
        .collect();
    let found: BTreeSet<RowKey> = index.keys().iter().cloned().collect();
    let mut problems: Vec<String> = expected
        .difference(&found)
        .map(|k| format!("missing row {} / {}", k.video_id, k.segment))
        .chain(found.difference(&expected).map(|k| format!("unexpected row {} / {}", k.video_id, k.segment)))
        .collect();
    for (i, key) in index.keys().iter().enumerate() {
        let norm = l2_norm(index.row_at(i));
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            problems.push(format!("row {} / {} has norm {norm}", key.video_id, key.segment));
        }
    }
    problems
}

fn index_build(args: &IndexBuildArgs) -> Result<()> {
    let manifest = args.corpus.manifest()?;
    let gateway = open_provider(&manifest)?;
    let index = build_index(&manifest, gateway.as_ref(), args.corpus.index_parallelism)?;
    let out = args.out.clone().unwrap_or_else(|| args.corpus.default_index_path());
    save_index(&out, &index).with_context(|| format!("writing {}", out.display()))?;
    println!("{} rows ({} videos, dimension {}) -> {}", index.len(), index.video_count(), index.dimension(), out.display());
    Ok(())
}

fn index_verify(args: &IndexVerifyArgs) -> Result<()> {
    let manifest = args.corpus.manifest()?;
    let path = args.corpus.index.clone().unwrap_or_else(|| args.corpus.default_index_path());
    let index = load_index_with_dimension(&path, manifest.dimension)
        .with_context(|| format!("loading index {}", path.display()))?;
    let mut problems = index_problems(&manifest, &index);
    if problems.is_empty() && !args.shallow {
        let gateway = open_provider(&manifest)?;
        let fresh = build_index(&manifest, gateway.as_ref(), args.corpus.index_parallelism)?;
        for (i, key) in index.keys().iter().enumerate() {
            if fresh.row(&key.video_id, key.segment) != Some(index.row_at(i)) {
                problems.push(format!("row {} / {} differs from a fresh embedding", key.video_id, key.segment));
            }
        }
    }
    if !problems.is_empty() {
        bail!("index {} failed verification:\n  {}", path.display(), problems.join("\n  "));
    }
    println!("{}: {} rows OK", path.display(), index.len());
    Ok(())
}

/// Reads answers from a terminal, one line per question.
struct StdinAnswerer {
    input: Mutex<Box<dyn BufRead + Send>>,
}

impl AnswerProvider for StdinAnswerer {
    fn tag(&self) -> ProviderTag {
        ProviderTag::Human
    }

    fn answer(&self, request: &AnswerRequest) -> Result<AnswerResult, AnswerError> {
        let started = Instant::now();
        let mut input = self.input.lock().expect("stdin lock");
        loop {
            print!("  your answer> ");
            let _ = io::stdout().flush();
            let mut line = String::new();
            if input.read_line(&mut line).unwrap_or(0) == 0 {
                return Err(AnswerError::Detached("stdin".into()));
            }
            let answer = line.trim().to_lowercase();
            if !answer.is_empty() {
                return Ok(AnswerResult {
                    answer,
                    latency: started.elapsed(),
                    provider: ProviderTag::Human,
                });
            }
            if started.elapsed() > request.deadline {
                return Err(AnswerError::DeadlineExceeded {
                    deadline: request.deadline,
                    elapsed: started.elapsed(),
                });
            }
        }
    }
}

fn simulate(args: &SimulateArgs, out: &mut dyn io::Write) -> Result<()> {
    let manifest = args.corpus.manifest()?;
    let config = args.config.resolve()?;
    let problems = config.session.problems();
    if !problems.is_empty() {
        bail!("invalid config:\n  {}", problems.join("\n  "));
    }
    let ctx = args.corpus.context(&manifest)?;
    let session_config = config.session.clone();

    let (target, why) = match &args.target {
        Some(t) => (t.clone(), "given"),
        None => match manifest.captions.iter().find(|c| c.query == args.query.trim()) {
            Some(c) => (c.video_id.clone(), "captioned by the query"),
            None => {
                let ranking = ctx.rank(&session_config, &QueryState::new(args.query.trim()))?;
                let top = ranking.entries.first().ok_or_else(|| anyhow!("the gallery is empty"))?;
                (top.video_id.clone(), "top-ranked at round 0")
            }
        },
    };

    let answerer: Box<dyn AnswerProvider> = if session_config.answerer == ProviderTag::Human {
        Box::new(StdinAnswerer {
            input: Mutex::new(Box::new(io::BufReader::new(io::stdin()))),
        })
    } else {
        answerer_for(
            session_config.answerer,
            ctx.gateway.clone(),
            Arc::new(manifest.truths()),
            config.clock,
        )?
    };

    let mut session = Session::start(&ctx, &args.query, session_config, Some(&target))?;
    writeln!(out, "corpus  {} ({} videos)", manifest.name, ctx.index.video_count())?;
    writeln!(out, "target  {target} ({why})")?;
    writeln!(out, "query   {}", session.query().initial)?;
    let rank = |s: &Session| s.record().trajectory.last().and_then(|t| t.target_rank).unwrap_or(0);
    writeln!(out, "round 0: target at rank {}", rank(&session))?;
    loop {
        match session.step(&ctx, answerer.as_ref())? {
            StepOutcome::Exhausted => break,
            StepOutcome::Advanced(snap) => {
                let r = session.record().rounds.last().expect("round just committed");
                writeln!(out, "Q{}: {}", r.round_index, r.question.text)?;
                writeln!(out, "A{}: {}", r.round_index, r.answer)?;
                writeln!(out, "round {}: target at rank {}", snap.round, rank(&session))?;
            }
        }
    }
    writeln!(out, "final   {}", session.query().composed)?;
    if let Some(path) = &args.out {
        fs::write(path, session.record().to_json()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn report_format(path: &Path) -> ReportFormat {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        ReportFormat::Csv
    } else {
        ReportFormat::Json
    }
}

fn eval(args: &EvalArgs) -> Result<()> {
    let manifest = args.corpus.manifest()?;
    let config = args.config.resolve()?;
    let problems = config.problems();
    if !problems.is_empty() {
        bail!("invalid config:\n  {}", problems.join("\n  "));
    }
    let ctx = args.corpus.context(&manifest)?;
    let (report, records) = run_experiment(&manifest, &ctx, &config)?;
    emit_report(&report, &args.out, report_format(&args.out))?;
    if let Some(csv) = &args.csv {
        emit_report(&report, csv, ReportFormat::Csv)?;
    }
    if let Some(dir) = &args.records {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (i, record) in records.iter().enumerate() {
            let name = match &record.target_video_id {
                Some(id) => format!("{i:05}-{id}.json"),
                None => format!("{i:05}.json"),
            };
            let path = dir.join(name);
            fs::write(&path, record.to_json()).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    if let (Some(first), Some(last)) = (report.metrics.first(), report.final_metrics()) {
        eprintln!(
            "{} sessions, {} failed; R@1 {:.2} -> {:.2}, MdR {} -> {}",
            report.sessions, report.failure_count, first.recall_at_1, last.recall_at_1, first.median_rank, last.median_rank
        );
    }
    Ok(())
}

fn timing(args: &TimingArgs) -> Result<()> {
    let manifest = args.corpus.manifest()?;
    let providers = args
        .providers
        .split(',')
        .map(|p| parse_name::<ProviderTag>("provider", p.trim()))
        .collect::<Result<Vec<_>>>()?;
    let base = open_provider(&manifest)?;
    let gateway: Arc<dyn ModelGateway> = match args.delay_ms {
        Some(ms) => Arc::new(DelayedGateway::new(base, Duration::from_millis(ms))),
        None => base,
    };
    let table = timing_study(&manifest, gateway, args.sample, &providers, args.corpus.seed.unwrap_or(0))?;
    print!("{}", table.to_csv());
    if let Some(path) = &args.out {
        let body = match report_format(path) {
            ReportFormat::Csv => table.to_csv(),
            ReportFormat::Json => serde_json::to_string_pretty(&table)? + "\n",
        };
        fs::write(path, body).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn serve(args: ServeArgs) -> Result<()> {
    let manifest = args.corpus.manifest()?;
    let defaults = match &args.config {
        Some(path) => ExperimentConfig::load(path)?.session,
        None => Default::default(),
    };
    let problems = defaults.problems();
    if !problems.is_empty() {
        bail!("invalid config:\n  {}", problems.join("\n  "));
    }
    let addr: SocketAddr = format!("{}:{}", args.host, args.port).parse().context("--host/--port")?;
    let state = api::AppState::new(defaults);
    let app = api::router(state.clone(), args.static_dir.clone());
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        tracing::info!(%addr, "listening");
        let corpus_args = args.corpus.clone();
        let loader = tokio::task::spawn_blocking(move || -> Result<()> {
            let ctx = corpus_args.context(&manifest)?.with_itm_parallelism(args.itm_parallelism);
            state.install(api::Corpus::new(&manifest, ctx));
            tracing::info!("index loaded");
            Ok(())
        });
        let server = tokio::spawn(async move {
            axum::serve(listener, app).with_graceful_shutdown(shutdown()).await
        });
        if let Err(e) = loader.await? {
            server.abort();
            return Err(e);
        }
        server.await??;
        Ok(())
    })
}

async fn shutdown() {
    let _ = tokio::signal::ctrl_c().await;
}

fn serve_models(args: &ServeModelsArgs) -> Result<()> {
    let manifest = args.corpus.manifest()?;
    if matches!(manifest.provider.kind, ProviderKind::Remote { .. }) {
        bail!("serve-models needs a local provider; this manifest points at a remote one");
    }
    let base = open_provider(&manifest)?;
    let gateway: Arc<dyn ModelGateway> = match args.delay_ms {
        Some(ms) => Arc::new(DelayedGateway::new(base, Duration::from_millis(ms))),
        None => base,
    };
    let addr: SocketAddr = format!("{}:{}", args.host, args.port).parse().context("--host/--port")?;
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        tracing::info!(%addr, "model server listening");
        axum::serve(listener, models::router(gateway))
            .with_graceful_shutdown(shutdown())
            .await?;
        Ok(())
    })
}

fn world(args: &WorldArgs) -> Result<()> {
    let mut spec = WorldSpec::ambiguous(args.seed, args.videos);
    spec.half_segments = args.halves;
    spec.object_only_captions = !args.full_captions;
    let mut manifest = spec.generate();
    if let ProviderKind::Synthetic { noise_rate, .. } = &mut manifest.provider.kind {
        *noise_rate = args.noise;
    }
    manifest.validate()?;
    fs::write(&args.out, manifest.to_json()).with_context(|| format!("writing {}", args.out.display()))?;
    println!("{} videos -> {}", manifest.videos.len(), args.out.display());
    Ok(())
}

fn replay_record(args: &ReplayArgs) -> Result<()> {
    let manifest = args.corpus.manifest()?;
    let ctx = args.corpus.context(&manifest)?;
    let text = fs::read_to_string(&args.record).with_context(|| format!("reading {}", args.record.display()))?;
    let record = SessionRecord::from_json(&text)?;
    replay(&ctx, &record)?;
    println!("{}: {} rounds reproduce exactly", args.record.display(), record.rounds.len());
    Ok(())
}
