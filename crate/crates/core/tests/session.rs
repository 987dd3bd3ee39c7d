use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use iviq_core::answer::{
    AnswerError, AnswerProvider, AnswerRequest, CapLmAnswerer, LatencyClock, ProviderTag, ScriptedAnswerer,
    VideoQaAnswerer,
};
use iviq_core::corpus::{AttributeTruth, Slot, SlotMap, VideoRecord};
use iviq_core::gateway::synthetic::WorldSpec;
use iviq_core::gateway::{DelayedGateway, Endpoint, GatewayError, ModelGateway, SyntheticProvider, SyntheticWorld};
use iviq_core::question::{classify, Question};
use iviq_core::session::{
    replay, Augmentations, ComposerStrategy, GeneratorKind, SessionError, StepOutcome, SESSION_SCHEMA,
};
use iviq_core::{build_index, CorpusManifest, Segment, Session, SessionConfig, SessionContext, SessionRecord};

/// Synthetic provider whose calls can be switched off one role at a time.
struct Switchable {
    inner: SyntheticProvider,
    fail_embed: AtomicBool,
    fail_caption: AtomicBool,
}

impl Switchable {
    fn down(endpoint: Endpoint) -> GatewayError {
        GatewayError::Transport {
            endpoint,
            attempts: 3,
            message: "connection refused".into(),
        }
    }
}

impl ModelGateway for Switchable {
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }
    fn embed_text(&self, text: &str) -> Result<Vec<f32>, GatewayError> {
        if self.fail_embed.load(Ordering::SeqCst) {
            return Err(Self::down(Endpoint::EmbedText));
        }
        self.inner.embed_text(text)
    }
    fn embed_video(&self, video_id: &str, segment: Segment) -> Result<Vec<f32>, GatewayError> {
        self.inner.embed_video(video_id, segment)
    }
    fn caption(&self, video_id: &str) -> Result<String, GatewayError> {
        if self.fail_caption.load(Ordering::SeqCst) {
            return Err(Self::down(Endpoint::Caption));
        }
        self.inner.caption(video_id)
    }
    fn vqa(&self, video_id: &str, question: &str, segment: Segment) -> Result<String, GatewayError> {
        self.inner.vqa(video_id, question, segment)
    }
    fn itm(&self, video_id: &str, text: &str) -> Result<f64, GatewayError> {
        self.inner.itm(video_id, text)
    }
    fn lm_generate(&self, prompt: &str, max_tokens: usize) -> Result<String, GatewayError> {
        self.inner.lm_generate(prompt, max_tokens)
    }
}

struct Fixture {
    manifest: CorpusManifest,
    ctx: SessionContext,
    gateway: Arc<Switchable>,
}

fn fixture(halves: bool) -> Fixture {
    let mut spec = WorldSpec::ambiguous(21, 120);
    spec.half_segments = halves;
    let manifest = spec.generate();
    let gateway = Arc::new(Switchable {
        inner: SyntheticProvider::new(Arc::new(SyntheticWorld::from_manifest(&manifest))),
        fail_embed: AtomicBool::new(false),
        fail_caption: AtomicBool::new(false),
    });
    let index = build_index(&manifest, gateway.as_ref(), 2).unwrap();
    let ctx = SessionContext::new(Arc::new(index), gateway.clone());
    Fixture { manifest, ctx, gateway }
}

fn scripted(f: &Fixture) -> ScriptedAnswerer {
    ScriptedAnswerer::new(Arc::new(f.manifest.truths()), LatencyClock::Null)
}

fn target_with_object(f: &Fixture, object: &str) -> String {
    f.manifest
        .videos
        .iter()
        .find(|v| v.truth.as_ref().unwrap().object_tokens(Segment::Whole).first() == Some(&object))
        .unwrap()
        .video_id
        .clone()
}

#[test]
fn start_rejects_bad_input() {
    let f = fixture(false);
    let target = Some(f.manifest.videos[0].video_id.as_str());
    let ok = SessionConfig::default();
    assert!(matches!(
        Session::start(&f.ctx, "  ", ok.clone(), target),
        Err(SessionError::EmptyQuery)
    ));
    assert!(matches!(
        Session::start(&f.ctx, "a man", ok.clone(), Some("ghost")),
        Err(SessionError::UnknownTarget(_))
    ));
    let segment = SessionConfig {
        augmentations: Augmentations {
            ask_segment: true,
            ask_object: false,
        },
        ..ok.clone()
    };
    assert!(matches!(
        Session::start(&f.ctx, "a man", segment, target),
        Err(SessionError::Capability(_))
    ));
    let vid = SessionConfig {
        generator: GeneratorKind::AutoTextVid,
        caption_k: 500,
        ..ok.clone()
    };
    assert!(matches!(
        Session::start(&f.ctx, "a man", vid, target),
        Err(SessionError::Capability(_))
    ));
    let broken = SessionConfig {
        rerank_k: 0,
        top_n: 0,
        max_rounds: Some(11),
        ..ok
    };
    match Session::start(&f.ctx, "a man", broken, target) {
        Err(SessionError::InvalidConfig(problems)) => assert_eq!(problems.len(), 3, "{problems:?}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn worked_example_composes_question_and_answer() {
    let f = fixture(false);
    let target = target_with_object(&f, "man");
    let mut session = Session::start(&f.ctx, "a man is singing", SessionConfig::default(), Some(&target)).unwrap();
    let answerer = scripted(&f);
    let first = session.propose(&f.ctx).unwrap().unwrap();
    assert_eq!(first.question.text, "what is the man doing?");
    session.step(&f.ctx, &answerer).unwrap();
    session.step(&f.ctx, &answerer).unwrap();
    let record = session.record();
    assert_eq!(record.rounds[1].question.text, "where is the man?");
    let scene = record.rounds[1].answer.clone();
    assert_eq!(record.query.fragments[1], format!("where is the man? {scene}"));
    assert_eq!(
        record.query.composed,
        format!(
            "a man is singing [SEP] what is the man doing? {} [SEP] where is the man? {scene}",
            record.rounds[0].answer
        )
    );
}

#[test]
fn failed_round_leaves_the_session_untouched() {
    let f = fixture(false);
    let target = f.manifest.videos[3].video_id.clone();
    let mut session = Session::start(&f.ctx, "a dog", SessionConfig::default(), Some(&target)).unwrap();
    let answerer = scripted(&f);
    session.step(&f.ctx, &answerer).unwrap();
    let before = session.record().clone();
    let ranking = session.ranking().clone();

    f.gateway.fail_embed.store(true, Ordering::SeqCst);
    let err = session.step(&f.ctx, &answerer).unwrap_err();
    assert!(matches!(err, SessionError::Embed(_)), "{err:?}");
    assert_eq!(session.record(), &before);
    assert_eq!(session.ranking(), &ranking);

    f.gateway.fail_embed.store(false, Ordering::SeqCst);
    assert!(matches!(session.step(&f.ctx, &answerer).unwrap(), StepOutcome::Advanced(_)));
    assert_eq!(session.rounds_completed(), 2);
    replay(&f.ctx, session.record()).unwrap();
}

#[test]
fn stale_proposals_are_refused() {
    let f = fixture(false);
    let target = f.manifest.videos[0].video_id.clone();
    let mut session = Session::start(&f.ctx, "a cat", SessionConfig::default(), Some(&target)).unwrap();
    let answerer = scripted(&f);
    let proposal = session.propose(&f.ctx).unwrap().unwrap();
    let answer = answerer.answer(&session.answer_request(&proposal)).unwrap();
    session.commit(&f.ctx, &proposal, &answer).unwrap();
    assert!(matches!(
        session.commit(&f.ctx, &proposal, &answer),
        Err(SessionError::StaleProposal { expected: 2, got: 1 })
    ));
}

#[test]
fn round_budget_exhausts_the_session() {
    let f = fixture(false);
    let target = f.manifest.videos[0].video_id.clone();
    let config = SessionConfig {
        max_rounds: Some(2),
        ..SessionConfig::default()
    };
    let mut session = Session::start(&f.ctx, "a man", config, Some(&target)).unwrap();
    let answerer = scripted(&f);
    session.run(&f.ctx, &answerer).unwrap();
    assert_eq!(session.rounds_completed(), 2);
    assert!(session.propose(&f.ctx).unwrap().is_none());
    assert_eq!(session.step(&f.ctx, &answerer).unwrap(), StepOutcome::Exhausted);
    assert_eq!(session.record().trajectory.len(), 3);
}

#[test]
fn every_generator_and_composer_replays() {
    let f = fixture(true);
    let answerer = scripted(&f);
    for generator in [GeneratorKind::Heuristic, GeneratorKind::AutoText, GeneratorKind::AutoTextVid] {
        for composer in [
            ComposerStrategy::ConcatSep,
            ComposerStrategy::SimilarityAggregation,
            ComposerStrategy::RankAggregation,
        ] {
            let config = SessionConfig {
                generator,
                composer,
                max_rounds: Some(4),
                augmentations: Augmentations {
                    ask_segment: true,
                    ask_object: true,
                },
                answerer: ProviderTag::Scripted,
                ..SessionConfig::default()
            };
            let caption = &f.manifest.captions[5];
            let mut session = Session::start(&f.ctx, &caption.query, config, Some(&caption.video_id)).unwrap();
            session.run(&f.ctx, &answerer).unwrap();
            assert!(session.rounds_completed() > 0);
            let record = SessionRecord::from_json(&session.record().to_json()).unwrap();
            assert_eq!(&record, session.record());
            replay(&f.ctx, &record).unwrap_or_else(|e| panic!("{generator:?}/{composer:?}: {e}"));
        }
    }
}

#[test]
fn tampered_records_do_not_replay() {
    let f = fixture(false);
    let caption = &f.manifest.captions[2];
    let mut session = Session::start(&f.ctx, &caption.query, SessionConfig::default(), Some(&caption.video_id)).unwrap();
    session.run(&f.ctx, &scripted(&f)).unwrap();
    let mut record = session.into_record();
    record.rounds[0].answer = "flying".into();
    assert!(matches!(replay(&f.ctx, &record), Err(SessionError::ReplayMismatch { round: 1, .. })));

    let mut json: serde_json::Value = serde_json::from_str(&record.to_json()).unwrap();
    json["schema"] = "iviq-session/0".into();
    assert!(SessionRecord::from_json(&json.to_string()).is_err());
    assert_eq!(SESSION_SCHEMA, "iviq-session/1");
}

#[test]
fn videoqa_answers_past_the_deadline_fail() {
    let manifest = WorldSpec::ambiguous(2, 20).generate();
    let inner = SyntheticProvider::new(Arc::new(SyntheticWorld::from_manifest(&manifest)));
    let slow: Arc<dyn ModelGateway> = Arc::new(DelayedGateway::new(inner, Duration::from_millis(80)));
    let answerer = VideoQaAnswerer::new(slow, LatencyClock::Wall);
    let question = Question::new("where is the man?", classify("where is the man?"));
    let request = AnswerRequest::for_video(&manifest.videos[0].video_id, question.clone(), Duration::from_millis(20));
    assert!(matches!(answerer.answer(&request), Err(AnswerError::DeadlineExceeded { .. })));
    let request = AnswerRequest::for_video(&manifest.videos[0].video_id, question, Duration::from_secs(5));
    let result = answerer.answer(&request).unwrap();
    assert!(result.latency >= Duration::from_millis(80));
}

#[test]
fn cap_lm_caption_failure_names_the_caption_call() {
    let f = fixture(false);
    f.gateway.fail_caption.store(true, Ordering::SeqCst);
    let answerer = CapLmAnswerer::new(f.gateway.clone(), LatencyClock::Null);
    let question = Question::new("where is the man?", classify("where is the man?"));
    let err = answerer
        .answer(&AnswerRequest::for_video(&f.manifest.videos[0].video_id, question, Duration::from_secs(5)))
        .unwrap_err();
    assert!(matches!(err, AnswerError::Gateway { call: Endpoint::Caption, .. }));
    assert!(err.to_string().contains("/v1/caption"), "{err}");
}

fn two_half_video() -> (CorpusManifest, String) {
    let slots = |object: &str, action: &str, scene: &str| {
        let mut m = SlotMap::new();
        m.insert(Slot::Object, vec![object.to_string()]);
        m.insert(Slot::Action, vec![action.to_string()]);
        m.insert(Slot::Scene, vec![scene.to_string()]);
        m
    };
    let mut manifest = WorldSpec::ambiguous(4, 10).generate();
    manifest.half_segments = true;
    let mut whole = slots("man", "singing", "street");
    whole.get_mut(&Slot::Action).unwrap().push("dancing".into());
    whole.get_mut(&Slot::Scene).unwrap().push("stage".into());
    let truth = AttributeTruth {
        whole,
        first_half: Some(slots("man", "singing", "street")),
        second_half: Some(slots("man", "dancing", "stage")),
    };
    for v in &mut manifest.videos {
        let t = v.truth.as_mut().unwrap();
        t.first_half = Some(t.whole.clone());
        t.second_half = Some(t.whole.clone());
    }
    manifest.videos.push(VideoRecord {
        video_id: "halves".into(),
        media_uri: String::new(),
        truth: Some(truth),
        segments: Vec::new(),
    });
    manifest.validate().unwrap();
    (manifest, "halves".into())
}

#[test]
fn half_questions_use_that_half() {
    let (manifest, id) = two_half_video();
    let gateway: Arc<dyn ModelGateway> =
        Arc::new(SyntheticProvider::new(Arc::new(SyntheticWorld::from_manifest(&manifest))));
    let providers: Vec<Box<dyn AnswerProvider>> = vec![
        Box::new(VideoQaAnswerer::new(gateway.clone(), LatencyClock::Null)),
        Box::new(CapLmAnswerer::new(gateway, LatencyClock::Null)),
        Box::new(ScriptedAnswerer::new(Arc::new(manifest.truths()), LatencyClock::Null)),
    ];
    let base = Question::new("what is the man doing?", classify("what is the man doing?"));
    let [first, second] = base.per_half();
    for p in &providers {
        let ask = |q: &Question| p.answer(&AnswerRequest::for_video(&id, q.clone(), Duration::from_secs(5))).unwrap().answer;
        let whole = ask(&base);
        if p.tag() == ProviderTag::CapLm {
            // One caption, built from the first entry of each slot, serves
            // every question.
            assert_eq!(whole, "singing");
            assert_eq!(ask(&second), "singing");
            continue;
        }
        assert_eq!(whole, "singing and dancing", "{:?}", p.tag());
        assert_eq!(ask(&first), "singing", "{:?}", p.tag());
        assert_eq!(ask(&second), "dancing", "{:?}", p.tag());
    }
}
