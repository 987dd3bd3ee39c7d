//! Deterministic synthetic model provider.
//!
//! Every response is a pure function of the world seed and the per-video
//! ground truth:
//!
//! - **token vectors**: a [`SplitMix64`] stream seeded with
//!   [`seeded_token_hash`]`(seed, token)` gives `d` components uniform in
//!   `[-1, 1)`, L2-normalized.
//! - **embed_text**: lowercase, drop `[SEP]`, split on non-alphanumerics, drop
//!   stopwords, sum token vectors, normalize. No tokens → the `<null>` vector.
//! - **embed_video**: the same over the segment's truth tokens.
//! - **caption**: `"a {object} {action} in the {scene}"`, first whole-video token
//!   per slot, missing parts omitted.
//! - **itm**: Jaccard overlap of text tokens and whole-video truth tokens.
//! - **vqa**: the scripted-oracle rule, optionally with seeded token noise.
//! - **lm_generate**: answers caption-conditioned questions, otherwise picks an
//!   unasked slot with a choice seeded by `fnv1a64(prompt)` and emits
//!   `"what is the {slot} in the video?"`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::Arc;

use super::{Endpoint, GatewayError, ModelGateway};
use crate::answer::{truth_answer, CAP_LM_PROMPT_PREFIX, CAP_LM_QUESTION_MARKER};
use crate::corpus::{
    AttributeTruth, CorpusManifest, DialogTurn, EvalCaption, Segment, Slot, SlotMap, VideoRecord,
    MANIFEST_SCHEMA,
};
use crate::gateway::{ProviderDescriptor, ProviderKind};
use crate::hashing::{fnv1a64, fnv1a64_parts, seeded_token_hash, SplitMix64};
use crate::lexicon::ObjectLexicon;
use crate::parametric::{split_auto_text_prompt, split_auto_text_vid_prompt, CAPTION_SEPARATOR};
use crate::question::{classify, slot_focus, slot_question, QuestionKind};

pub const DEFAULT_DIMENSION: usize = 256;
const NULL_TOKEN: &str = "<null>";
/// Slots the synthetic language model asks about, in candidate order.
const QUESTION_SLOTS: [Slot; 3] = [Slot::Object, Slot::Action, Slot::Scene];

/// Ground truth plus the seed that fixes its embedding space.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    seed: u64,
    dimension: usize,
    noise_rate: f64,
    stopwords: HashSet<String>,
    truths: BTreeMap<String, AttributeTruth>,
    /// Per-slot vocabulary over all videos, used to draw noise distractors.
    vocab: BTreeMap<Slot, Vec<String>>,
    /// Token vectors of every truth token, computed once.
    known_vectors: HashMap<String, Arc<[f64]>>,
    whole_token_sets: HashMap<String, BTreeSet<String>>,
}

impl SyntheticWorld {
    #[must_use]
    pub fn new(seed: u64, dimension: usize, truths: BTreeMap<String, AttributeTruth>) -> Self {
        let stopwords = ObjectLexicon::default().stopwords().iter().cloned().collect();
        let mut vocab: BTreeMap<Slot, BTreeSet<String>> = BTreeMap::new();
        for truth in truths.values() {
            for segment in Segment::ALL {
                if let Some(slots) = truth.segment(segment) {
                    for (slot, tokens) in slots {
                        vocab.entry(*slot).or_default().extend(tokens.iter().cloned());
                    }
                }
            }
        }
        let known_vectors = vocab
            .values()
            .flatten()
            .map(String::as_str)
            .chain([NULL_TOKEN])
            .map(|t| (t.to_string(), token_vector_for(seed, dimension, t).into()))
            .collect();
        let whole_token_sets = truths
            .iter()
            .map(|(id, t)| {
                let set = t.tokens(Segment::Whole).into_iter().map(str::to_string).collect();
                (id.clone(), set)
            })
            .collect();
        Self {
            seed,
            dimension,
            noise_rate: 0.0,
            stopwords,
            truths,
            vocab: vocab
                .into_iter()
                .map(|(slot, set)| (slot, set.into_iter().collect()))
                .collect(),
            known_vectors,
            whole_token_sets,
        }
    }

    #[must_use]
    pub fn with_noise(mut self, noise_rate: f64) -> Self {
        self.noise_rate = noise_rate;
        self
    }

    /// World described by a manifest with a synthetic provider descriptor.
    /// Videos without truth behave as if they carried no tokens.
    #[must_use]
    pub fn from_manifest(manifest: &CorpusManifest) -> Self {
        let (seed, noise) = match manifest.provider.kind {
            ProviderKind::Synthetic { seed, noise_rate } => (seed, noise_rate),
            ProviderKind::Remote { .. } => (0, 0.0),
        };
        let truths = manifest
            .videos
            .iter()
            .map(|v| {
                let mut truth = v.truth.clone().unwrap_or_default();
                if manifest.half_segments && !truth.has_halves() {
                    truth.first_half = Some(SlotMap::new());
                    truth.second_half = Some(SlotMap::new());
                }
                (v.video_id.clone(), truth)
            })
            .collect();
        Self::new(seed, manifest.dimension, truths).with_noise(noise)
    }

    #[must_use]
    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[must_use]
    pub fn dimension(&self) -> usize {
        self.dimension
    }

    #[must_use]
    pub fn noise_rate(&self) -> f64 {
        self.noise_rate
    }

    #[must_use]
    pub fn truth(&self, video_id: &str) -> Option<&AttributeTruth> {
        self.truths.get(video_id)
    }

    fn truth_or_err(&self, video_id: &str) -> Result<&AttributeTruth, GatewayError> {
        self.truth(video_id)
            .ok_or_else(|| GatewayError::UnknownVideo(video_id.to_string()))
    }

    /// Content tokens of free text, as seen by the synthetic encoders.
    #[must_use]
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let lower = text.to_lowercase().replace("[sep]", " ");
        lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty() && !self.stopwords.contains(*t))
            .map(str::to_string)
            .collect()
    }

    /// Unit vector of one token, in double precision.
    #[must_use]
    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        match self.known_vectors.get(token) {
            Some(v) => v.to_vec(),
            None => token_vector_for(self.seed, self.dimension, token),
        }
    }

    /// Normalized sum of token vectors; the `<null>` vector for no tokens.
    #[must_use]
    pub fn embed_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<f32> {
        let mut sum = vec![0.0_f64; self.dimension];
        for token in tokens {
            let token = token.as_ref();
            let fresh;
            let v: &[f64] = match self.known_vectors.get(token) {
                Some(v) => v,
                None => {
                    fresh = token_vector_for(self.seed, self.dimension, token);
                    &fresh
                }
            };
            for (acc, x) in sum.iter_mut().zip(v) {
                *acc += x;
            }
        }
        let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return self
                .token_vector(NULL_TOKEN)
                .into_iter()
                .map(|x| x as f32)
                .collect();
        }
        sum.into_iter().map(|x| (x / norm) as f32).collect()
    }

    #[must_use]
    pub fn embed_text(&self, text: &str) -> Vec<f32> {
        self.embed_tokens(&self.tokenize(text))
    }

    pub fn embed_video(&self, video_id: &str, segment: Segment) -> Result<Vec<f32>, GatewayError> {
        let truth = self.truth_or_err(video_id)?;
        if truth.segment(segment).is_none() {
            return Err(GatewayError::UnsupportedSegment {
                video_id: video_id.to_string(),
                segment,
            });
        }
        Ok(self.embed_tokens(&truth.tokens(segment)))
    }

    pub fn caption(&self, video_id: &str) -> Result<String, GatewayError> {
        Ok(caption_from_truth(self.truth_or_err(video_id)?))
    }

    pub fn itm(&self, video_id: &str, text: &str) -> Result<f64, GatewayError> {
        let video_tokens = self
            .whole_token_sets
            .get(video_id)
            .ok_or_else(|| GatewayError::UnknownVideo(video_id.to_string()))?;
        let text_tokens: BTreeSet<String> = self.tokenize(text).into_iter().collect();
        Ok(jaccard(&text_tokens, video_tokens))
    }

    pub fn vqa(&self, video_id: &str, question: &str, segment: Segment) -> Result<String, GatewayError> {
        let truth = self.truth_or_err(video_id)?;
        if truth.segment(segment).is_none() {
            return Err(GatewayError::UnsupportedSegment {
                video_id: video_id.to_string(),
                segment,
            });
        }
        let mut answer = truth_answer(question, classify(question), segment, truth)
            .expect("segment checked above");
        if self.noise_rate > 0.0 {
            for (i, part) in answer.parts.iter_mut().enumerate() {
                let Some(slot) = part.slot else { continue };
                let mut rng = SplitMix64::new(fnv1a64_parts([
                    self.seed.to_le_bytes().as_slice(),
                    video_id.as_bytes(),
                    segment.as_str().as_bytes(),
                    question.as_bytes(),
                    (i as u64).to_le_bytes().as_slice(),
                ]));
                if rng.next_f64() >= self.noise_rate {
                    continue;
                }
                let distractors: Vec<&String> = self
                    .vocab
                    .get(&slot)
                    .into_iter()
                    .flatten()
                    .filter(|t| **t != part.token)
                    .collect();
                if !distractors.is_empty() {
                    let pick = rng.next_below(distractors.len() as u64) as usize;
                    part.token = distractors[pick].clone();
                }
            }
        }
        Ok(answer.render())
    }

    #[must_use]
    pub fn lm_generate(&self, prompt: &str) -> String {
        if let Some(rest) = prompt.strip_prefix(CAP_LM_PROMPT_PREFIX) {
            if let Some((caption, question)) = rest.split_once(CAP_LM_QUESTION_MARKER) {
                return self.answer_from_caption(caption.trim(), question.trim());
            }
        }
        let (query, captions) = if let Some((captions, query)) = split_auto_text_vid_prompt(prompt) {
            (query, Some(captions))
        } else if let Some(query) = split_auto_text_prompt(prompt) {
            (query, None)
        } else {
            (prompt, None)
        };
        let query_lower = query.to_lowercase();
        let query_tokens: HashSet<String> = self.tokenize(query).into_iter().collect();
        let unasked: Vec<Slot> = QUESTION_SLOTS
            .into_iter()
            .filter(|slot| !query_lower.contains(&format!("the {} in the video", slot.as_str())))
            .collect();

        let mut candidates = unasked.clone();
        if let Some(captions) = captions {
            let parsed: Vec<BTreeMap<Slot, String>> = captions
                .split(CAPTION_SEPARATOR)
                .map(parse_caption)
                .collect();
            let informative: Vec<Slot> = unasked
                .iter()
                .copied()
                .filter(|slot| {
                    parsed
                        .iter()
                        .filter_map(|c| c.get(slot))
                        .any(|value| !query_tokens.contains(value))
                })
                .collect();
            if !informative.is_empty() {
                candidates = informative;
            }
        }
        if candidates.is_empty() {
            candidates = QUESTION_SLOTS.to_vec();
        }
        let mut rng = SplitMix64::new(fnv1a64(prompt.as_bytes()));
        let slot = candidates[rng.next_below(candidates.len() as u64) as usize];
        slot_question(slot.as_str())
    }

    fn answer_from_caption(&self, caption: &str, question: &str) -> String {
        let slots = parse_caption(caption);
        let value = |slot: Slot| slots.get(&slot).cloned();
        let answer = match classify(question) {
            QuestionKind::Action => value(Slot::Action),
            QuestionKind::Scene => value(Slot::Scene),
            QuestionKind::ObjectIdentify => value(Slot::Object).map(|o| format!("a {o}")),
            QuestionKind::ObjectInventory => None,
            QuestionKind::Open => match slot_focus(question).as_deref().and_then(slot_from_name) {
                Some(slot) => value(slot),
                None => {
                    let tokens = self.tokenize(caption);
                    (!tokens.is_empty()).then(|| tokens.join(" "))
                }
            },
        };
        answer.unwrap_or_else(|| "nothing".to_string())
    }
}

fn token_vector_for(seed: u64, dimension: usize, token: &str) -> Vec<f64> {
    let mut rng = SplitMix64::new(seeded_token_hash(seed, token));
    let mut v: Vec<f64> = (0..dimension).map(|_| 2.0 * rng.next_f64() - 1.0).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

fn slot_from_name(name: &str) -> Option<Slot> {
    match name {
        "object" => Some(Slot::Object),
        "action" => Some(Slot::Action),
        "scene" => Some(Slot::Scene),
        "color" => Some(Slot::Color),
        "material" => Some(Slot::Material),
        _ => None,
    }
}

pub(crate) fn slot_named(name: &str) -> Option<Slot> {
    slot_from_name(name)
}

fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// `"a {object} {action} in the {scene}"` from the first whole-video token of
/// each slot; absent slots are left out.
#[must_use]
pub fn caption_from_truth(truth: &AttributeTruth) -> String {
    let first = |slot: Slot| {
        truth
            .whole
            .get(&slot)
            .and_then(|tokens| tokens.first())
            .map(String::as_str)
    };
    let mut caption = String::from("a");
    caption.push(' ');
    caption.push_str(first(Slot::Object).unwrap_or("video"));
    if let Some(action) = first(Slot::Action) {
        caption.push(' ');
        caption.push_str(action);
    }
    if let Some(scene) = first(Slot::Scene) {
        caption.push_str(" in the ");
        caption.push_str(scene);
    }
    caption
}

/// Inverse of [`caption_from_truth`] for well-formed captions.
fn parse_caption(caption: &str) -> BTreeMap<Slot, String> {
    let mut slots = BTreeMap::new();
    let caption = caption.trim();
    let (head, scene) = match caption.split_once(" in the ") {
        Some((head, scene)) => (head, Some(scene.trim())),
        None => (caption, None),
    };
    let mut words = head.split_whitespace();
    if words.clone().next() == Some("a") {
        words.next();
    }
    if let Some(object) = words.next() {
        slots.insert(Slot::Object, object.to_string());
    }
    let action: Vec<&str> = words.collect();
    if !action.is_empty() {
        slots.insert(Slot::Action, action.join(" "));
    }
    if let Some(scene) = scene.filter(|s| !s.is_empty()) {
        slots.insert(Slot::Scene, scene.to_string());
    }
    slots
}

/// [`ModelGateway`] over a shared [`SyntheticWorld`].
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    world: Arc<SyntheticWorld>,
}

impl SyntheticProvider {
    #[must_use]
    pub fn new(world: Arc<SyntheticWorld>) -> Self {
        Self { world }
    }

    #[must_use]
    pub fn world(&self) -> &SyntheticWorld {
        &self.world
    }
}

impl ModelGateway for SyntheticProvider {
    fn dimension(&self) -> usize {
        self.world.dimension
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, GatewayError> {
        if text.trim().is_empty() {
            return Err(GatewayError::InvalidRequest {
                endpoint: Endpoint::EmbedText,
                message: "empty text".into(),
            });
        }
        Ok(self.world.embed_text(text))
    }

    fn embed_video(&self, video_id: &str, segment: Segment) -> Result<Vec<f32>, GatewayError> {
        self.world.embed_video(video_id, segment)
    }

    fn caption(&self, video_id: &str) -> Result<String, GatewayError> {
        self.world.caption(video_id)
    }

    fn vqa(
        &self,
        video_id: &str,
        question: &str,
        segment: Segment,
    ) -> Result<String, GatewayError> {
        self.world.vqa(video_id, question, segment)
    }

    fn itm(&self, video_id: &str, text: &str) -> Result<f64, GatewayError> {
        self.world.itm(video_id, text)
    }

    fn lm_generate(&self, prompt: &str, _max_tokens: usize) -> Result<String, GatewayError> {
        if prompt.trim().is_empty() {
            return Err(GatewayError::InvalidRequest {
                endpoint: Endpoint::LmGenerate,
                message: "empty prompt".into(),
            });
        }
        Ok(self.world.lm_generate(prompt))
    }
}

pub const LIVING_POOL: [&str; 16] = [
    "man", "woman", "boy", "girl", "dog", "cat", "horse", "bird", "child", "baby", "monkey",
    "chef", "dancer", "player", "rabbit", "elephant",
];
pub const ACTION_POOL: [&str; 16] = [
    "singing", "dancing", "running", "cooking", "swimming", "talking", "walking", "jumping",
    "eating", "reading", "drawing", "climbing", "sleeping", "laughing", "crying", "waving",
];
pub const SCENE_POOL: [&str; 16] = [
    "street", "park", "kitchen", "beach", "stage", "forest", "office", "classroom", "stadium",
    "garden", "river", "mountain", "studio", "field", "gym", "library",
];
pub const EXTRA_POOL: [&str; 24] = [
    "guitar", "microphone", "ball", "car", "table", "lamp", "chair", "bicycle", "phone", "hat",
    "book", "cup", "bottle", "laptop", "umbrella", "camera", "piano", "drum", "bag", "box",
    "knife", "pan", "toy", "kite",
];

/// Shape of a generated synthetic world.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub seed: u64,
    pub videos: usize,
    pub dimension: usize,
    /// How many entries of each pool are in play.
    pub objects: usize,
    pub actions: usize,
    pub scenes: usize,
    pub extras: usize,
    /// Each video carries between 1 and this many extra objects.
    pub max_extras: usize,
    pub half_segments: bool,
    /// Evaluation captions name the object only (`"a man"`), or the full
    /// caption template.
    pub object_only_captions: bool,
}

impl WorldSpec {
    /// A gallery whose initial object-only captions are highly ambiguous.
    #[must_use]
    pub fn ambiguous(seed: u64, videos: usize) -> Self {
        Self {
            seed,
            videos,
            dimension: DEFAULT_DIMENSION,
            objects: 10,
            actions: 10,
            scenes: 10,
            extras: 24,
            max_extras: 2,
            half_segments: false,
            object_only_captions: true,
        }
    }

    /// Generate the manifest. Whole-video token sets are unique across videos.
    #[must_use]
    pub fn generate(&self) -> CorpusManifest {
        assert!(self.objects >= 1 && self.objects <= LIVING_POOL.len());
        assert!(self.actions >= 1 && self.actions <= ACTION_POOL.len());
        assert!(self.scenes >= 1 && self.scenes <= SCENE_POOL.len());
        assert!(self.extras >= 2 && self.extras <= EXTRA_POOL.len());
        assert!(self.max_extras >= 1 && self.max_extras < self.extras);

        let mut rng = SplitMix64::new(self.seed ^ 0x5157_4f52_4c44_0001);
        let mut objects: Vec<usize> = (0..self.videos).map(|i| i % self.objects).collect();
        rng.shuffle(&mut objects);

        let mut seen = HashSet::new();
        let mut videos = Vec::with_capacity(self.videos);
        let mut captions = Vec::with_capacity(self.videos);
        for (i, &object) in objects.iter().enumerate() {
            let object = LIVING_POOL[object];
            let mut attempts = 0;
            let truth = loop {
                attempts += 1;
                assert!(attempts < 10_000, "cannot draw a unique video; enlarge the pools");
                let truth = self.draw_truth(object, &mut rng);
                let mut key: Vec<&str> = truth.tokens(Segment::Whole);
                key.sort_unstable();
                let key = key.join(" ");
                if seen.insert(key) {
                    break truth;
                }
            };
            let video_id = format!("video{i:04}");
            let query = if self.object_only_captions {
                format!("a {object}")
            } else {
                caption_from_truth(&truth)
            };
            captions.push(EvalCaption {
                video_id: video_id.clone(),
                query,
                dialog: Vec::<DialogTurn>::new(),
            });
            videos.push(VideoRecord {
                media_uri: format!("synthetic://{video_id}"),
                video_id,
                truth: Some(truth),
                segments: Vec::new(),
            });
        }

        let mut manifest = CorpusManifest {
            schema: MANIFEST_SCHEMA.to_string(),
            name: format!("synthetic-seed{}-n{}", self.seed, self.videos),
            provider: ProviderDescriptor::synthetic(self.seed, self.dimension),
            dimension: self.dimension,
            frame_sampling: Some("8 uniform frames (not executed by the synthetic provider)".into()),
            half_segments: self.half_segments,
            videos,
            captions,
        };
        manifest
            .validate()
            .expect("generated manifest satisfies its invariants");
        manifest
    }

    fn draw_truth(&self, object: &str, rng: &mut SplitMix64) -> AttributeTruth {
        let pick = |pool: &[&str], n: usize, rng: &mut SplitMix64| {
            pool[rng.next_below(n as u64) as usize].to_string()
        };
        let scene = pick(&SCENE_POOL, self.scenes, rng);
        let extra_count = 1 + rng.next_below(self.max_extras as u64) as usize;
        let mut extras_idx: Vec<usize> = (0..self.extras).collect();
        rng.shuffle(&mut extras_idx);
        let extras: Vec<String> = extras_idx[..extra_count]
            .iter()
            .map(|&j| EXTRA_POOL[j].to_string())
            .collect();

        let slots = |actions: Vec<String>, extras: Vec<String>| {
            let mut m = SlotMap::new();
            m.insert(Slot::Object, vec![object.to_string()]);
            m.insert(Slot::Action, actions);
            m.insert(Slot::Scene, vec![scene.clone()]);
            m.insert(Slot::ExtraObjects, extras);
            m
        };

        if !self.half_segments {
            let action = pick(&ACTION_POOL, self.actions, rng);
            return AttributeTruth {
                whole: slots(vec![action], extras),
                first_half: None,
                second_half: None,
            };
        }
        let first_action = pick(&ACTION_POOL, self.actions, rng);
        let second_action = pick(&ACTION_POOL, self.actions, rng);
        let split = extras.len().div_ceil(2);
        let (first_extras, second_extras) = extras.split_at(split);
        let mut whole_actions = vec![first_action.clone()];
        if second_action != first_action {
            whole_actions.push(second_action.clone());
        }
        AttributeTruth {
            whole: slots(whole_actions, extras.clone()),
            first_half: Some(slots(vec![first_action], first_extras.to_vec())),
            second_half: Some(slots(vec![second_action], second_extras.to_vec())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth(pairs: &[(Slot, &[&str])]) -> AttributeTruth {
        AttributeTruth {
            whole: pairs
                .iter()
                .map(|(s, t)| (*s, t.iter().map(|x| x.to_string()).collect()))
                .collect(),
            first_half: None,
            second_half: None,
        }
    }

    fn world() -> SyntheticWorld {
        let mut truths = BTreeMap::new();
        truths.insert(
            "v1".to_string(),
            truth(&[
                (Slot::Object, &["dog"]),
                (Slot::Action, &["running"]),
                (Slot::Scene, &["park"]),
            ]),
        );
        SyntheticWorld::new(7, 64, truths)
    }

    #[test]
    fn caption_template() {
        assert_eq!(world().caption("v1").unwrap(), "a dog running in the park");
    }

    #[test]
    fn itm_is_jaccard_without_stopwords() {
        let score = world().itm("v1", "a dog running").unwrap();
        assert!((score - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bag_of_tokens_symmetry_and_separator() {
        let w = world();
        assert_eq!(w.embed_text("man singing"), w.embed_text("singing man"));
        assert_eq!(w.embed_text("man [SEP] street"), w.embed_text("man street"));
    }

    #[test]
    fn token_vectors_unit_norm_and_seeded() {
        let w = world();
        let v = w.token_vector("guitar");
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_eq!(v, w.token_vector("guitar"));
        let other = SyntheticWorld::new(8, 64, BTreeMap::new());
        assert_ne!(v, other.token_vector("guitar"));
    }

    #[test]
    fn stopword_only_text_maps_to_null_vector() {
        let w = world();
        assert_eq!(w.embed_text("what is the"), w.embed_text("[SEP] of a"));
        assert_eq!(w.embed_text("the"), w.embed_tokens::<&str>(&[]));
    }

    #[test]
    fn unknown_video_and_segment() {
        let w = world();
        assert!(matches!(w.caption("nope"), Err(GatewayError::UnknownVideo(_))));
        assert!(matches!(
            w.embed_video("v1", Segment::FirstHalf),
            Err(GatewayError::UnsupportedSegment { .. })
        ));
    }

    #[test]
    fn lm_answers_cap_lm_prompts_from_caption() {
        let w = world();
        let prompt = format!(
            "{CAP_LM_PROMPT_PREFIX}a dog running in the park{CAP_LM_QUESTION_MARKER}where is the dog?"
        );
        assert_eq!(w.lm_generate(&prompt), "park");
    }

    #[test]
    fn parse_caption_round_trip() {
        let p = parse_caption("a man singing in the street");
        assert_eq!(p[&Slot::Object], "man");
        assert_eq!(p[&Slot::Action], "singing");
        assert_eq!(p[&Slot::Scene], "street");
    }

    #[test]
    fn generated_world_is_deterministic_and_unique() {
        let spec = WorldSpec::ambiguous(3, 120);
        let a = spec.generate();
        let b = spec.generate();
        assert_eq!(a, b);
        let mut keys = HashSet::new();
        for v in &a.videos {
            let mut k = v.truth.as_ref().unwrap().tokens(Segment::Whole);
            k.sort_unstable();
            assert!(keys.insert(k.join(" ")));
        }
    }

    #[test]
    fn pools_agree_with_lexicon() {
        let lex = ObjectLexicon::default();
        for o in LIVING_POOL {
            assert_eq!(lex.classify(o), Some(true), "{o}");
        }
        for o in EXTRA_POOL {
            assert_eq!(lex.classify(o), Some(false), "{o}");
        }
        for t in ACTION_POOL.iter().chain(SCENE_POOL.iter()) {
            assert_eq!(lex.classify(t), None, "{t}");
            assert!(!lex.is_stopword(t), "{t}");
        }
    }

    #[test]
    fn halves_world_validates() {
        let mut spec = WorldSpec::ambiguous(5, 40);
        spec.half_segments = true;
        let m = spec.generate();
        assert!(m.videos.iter().all(|v| v.truth.as_ref().unwrap().has_halves()));
    }
}
