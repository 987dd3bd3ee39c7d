//! Gallery ingestion: dataset manifests, ground-truth attributes and the
//! precomputed embedding index.
//!
//! A manifest is a single JSON document (`"schema": "iviq-manifest/1"`) listing
//! the videos of a gallery and the evaluation captions used as initial queries.
//! Embeddings live in a separate binary container, see [`crate::container`].

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{GatewayError, ModelGateway, ProviderDescriptor};

pub const MANIFEST_SCHEMA: &str = "iviq-manifest/1";

/// Tolerance on the L2 norm of every stored vector.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// Temporal segment of a video addressed by embeddings and questions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Whole,
    FirstHalf,
    SecondHalf,
}

impl Segment {
    pub const ALL: [Segment; 3] = [Segment::Whole, Segment::FirstHalf, Segment::SecondHalf];

    #[must_use]
    pub const fn as_str(self) -> &'static str {
        match self {
            Segment::Whole => "whole",
            Segment::FirstHalf => "first_half",
            Segment::SecondHalf => "second_half",
        }
    }

    #[must_use]
    pub const fn code(self) -> u8 {
        match self {
            Segment::Whole => 0,
            Segment::FirstHalf => 1,
            Segment::SecondHalf => 2,
        }
    }

    #[must_use]
    pub const fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Segment::Whole),
            1 => Some(Segment::FirstHalf),
            2 => Some(Segment::SecondHalf),
            _ => None,
        }
    }

    #[must_use]
    pub const fn is_half(self) -> bool {
        !matches!(self, Segment::Whole)
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Attribute slot of the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Object,
    Action,
    Scene,
    Color,
    Material,
    ExtraObjects,
}

impl Slot {
    pub const ALL: [Slot; 6] = [
        Slot::Object,
        Slot::Action,
        Slot::Scene,
        Slot::Color,
        Slot::Material,
        Slot::ExtraObjects,
    ];

    #[must_use]
    pub const fn as_str(self) -> &'static str {
        match self {
            Slot::Object => "object",
            Slot::Action => "action",
            Slot::Scene => "scene",
            Slot::Color => "color",
            Slot::Material => "material",
            Slot::ExtraObjects => "extra_objects",
        }
    }
}

/// Slot → tokens for one segment.
pub type SlotMap = BTreeMap<Slot, Vec<String>>;

/// Ground-truth attributes of a video, used by the synthetic provider and the
/// scripted oracle answerer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeTruth {
    pub whole: SlotMap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_half: Option<SlotMap>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_half: Option<SlotMap>,
}

impl AttributeTruth {
    #[must_use]
    pub fn segment(&self, segment: Segment) -> Option<&SlotMap> {
        match segment {
            Segment::Whole => Some(&self.whole),
            Segment::FirstHalf => self.first_half.as_ref(),
            Segment::SecondHalf => self.second_half.as_ref(),
        }
    }

    #[must_use]
    pub fn has_halves(&self) -> bool {
        self.first_half.is_some() && self.second_half.is_some()
    }

    /// All tokens of a segment in slot order.
    #[must_use]
    pub fn tokens(&self, segment: Segment) -> Vec<&str> {
        self.segment(segment)
            .map(|slots| {
                slots
                    .values()
                    .flat_map(|tokens| tokens.iter().map(String::as_str))
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Object tokens of a segment: the `object` slot followed by `extra_objects`.
    #[must_use]
    pub fn object_tokens(&self, segment: Segment) -> Vec<&str> {
        let Some(slots) = self.segment(segment) else {
            return Vec::new();
        };
        [Slot::Object, Slot::ExtraObjects]
            .iter()
            .filter_map(|slot| slots.get(slot))
            .flat_map(|tokens| tokens.iter().map(String::as_str))
            .collect()
    }

    fn validate(&self, video_id: &str, problems: &mut Vec<String>) {
        for segment in Segment::ALL {
            let Some(slots) = self.segment(segment) else {
                continue;
            };
            for (slot, tokens) in slots {
                for token in tokens {
                    if !is_clean_token(token) {
                        problems.push(format!(
                            "video {video_id:?}: {segment}.{} token {token:?} must be non-empty, lowercase and whitespace-free",
                            slot.as_str()
                        ));
                    }
                }
            }
        }
        match (&self.first_half, &self.second_half) {
            (Some(first), Some(second)) => {
                for slot in Slot::ALL {
                    let whole: BTreeSet<&String> =
                        self.whole.get(&slot).into_iter().flatten().collect();
                    let union: BTreeSet<&String> = first
                        .get(&slot)
                        .into_iter()
                        .flatten()
                        .chain(second.get(&slot).into_iter().flatten())
                        .collect();
                    if whole != union {
                        problems.push(format!(
                            "video {video_id:?}: whole.{} differs from the union of its halves",
                            slot.as_str()
                        ));
                    }
                }
            }
            (None, None) => {}
            _ => problems.push(format!(
                "video {video_id:?}: truth declares only one half segment"
            )),
        }
    }
}

fn is_clean_token(token: &str) -> bool {
    !token.is_empty()
        && !token.chars().any(char::is_whitespace)
        && token.chars().all(|c| !c.is_uppercase())
}

/// One gallery item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    #[serde(default)]
    pub media_uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<AttributeTruth>,
    /// Derived from the manifest's segment declaration during validation.
    #[serde(skip)]
    pub segments: Vec<Segment>,
}

/// One human dialogue turn attached to an evaluation caption (AVSD-style).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogTurn {
    pub question: String,
    pub answer: String,
}

/// Initial query for one evaluation session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCaption {
    pub video_id: String,
    pub query: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dialog: Vec<DialogTurn>,
}

/// A validated dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema: String,
    pub name: String,
    pub provider: ProviderDescriptor,
    pub dimension: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_sampling: Option<String>,
    #[serde(default)]
    pub half_segments: bool,
    pub videos: Vec<VideoRecord>,
    #[serde(default)]
    pub captions: Vec<EvalCaption>,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read manifest {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid manifest: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("provider failed for video {video_id:?}: {source}")]
    Provider {
        video_id: String,
        #[source]
        source: GatewayError,
    },
    #[error("video {video_id:?} ({segment}): expected dimension {expected}, provider returned {actual}")]
    DimensionMismatch {
        video_id: String,
        segment: Segment,
        expected: usize,
        actual: usize,
    },
    #[error("video {video_id:?} ({segment}): provider returned a zero or non-finite vector")]
    DegenerateVector { video_id: String, segment: Segment },
    #[error("embedding row {video_id:?} ({segment}) has norm {norm}, expected 1")]
    NotUnitNorm {
        video_id: String,
        segment: Segment,
        norm: f64,
    },
    #[error("duplicate embedding row {video_id:?} ({segment})")]
    DuplicateRow { video_id: String, segment: Segment },
}

impl CorpusManifest {
    /// Parse and validate a manifest document.
    pub fn from_json(text: &str) -> Result<Self, CorpusError> {
        let mut manifest: CorpusManifest = serde_json::from_str(text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("manifest serializes");
        out.push('\n');
        out
    }

    /// Enforce all manifest invariants and fill derived fields.
    pub fn validate(&mut self) -> Result<(), CorpusError> {
        let mut problems = Vec::new();
        if self.schema != MANIFEST_SCHEMA {
            problems.push(format!(
                "unsupported schema {:?}, expected {MANIFEST_SCHEMA:?}",
                self.schema
            ));
        }
        if self.dimension != self.provider.dimension {
            problems.push(format!(
                "dimension mismatch: manifest declares {}, provider declares {}",
                self.dimension, self.provider.dimension
            ));
        }
        problems.extend(self.provider.problems());

        let mut seen = HashSet::new();
        for video in &self.videos {
            if video.video_id.is_empty() {
                problems.push("empty video_id".to_string());
            } else if !seen.insert(video.video_id.as_str()) {
                problems.push(format!("duplicate video_id {:?}", video.video_id));
            }
            if let Some(truth) = &video.truth {
                truth.validate(&video.video_id, &mut problems);
                if self.half_segments && !truth.has_halves() {
                    problems.push(format!(
                        "video {:?}: manifest declares half segments but truth has none",
                        video.video_id
                    ));
                }
            }
        }
        for caption in &self.captions {
            if !seen.contains(caption.video_id.as_str()) {
                problems.push(format!(
                    "caption references unknown video_id {:?}",
                    caption.video_id
                ));
            }
            if caption.query.trim().is_empty() {
                problems.push(format!("empty caption for video {:?}", caption.video_id));
            }
        }
        if !problems.is_empty() {
            return Err(CorpusError::Validation(problems));
        }

        let segments = self.segments();
        for video in &mut self.videos {
            video.segments = segments.clone();
        }
        Ok(())
    }

    /// Segments available for every video of this corpus.
    #[must_use]
    pub fn segments(&self) -> Vec<Segment> {
        if self.half_segments {
            Segment::ALL.to_vec()
        } else {
            vec![Segment::Whole]
        }
    }

    #[must_use]
    pub fn video(&self, video_id: &str) -> Option<&VideoRecord> {
        self.videos.iter().find(|v| v.video_id == video_id)
    }

    /// Ground truth keyed by video id, for videos that carry one.
    #[must_use]
    pub fn truths(&self) -> BTreeMap<String, AttributeTruth> {
        self.videos
            .iter()
            .filter_map(|v| v.truth.clone().map(|t| (v.video_id.clone(), t)))
            .collect()
    }
}

/// Read and validate a manifest file.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<CorpusManifest, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    CorpusManifest::from_json(&text)
}

/// Key of one embedding row.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RowKey {
    pub video_id: String,
    pub segment: Segment,
}

impl RowKey {
    pub fn new(video_id: impl Into<String>, segment: Segment) -> Self {
        Self {
            video_id: video_id.into(),
            segment,
        }
    }
}

/// Unit-norm video embeddings, one row per (video, segment), stored row-major
/// in key order. Immutable once built.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    dimension: usize,
    keys: Vec<RowKey>,
    data: Vec<f32>,
    lookup: HashMap<RowKey, usize>,
    /// Row indices of the `whole` segment, in ascending video id order.
    whole: Vec<usize>,
}

impl PartialEq for EmbeddingMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.dimension == other.dimension
            && self.keys == other.keys
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl EmbeddingMatrix {
    /// Assemble a matrix from rows that are already unit-norm.
    pub fn from_rows(
        dimension: usize,
        rows: impl IntoIterator<Item = (RowKey, Vec<f32>)>,
    ) -> Result<Self, CorpusError> {
        let mut rows: Vec<(RowKey, Vec<f32>)> = rows.into_iter().collect();
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        let mut keys = Vec::with_capacity(rows.len());
        let mut data = Vec::with_capacity(rows.len() * dimension);
        let mut lookup = HashMap::with_capacity(rows.len());
        let mut whole = Vec::new();
        for (i, (key, vector)) in rows.into_iter().enumerate() {
            if vector.len() != dimension {
                return Err(CorpusError::DimensionMismatch {
                    video_id: key.video_id,
                    segment: key.segment,
                    expected: dimension,
                    actual: vector.len(),
                });
            }
            let norm = l2_norm(&vector);
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(CorpusError::NotUnitNorm {
                    video_id: key.video_id,
                    segment: key.segment,
                    norm,
                });
            }
            if lookup.insert(key.clone(), i).is_some() {
                return Err(CorpusError::DuplicateRow {
                    video_id: key.video_id,
                    segment: key.segment,
                });
            }
            if key.segment == Segment::Whole {
                whole.push(i);
            }
            data.extend_from_slice(&vector);
            keys.push(key);
        }
        Ok(Self {
            dimension,
            keys,
            data,
            lookup,
            whole,
        })
    }

    #[must_use]
    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Number of rows (all segments).
    #[must_use]
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Number of videos with a `whole` row, i.e. the gallery size.
    #[must_use]
    pub fn video_count(&self) -> usize {
        self.whole.len()
    }

    #[must_use]
    pub fn keys(&self) -> &[RowKey] {
        &self.keys
    }

    #[must_use]
    pub fn row_at(&self, i: usize) -> &[f32] {
        &self.data[i * self.dimension..(i + 1) * self.dimension]
    }

    #[must_use]
    pub fn row(&self, video_id: &str, segment: Segment) -> Option<&[f32]> {
        self.lookup
            .get(&RowKey::new(video_id, segment))
            .map(|&i| self.row_at(i))
    }

    #[must_use]
    pub fn contains_video(&self, video_id: &str) -> bool {
        self.lookup
            .contains_key(&RowKey::new(video_id, Segment::Whole))
    }

    #[must_use]
    pub fn has_halves(&self) -> bool {
        !self.whole.is_empty()
            && self.whole.iter().all(|&i| {
                let id = &self.keys[i].video_id;
                self.lookup
                    .contains_key(&RowKey::new(id.as_str(), Segment::FirstHalf))
                    && self
                        .lookup
                        .contains_key(&RowKey::new(id.as_str(), Segment::SecondHalf))
            })
    }

    /// `(video_id, vector)` for every whole-video row, ascending by id.
    pub fn whole_rows(&self) -> impl Iterator<Item = (&str, &[f32])> + '_ {
        self.whole
            .iter()
            .map(move |&i| (self.keys[i].video_id.as_str(), self.row_at(i)))
    }

    /// Video ids of the gallery, ascending.
    pub fn video_ids(&self) -> impl Iterator<Item = &str> + '_ {
        self.whole.iter().map(move |&i| self.keys[i].video_id.as_str())
    }

    pub(crate) fn raw_data(&self) -> &[f32] {
        &self.data
    }
}

#[must_use]
pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

/// L2-normalize in double precision, then round to `f32`.
///
/// Returns `None` for zero or non-finite input.
#[must_use]
pub fn normalize(v: &[f32]) -> Option<Vec<f32>> {
    let norm = l2_norm(v);
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|&x| (f64::from(x) / norm) as f32).collect())
}

/// Embed every (video, segment) of the manifest through the gateway.
///
/// Vectors are normalized here, once, so ranking reduces to dot products.
/// `parallelism` bounds concurrent provider calls; the result does not depend
/// on it.
pub fn build_index(
    manifest: &CorpusManifest,
    gateway: &dyn ModelGateway,
    parallelism: usize,
) -> Result<EmbeddingMatrix, CorpusError> {
    let segments = manifest.segments();
    let jobs: Vec<RowKey> = manifest
        .videos
        .iter()
        .flat_map(|v| segments.iter().map(|&s| RowKey::new(v.video_id.as_str(), s)))
        .collect();

    let embed = |key: &RowKey| -> Result<(RowKey, Vec<f32>), CorpusError> {
        let raw = gateway
            .embed_video(&key.video_id, key.segment)
            .map_err(|source| CorpusError::Provider {
                video_id: key.video_id.clone(),
                source,
            })?;
        if raw.len() != manifest.dimension {
            return Err(CorpusError::DimensionMismatch {
                video_id: key.video_id.clone(),
                segment: key.segment,
                expected: manifest.dimension,
                actual: raw.len(),
            });
        }
        let unit = normalize(&raw).ok_or_else(|| CorpusError::DegenerateVector {
            video_id: key.video_id.clone(),
            segment: key.segment,
        })?;
        Ok((key.clone(), unit))
    };

    let rows: Vec<(RowKey, Vec<f32>)> = if parallelism <= 1 {
        jobs.iter().map(embed).collect::<Result<_, _>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .expect("thread pool");
        pool.install(|| jobs.par_iter().map(embed).collect::<Result<_, _>>())?
    };
    tracing::debug!(rows = rows.len(), "index built");
    EmbeddingMatrix::from_rows(manifest.dimension, rows)
}
