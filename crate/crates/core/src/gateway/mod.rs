//! Access to the external models: text/video encoders, captioner, VideoQA,
//! image-text matching and the question-generating language model.
//!
//! [`ModelGateway`] is a blocking request/response contract. Two providers ship
//! with the crate: [`SyntheticProvider`], a deterministic stand-in backed by
//! ground-truth attributes, and [`RemoteProvider`], which speaks the JSON wire
//! protocol in [`wire`].

mod delay;
pub mod remote;
pub mod synthetic;
pub mod wire;

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusManifest, Segment};

pub use delay::DelayedGateway;
pub use remote::RemoteProvider;
pub use synthetic::{SyntheticProvider, SyntheticWorld};

/// The five model endpoints (plus text embedding) of the wire protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Endpoint {
    EmbedText,
    EmbedVideo,
    Caption,
    Vqa,
    Itm,
    LmGenerate,
}

impl Endpoint {
    pub const ALL: [Endpoint; 6] = [
        Endpoint::EmbedText,
        Endpoint::EmbedVideo,
        Endpoint::Caption,
        Endpoint::Vqa,
        Endpoint::Itm,
        Endpoint::LmGenerate,
    ];

    #[must_use]
    pub const fn path(self) -> &'static str {
        match self {
            Endpoint::EmbedText => "/v1/embed/text",
            Endpoint::EmbedVideo => "/v1/embed/video",
            Endpoint::Caption => "/v1/caption",
            Endpoint::Vqa => "/v1/vqa",
            Endpoint::Itm => "/v1/itm",
            Endpoint::LmGenerate => "/v1/lm/generate",
        }
    }

    #[must_use]
    pub fn from_path(path: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.path() == path)
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.path())
    }
}

#[derive(Debug, Clone, Error)]
pub enum GatewayError {
    #[error("unknown video id {0:?}")]
    UnknownVideo(String),
    #[error("video {video_id:?} has no {segment} segment")]
    UnsupportedSegment { video_id: String, segment: Segment },
    #[error("{endpoint}: invalid request: {message}")]
    InvalidRequest { endpoint: Endpoint, message: String },
    #[error("{endpoint}: transport error after {attempts} attempt(s): {message}")]
    Transport {
        endpoint: Endpoint,
        attempts: u32,
        message: String,
    },
    #[error("{endpoint}: timed out after {attempts} attempt(s)")]
    Timeout { endpoint: Endpoint, attempts: u32 },
    #[error("{endpoint}: HTTP {status} after {attempts} attempt(s): {message}")]
    Status {
        endpoint: Endpoint,
        status: u16,
        attempts: u32,
        message: String,
    },
    #[error("{endpoint}: malformed response: {message}")]
    Malformed { endpoint: Endpoint, message: String },
    #[error("{endpoint} is not supported by this provider")]
    Unsupported { endpoint: Endpoint },
}

/// Blocking access to the model roles. Implementations must be safe to call
/// from many threads at once.
pub trait ModelGateway: Send + Sync {
    /// Dimension of every vector this provider returns.
    fn dimension(&self) -> usize;

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, GatewayError>;

    fn embed_video(&self, video_id: &str, segment: Segment) -> Result<Vec<f32>, GatewayError>;

    fn caption(&self, video_id: &str) -> Result<String, GatewayError>;

    fn vqa(&self, video_id: &str, question: &str, segment: Segment)
        -> Result<String, GatewayError>;

    /// Image-text matching score in `[0, 1]`.
    fn itm(&self, video_id: &str, text: &str) -> Result<f64, GatewayError>;

    fn lm_generate(&self, prompt: &str, max_tokens: usize) -> Result<String, GatewayError>;
}

impl<G: ModelGateway + ?Sized> ModelGateway for Arc<G> {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn embed_text(&self, text: &str) -> Result<Vec<f32>, GatewayError> {
        (**self).embed_text(text)
    }
    fn embed_video(&self, video_id: &str, segment: Segment) -> Result<Vec<f32>, GatewayError> {
        (**self).embed_video(video_id, segment)
    }
    fn caption(&self, video_id: &str) -> Result<String, GatewayError> {
        (**self).caption(video_id)
    }
    fn vqa(
        &self,
        video_id: &str,
        question: &str,
        segment: Segment,
    ) -> Result<String, GatewayError> {
        (**self).vqa(video_id, question, segment)
    }
    fn itm(&self, video_id: &str, text: &str) -> Result<f64, GatewayError> {
        (**self).itm(video_id, text)
    }
    fn lm_generate(&self, prompt: &str, max_tokens: usize) -> Result<String, GatewayError> {
        (**self).lm_generate(prompt, max_tokens)
    }
}

/// Which provider backs a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderKind {
    Synthetic {
        seed: u64,
        /// Probability that the synthetic VideoQA swaps an answer token for a
        /// distractor.
        #[serde(default)]
        noise_rate: f64,
    },
    Remote {
        base_url: String,
    },
}

fn default_timeout_secs() -> f64 {
    30.0
}

fn default_max_concurrency() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderDescriptor {
    #[serde(flatten)]
    pub kind: ProviderKind,
    pub dimension: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_concurrency")]
    pub max_concurrency: usize,
}

impl ProviderDescriptor {
    #[must_use]
    pub fn synthetic(seed: u64, dimension: usize) -> Self {
        Self {
            kind: ProviderKind::Synthetic {
                seed,
                noise_rate: 0.0,
            },
            dimension,
            timeout_secs: default_timeout_secs(),
            max_concurrency: default_max_concurrency(),
        }
    }

    #[must_use]
    pub fn remote(base_url: impl Into<String>, dimension: usize) -> Self {
        Self {
            kind: ProviderKind::Remote {
                base_url: base_url.into(),
            },
            dimension,
            timeout_secs: default_timeout_secs(),
            max_concurrency: default_max_concurrency(),
        }
    }

    #[must_use]
    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    /// Invariant violations, empty when valid.
    #[must_use]
    pub fn problems(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.dimension < 8 {
            problems.push(format!(
                "provider dimension {} is below the minimum of 8",
                self.dimension
            ));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            problems.push(format!(
                "provider timeout {} must be positive",
                self.timeout_secs
            ));
        }
        if self.max_concurrency == 0 {
            problems.push("provider max_concurrency must be at least 1".into());
        }
        match &self.kind {
            ProviderKind::Synthetic { noise_rate, .. } => {
                if !(0.0..=1.0).contains(noise_rate) {
                    problems.push(format!("noise_rate {noise_rate} must lie in [0, 1]"));
                }
            }
            ProviderKind::Remote { base_url } => {
                if base_url.trim().is_empty() {
                    problems.push("remote provider needs a base_url".into());
                }
            }
        }
        problems
    }
}

/// Instantiate the provider a manifest describes.
pub fn open_provider(manifest: &CorpusManifest) -> Result<Arc<dyn ModelGateway>, GatewayError> {
    let descriptor = &manifest.provider;
    match &descriptor.kind {
        ProviderKind::Synthetic { .. } => Ok(Arc::new(SyntheticProvider::new(Arc::new(
            SyntheticWorld::from_manifest(manifest),
        )))),
        ProviderKind::Remote { .. } => Ok(Arc::new(RemoteProvider::new(descriptor)?)),
    }
}
