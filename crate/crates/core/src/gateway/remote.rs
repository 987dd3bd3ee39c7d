//! HTTP client for the model wire protocol.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use reqwest::blocking::Client;
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::wire::{
    CaptionRequest, CaptionResponse, EmbedTextRequest, EmbedVideoRequest, ErrorBody, ItmRequest,
    ItmResponse, LmGenerateRequest, LmGenerateResponse, VectorResponse, VqaRequest, VqaResponse,
    CODE_UNKNOWN_VIDEO, CODE_UNSUPPORTED_SEGMENT,
};
use super::{Endpoint, GatewayError, ModelGateway, ProviderDescriptor, ProviderKind};
use crate::corpus::Segment;

pub const MAX_ATTEMPTS: u32 = 3;
const DEFAULT_BACKOFF: Duration = Duration::from_millis(100);

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Limiter {
    free: Mutex<usize>,
    released: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(permits: usize) -> Self {
        Self {
            free: Mutex::new(permits.max(1)),
            released: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("limiter lock");
        while *free == 0 {
            free = self.released.wait(free).expect("limiter lock");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("limiter lock") += 1;
        self.0.released.notify_one();
    }
}

enum Failure {
    Retryable(GatewayError),
    Final(GatewayError),
}

#[derive(Debug)]
pub struct RemoteProvider {
    base_url: String,
    dimension: usize,
    client: Client,
    limiter: Limiter,
    backoff: Duration,
}

impl RemoteProvider {
    pub fn new(descriptor: &ProviderDescriptor) -> Result<Self, GatewayError> {
        let ProviderKind::Remote { base_url } = &descriptor.kind else {
            return Err(GatewayError::InvalidRequest {
                endpoint: Endpoint::EmbedText,
                message: "descriptor is not a remote provider".into(),
            });
        };
        let client = Client::builder()
            .timeout(descriptor.timeout())
            .build()
            .map_err(|e| GatewayError::Transport {
                endpoint: Endpoint::EmbedText,
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            dimension: descriptor.dimension,
            client,
            limiter: Limiter::new(descriptor.max_concurrency),
            backoff: DEFAULT_BACKOFF,
        })
    }

    /// Base delay before the first retry; doubles for each further attempt.
    #[must_use]
    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        endpoint: Endpoint,
        body: &Req,
    ) -> Result<Resp, GatewayError> {
        let url = format!("{}{}", self.base_url, endpoint.path());
        let mut attempt = 1;
        loop {
            let outcome = {
                let _permit = self.limiter.acquire();
                self.attempt(endpoint, &url, body, attempt)
            };
            match outcome {
                Ok(resp) => return Ok(resp),
                Err(Failure::Final(err)) => return Err(err),
                Err(Failure::Retryable(err)) if attempt >= MAX_ATTEMPTS => return Err(err),
                Err(Failure::Retryable(err)) => {
                    tracing::warn!(%endpoint, attempt, error = %err, "retrying model request");
                    thread::sleep(self.backoff * 2u32.pow(attempt - 1));
                    attempt += 1;
                }
            }
        }
    }

    fn attempt<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        endpoint: Endpoint,
        url: &str,
        body: &Req,
        attempts: u32,
    ) -> Result<Resp, Failure> {
        let response = self.client.post(url).json(body).send().map_err(|e| {
            Failure::Retryable(if e.is_timeout() {
                GatewayError::Timeout { endpoint, attempts }
            } else {
                GatewayError::Transport {
                    endpoint,
                    attempts,
                    message: e.to_string(),
                }
            })
        })?;
        let status = response.status();
        let text = response.text().map_err(|e| {
            Failure::Retryable(GatewayError::Transport {
                endpoint,
                attempts,
                message: e.to_string(),
            })
        })?;
        if status.is_success() {
            return serde_json::from_str(&text).map_err(|e| {
                Failure::Final(GatewayError::Malformed {
                    endpoint,
                    message: e.to_string(),
                })
            });
        }
        let detail = serde_json::from_str::<ErrorBody>(&text).ok().map(|b| b.error);
        let message = detail
            .as_ref()
            .map_or_else(|| text.clone(), |d| d.message.clone());
        let err = GatewayError::Status {
            endpoint,
            status: status.as_u16(),
            attempts,
            message,
        };
        if status.is_client_error() {
            // Map well-known codes back to their typed errors.
            if let Some(d) = &detail {
                if d.code == CODE_UNKNOWN_VIDEO {
                    return Err(Failure::Final(GatewayError::UnknownVideo(d.message.clone())));
                }
                if d.code == CODE_UNSUPPORTED_SEGMENT {
                    return Err(Failure::Final(GatewayError::Status {
                        endpoint,
                        status: status.as_u16(),
                        attempts,
                        message: format!("{CODE_UNSUPPORTED_SEGMENT}: {}", d.message),
                    }));
                }
            }
            Err(Failure::Final(err))
        } else {
            Err(Failure::Retryable(err))
        }
    }

    fn check_dimension(&self, endpoint: Endpoint, v: Vec<f32>) -> Result<Vec<f32>, GatewayError> {
        if v.len() == self.dimension {
            Ok(v)
        } else {
            Err(GatewayError::Malformed {
                endpoint,
                message: format!("vector has {} dimensions, expected {}", v.len(), self.dimension),
            })
        }
    }
}

impl ModelGateway for RemoteProvider {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, GatewayError> {
        let resp: VectorResponse = self.post(
            Endpoint::EmbedText,
            &EmbedTextRequest {
                text: text.to_string(),
            },
        )?;
        self.check_dimension(Endpoint::EmbedText, resp.vector)
    }

    fn embed_video(&self, video_id: &str, segment: Segment) -> Result<Vec<f32>, GatewayError> {
        let resp: VectorResponse = self.post(
            Endpoint::EmbedVideo,
            &EmbedVideoRequest {
                video_id: video_id.to_string(),
                segment,
            },
        )?;
        // Dimension is checked by the index builder so it can name the video.
        Ok(resp.vector)
    }

    fn caption(&self, video_id: &str) -> Result<String, GatewayError> {
        let resp: CaptionResponse = self.post(
            Endpoint::Caption,
            &CaptionRequest {
                video_id: video_id.to_string(),
            },
        )?;
        Ok(resp.caption)
    }

    fn vqa(
        &self,
        video_id: &str,
        question: &str,
        segment: Segment,
    ) -> Result<String, GatewayError> {
        let resp: VqaResponse = self.post(
            Endpoint::Vqa,
            &VqaRequest {
                video_id: video_id.to_string(),
                question: question.to_string(),
                segment,
            },
        )?;
        Ok(resp.answer)
    }

    fn itm(&self, video_id: &str, text: &str) -> Result<f64, GatewayError> {
        let resp: ItmResponse = self.post(
            Endpoint::Itm,
            &ItmRequest {
                video_id: video_id.to_string(),
                text: text.to_string(),
            },
        )?;
        if resp.score.is_finite() {
            Ok(resp.score)
        } else {
            Err(GatewayError::Malformed {
                endpoint: Endpoint::Itm,
                message: "non-finite score".into(),
            })
        }
    }

    fn lm_generate(&self, prompt: &str, max_tokens: usize) -> Result<String, GatewayError> {
        let resp: LmGenerateResponse = self.post(
            Endpoint::LmGenerate,
            &LmGenerateRequest {
                prompt: prompt.to_string(),
                max_tokens,
            },
        )?;
        Ok(resp.text)
    }
}
