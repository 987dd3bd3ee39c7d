//! JSON bodies of the model wire protocol.
//!
//! | endpoint               | request                              | response         |
//! |------------------------|--------------------------------------|------------------|
//! | `POST /v1/embed/text`  | `{text}`                             | `{vector:[...]}` |
//! | `POST /v1/embed/video` | `{video_id, segment}`                | `{vector:[...]}` |
//! | `POST /v1/caption`     | `{video_id}`                         | `{caption}`      |
//! | `POST /v1/vqa`         | `{video_id, question, segment}`      | `{answer}`       |
//! | `POST /v1/itm`         | `{video_id, text}`                   | `{score}`        |
//! | `POST /v1/lm/generate` | `{prompt, max_tokens}`               | `{text}`         |
//!
//! Errors carry `{"error": {"code", "message"}}` with a 4xx/5xx status.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Endpoint, GatewayError, ModelGateway};
use crate::corpus::Segment;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedTextRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedVideoRequest {
    pub video_id: String,
    #[serde(default = "whole")]
    pub segment: Segment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorResponse {
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRequest {
    pub video_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionResponse {
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaRequest {
    pub video_id: String,
    pub question: String,
    #[serde(default = "whole")]
    pub segment: Segment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaResponse {
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItmRequest {
    pub video_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItmResponse {
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmGenerateRequest {
    pub prompt: String,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmGenerateResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

impl ErrorBody {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            error: ErrorDetail {
                code: code.into(),
                message: message.into(),
            },
        }
    }
}

fn whole() -> Segment {
    Segment::Whole
}

fn default_max_tokens() -> usize {
    32
}

pub const CODE_UNKNOWN_VIDEO: &str = "unknown_video";
pub const CODE_UNSUPPORTED_SEGMENT: &str = "unsupported_segment";
pub const CODE_BAD_REQUEST: &str = "bad_request";
pub const CODE_UPSTREAM: &str = "upstream_error";

/// HTTP status and error body for a gateway failure, server side.
#[must_use]
pub fn error_response(err: &GatewayError) -> (u16, ErrorBody) {
    match err {
        GatewayError::UnknownVideo(_) => (404, ErrorBody::new(CODE_UNKNOWN_VIDEO, err.to_string())),
        GatewayError::UnsupportedSegment { .. } => (
            422,
            ErrorBody::new(CODE_UNSUPPORTED_SEGMENT, err.to_string()),
        ),
        GatewayError::InvalidRequest { .. } => {
            (400, ErrorBody::new(CODE_BAD_REQUEST, err.to_string()))
        }
        GatewayError::Unsupported { .. } => (501, ErrorBody::new("unsupported", err.to_string())),
        _ => (502, ErrorBody::new(CODE_UPSTREAM, err.to_string())),
    }
}

/// Serve one wire-protocol request against a gateway. Returns the HTTP status
/// and JSON body to send back.
pub fn dispatch(gateway: &dyn ModelGateway, endpoint: Endpoint, body: Value) -> (u16, Value) {
    fn parse<T: for<'de> Deserialize<'de>>(endpoint: Endpoint, body: Value) -> Result<T, GatewayError> {
        serde_json::from_value(body).map_err(|e| GatewayError::InvalidRequest {
            endpoint,
            message: e.to_string(),
        })
    }
    fn ok<T: Serialize>(value: T) -> Result<Value, GatewayError> {
        Ok(serde_json::to_value(value).expect("response serializes"))
    }

    let result = (|| match endpoint {
        Endpoint::EmbedText => {
            let req: EmbedTextRequest = parse(endpoint, body)?;
            ok(VectorResponse {
                vector: gateway.embed_text(&req.text)?,
            })
        }
        Endpoint::EmbedVideo => {
            let req: EmbedVideoRequest = parse(endpoint, body)?;
            ok(VectorResponse {
                vector: gateway.embed_video(&req.video_id, req.segment)?,
            })
        }
        Endpoint::Caption => {
            let req: CaptionRequest = parse(endpoint, body)?;
            ok(CaptionResponse {
                caption: gateway.caption(&req.video_id)?,
            })
        }
        Endpoint::Vqa => {
            let req: VqaRequest = parse(endpoint, body)?;
            ok(VqaResponse {
                answer: gateway.vqa(&req.video_id, &req.question, req.segment)?,
            })
        }
        Endpoint::Itm => {
            let req: ItmRequest = parse(endpoint, body)?;
            ok(ItmResponse {
                score: gateway.itm(&req.video_id, &req.text)?,
            })
        }
        Endpoint::LmGenerate => {
            let req: LmGenerateRequest = parse(endpoint, body)?;
            ok(LmGenerateResponse {
                text: gateway.lm_generate(&req.prompt, req.max_tokens)?,
            })
        }
    })();

    match result {
        Ok(value) => (200, value),
        Err(err) => {
            let (status, body) = error_response(&err);
            (status, serde_json::to_value(body).expect("error serializes"))
        }
    }
}
