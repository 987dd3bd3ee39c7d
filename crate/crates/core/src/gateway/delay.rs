use std::thread;
use std::time::Duration;

use super::{GatewayError, ModelGateway};
use crate::corpus::Segment;

/// Wraps a gateway and sleeps a fixed delay before every call. Used to give
/// the timing study a known per-call cost.
#[derive(Debug, Clone)]
pub struct DelayedGateway<G> {
    inner: G,
    delay: Duration,
}

impl<G> DelayedGateway<G> {
    pub fn new(inner: G, delay: Duration) -> Self {
        Self { inner, delay }
    }

    fn pause(&self) {
        if !self.delay.is_zero() {
            thread::sleep(self.delay);
        }
    }
}

impl<G: ModelGateway> ModelGateway for DelayedGateway<G> {
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, GatewayError> {
        self.pause();
        self.inner.embed_text(text)
    }

    fn embed_video(&self, video_id: &str, segment: Segment) -> Result<Vec<f32>, GatewayError> {
        self.pause();
        self.inner.embed_video(video_id, segment)
    }

    fn caption(&self, video_id: &str) -> Result<String, GatewayError> {
        self.pause();
        self.inner.caption(video_id)
    }

    fn vqa(
        &self,
        video_id: &str,
        question: &str,
        segment: Segment,
    ) -> Result<String, GatewayError> {
        self.pause();
        self.inner.vqa(video_id, question, segment)
    }

    fn itm(&self, video_id: &str, text: &str) -> Result<f64, GatewayError> {
        self.pause();
        self.inner.itm(video_id, text)
    }

    fn lm_generate(&self, prompt: &str, max_tokens: usize) -> Result<String, GatewayError> {
        self.pause();
        self.inner.lm_generate(prompt, max_tokens)
    }
}
