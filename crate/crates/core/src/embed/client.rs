//! Client for an out-of-process encoder service.
//!
//! Requests are `{"texts": [...]}` (or `{"clip_id": .., "frame_count": ..}`
//! for clips) and responses `{"vectors": [[f32, ...], ...]}`, carried over
//! [`crate::transport`].

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{normalized, EmbedError, TextEncoder};
use crate::transport::{Endpoint, JsonClient, TransportError};

#[derive(Deserialize)]
struct VectorsReply {
    vectors: Vec<Vec<f32>>,
}

pub struct ExternalEncoder {
    client: JsonClient,
    dim: usize,
}

impl ExternalEncoder {
    pub fn new(endpoint: Endpoint, dim: usize, timeout: Duration) -> Self {
        ExternalEncoder { client: JsonClient::new(endpoint, timeout), dim }
    }

    fn call(&self, body: serde_json::Value, expected: usize) -> Result<Vec<Vec<f32>>, EmbedError> {
        let reply = self.client.request(&body).map_err(|e| match e {
            TransportError::Protocol(msg) => EmbedError::Format(msg),
            other => EmbedError::EncoderUnavailable(other.to_string()),
        })?;
        let reply: VectorsReply =
            serde_json::from_value(reply).map_err(|e| EmbedError::Format(format!("bad encoder reply: {e}")))?;
        if reply.vectors.len() != expected {
            return Err(EmbedError::Format(format!("expected {expected} vectors, got {}", reply.vectors.len())));
        }
        reply
            .vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.dim {
                    return Err(EmbedError::DimMismatch { expected: self.dim, got: v.len() });
                }
                normalized(&v).ok_or(EmbedError::NotUnit { row: 0, norm: 0.0 })
            })
            .collect()
    }

    pub fn encode_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, EmbedError> {
        self.call(json!({ "texts": texts }), texts.len())
    }

    /// Frame embeddings for a clip the service can resolve by id.
    pub fn encode_clip_frames(&self, clip_id: &str, frame_count: usize) -> Result<Vec<Vec<f32>>, EmbedError> {
        self.call(json!({ "clip_id": clip_id, "frame_count": frame_count }), frame_count)
    }
}

impl TextEncoder for ExternalEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        Ok(self.encode_batch(&[text])?.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{testing, DEFAULT_TIMEOUT};

    #[test]
    fn subprocess_encoder_normalizes_vectors() {
        let script = r#"while read l; do echo '{"vectors":[[3,4,0,0,0,0,0,0]]}'; done"#;
        let enc = ExternalEncoder::new(
            Endpoint::Subprocess { program: "sh".into(), args: vec!["-c".into(), script.into()] },
            8,
            DEFAULT_TIMEOUT,
        );
        let v = enc.encode("anything").unwrap();
        assert!((v[0] - 0.6).abs() < 1e-6 && (v[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn http_encoder_errors() {
        let base = testing::serve(500, "{}", 1);
        let enc = ExternalEncoder::new(Endpoint::Http { url: format!("{base}/encode") }, 8, DEFAULT_TIMEOUT);
        assert!(matches!(enc.encode("x"), Err(EmbedError::EncoderUnavailable(_))));

        let base = testing::serve(200, r#"{"vectors":[[1,0]]}"#, 1);
        let enc = ExternalEncoder::new(Endpoint::Http { url: format!("{base}/encode") }, 8, DEFAULT_TIMEOUT);
        assert!(matches!(enc.encode("x"), Err(EmbedError::DimMismatch { .. })));
    }

    #[test]
    fn clip_frames_request() {
        let script = r#"while read l; do echo '{"vectors":[[1,0,0,0,0,0,0,0],[0,1,0,0,0,0,0,0]]}'; done"#;
        let enc = ExternalEncoder::new(
            Endpoint::Subprocess { program: "sh".into(), args: vec!["-c".into(), script.into()] },
            8,
            DEFAULT_TIMEOUT,
        );
        assert_eq!(enc.encode_clip_frames("clip-1", 2).unwrap().len(), 2);
        assert!(enc.encode_clip_frames("clip-1", 3).is_err());
    }
}
