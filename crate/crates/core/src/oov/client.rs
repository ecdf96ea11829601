//! Describer and proposer clients.
//!
//! Both speak `{"prompt": ...}` -> `{"text": ...}`. The describer request
//! also carries the pooled clip embedding under `"clip"`.

use std::time::Duration;

use serde_json::json;

use super::OovError;
use crate::datagen::World;
use crate::embed::dot;
use crate::transport::{Endpoint, JsonClient, TransportError};

pub trait CompletionClient: Send + Sync {
    fn complete(&self, prompt: &str, clip: Option<&[f32]>) -> Result<String, OovError>;
}

/// Client backed by a subprocess or HTTP endpoint.
pub struct TransportClient {
    inner: JsonClient,
}

impl TransportClient {
    pub fn new(endpoint: Endpoint, timeout: Duration) -> Self {
        TransportClient { inner: JsonClient::new(endpoint, timeout) }
    }
}

impl CompletionClient for TransportClient {
    fn complete(&self, prompt: &str, clip: Option<&[f32]>) -> Result<String, OovError> {
        let body = match clip {
            Some(c) => json!({ "prompt": prompt, "clip": c }),
            None => json!({ "prompt": prompt }),
        };
        let reply = self.inner.request(&body).map_err(|e| match e {
            TransportError::Unavailable(m) => OovError::ClientUnavailable(m),
            TransportError::Timeout(d) => OovError::ClientTimeout(d),
            TransportError::Protocol(m) => OovError::ClientProtocol(m),
        })?;
        reply
            .get("text")
            .and_then(|t| t.as_str())
            .map(str::to_string)
            .ok_or_else(|| OovError::ClientProtocol(format!("reply without a text field: {reply}")))
    }
}

/// Describes a clip by the scene of the nearest ground-truth clip centre.
pub struct StubDescriber {
    centers: Vec<(Vec<f32>, String)>,
}

impl StubDescriber {
    pub fn from_world(world: &World) -> Self {
        let mut centers = Vec::new();
        for e in &world.events {
            let label = world.scene_labels[e.scene].clone();
            centers.push((world.clip_center(e.id, false), label.clone()));
            if e.suffix.is_some() {
                centers.push((world.clip_center(e.id, true), label));
            }
        }
        StubDescriber { centers }
    }

    pub fn sentence(scene: &str) -> String {
        format!("a person works in the {scene}")
    }
}

impl CompletionClient for StubDescriber {
    fn complete(&self, _prompt: &str, clip: Option<&[f32]>) -> Result<String, OovError> {
        let clip = clip.ok_or_else(|| OovError::ClientProtocol("describer needs a clip".into()))?;
        let best = self
            .centers
            .iter()
            .max_by(|a, b| dot(&a.0, clip).total_cmp(&dot(&b.0, clip)))
            .ok_or_else(|| OovError::ClientProtocol("empty world".into()))?;
        Ok(Self::sentence(&best.1))
    }
}

/// Lists every event of the scene named in the prompt's last `scene:` line.
pub struct StubProposer {
    scenes: Vec<(String, Vec<String>)>,
}

impl StubProposer {
    pub fn new(scenes: Vec<(String, Vec<String>)>) -> Self {
        StubProposer { scenes }
    }

    pub fn from_world(world: &World) -> Self {
        let scenes = world
            .scene_labels
            .iter()
            .zip(&world.scene_events)
            .map(|(label, ids)| (label.clone(), ids.iter().map(|&i| world.events[i].base.clone()).collect()))
            .collect();
        StubProposer { scenes }
    }
}

impl CompletionClient for StubProposer {
    fn complete(&self, prompt: &str, _clip: Option<&[f32]>) -> Result<String, OovError> {
        let scene_line = prompt.lines().rev().find_map(|l| l.strip_prefix("scene:")).unwrap_or(prompt).to_lowercase();
        let found = self
            .scenes
            .iter()
            .filter(|(label, _)| scene_line.contains(label.as_str()))
            .max_by_key(|(label, _)| label.len());
        Ok(found.map(|(_, items)| items.join("; ")).unwrap_or_default())
    }
}
