//! Out-of-vocabulary detection and vocabulary upgrade.
//!
//! A clip whose best prefix match scores below the threshold is described by
//! a scene describer, a narration proposer suggests candidate events for that
//! scene, and the novel ones are embedded and merged into a new snapshot.

mod client;
mod prompts;

use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use client::{CompletionClient, StubDescriber, StubProposer, TransportClient};
pub use prompts::{describer_prompt, render_proposer_prompt, DESCRIBER_PROMPT_V1, PROPOSER_TEMPLATE_V1};

use crate::embed::{EmbedError, EmbeddingMatrix, TextEncoder, VocabMatrices};
use crate::index::{retrieve_chain_pooled, ChainOptions, ChainResult, HierIndex, IndexError};
use crate::npe::NormalizeConfig;
use crate::transport::{Endpoint, DEFAULT_TIMEOUT};
use crate::vocab::{EntryKind, NewEntry, VocabError, Vocabulary};

#[derive(Debug, thiserror::Error)]
pub enum OovError {
    #[error("client unavailable: {0}")]
    ClientUnavailable(String),
    #[error("client gave no answer within {0:?}")]
    ClientTimeout(Duration),
    #[error("client protocol error: {0}")]
    ClientProtocol(String),
    #[error("invalid upgrade config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

impl OovError {
    pub fn code(&self) -> &'static str {
        match self {
            OovError::ClientUnavailable(_) => "oov.client_unavailable",
            OovError::ClientTimeout(_) => "oov.client_timeout",
            OovError::ClientProtocol(_) => "oov.client_protocol",
            OovError::InvalidConfig(_) => "oov.invalid_config",
            OovError::Vocab(e) => e.code(),
            OovError::Embed(e) => e.code(),
            OovError::Index(e) => e.code(),
        }
    }
}

/// Which scenes a newly proposed prefix is attached to.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenePolicy {
    /// The scene the clip was routed to.
    #[default]
    TopScene,
    /// Every scene.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UpgradeConfig {
    pub threshold: f32,
    pub max_new_per_event: usize,
    pub scene_policy: ScenePolicy,
    pub describer: Option<Endpoint>,
    pub proposer: Option<Endpoint>,
    pub timeout_s: f64,
    pub chain: ChainOptions,
}

impl Default for UpgradeConfig {
    fn default() -> Self {
        UpgradeConfig {
            threshold: 0.4,
            max_new_per_event: 10,
            scene_policy: ScenePolicy::TopScene,
            describer: None,
            proposer: None,
            timeout_s: DEFAULT_TIMEOUT.as_secs_f64(),
            chain: ChainOptions::default(),
        }
    }
}

impl UpgradeConfig {
    pub fn validate(&self) -> Result<(), OovError> {
        if !(self.threshold > -1.0 && self.threshold < 1.0) {
            return Err(OovError::InvalidConfig(format!("threshold {} outside (-1, 1)", self.threshold)));
        }
        if self.max_new_per_event == 0 {
            return Err(OovError::InvalidConfig("max_new_per_event must be positive".into()));
        }
        if !(self.timeout_s > 0.0) {
            return Err(OovError::InvalidConfig("timeout_s must be positive".into()));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_s)
    }

    /// Transport clients for the configured describer and proposer endpoints.
    pub fn transport_clients(&self) -> Result<(TransportClient, TransportClient), OovError> {
        let make = |e: &Option<Endpoint>, role: &str| {
            e.clone()
                .map(|e| TransportClient::new(e, self.timeout()))
                .ok_or_else(|| OovError::InvalidConfig(format!("no {role} endpoint configured")))
        };
        Ok((make(&self.describer, "describer")?, make(&self.proposer, "proposer")?))
    }
}

/// True iff the prefix-stage top-1 score is strictly below the threshold.
pub fn detect_oov(chain: &ChainResult, cfg: &UpgradeConfig) -> bool {
    chain.prefix.score < cfg.threshold
}

pub fn describe_scene(client: &dyn CompletionClient, clip: &[f32]) -> Result<String, OovError> {
    let text = client.complete(describer_prompt(), Some(clip))?;
    let line = text.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    if line.is_empty() {
        return Err(OovError::ClientProtocol("describer returned an empty sentence".into()));
    }
    Ok(line.to_string())
}

pub fn propose_narrations(client: &dyn CompletionClient, scene_sentence: &str) -> Result<String, OovError> {
    client.complete(&render_proposer_prompt(scene_sentence), None)
}

/// Split on ';', clean each item like corpus narrations (a trailing '.' is
/// dropped too), remove empties and repeats, keep at most `max` items.
pub fn parse_proposals(raw: &str, max: usize) -> Vec<String> {
    let cfg = NormalizeConfig::default();
    let mut out: Vec<String> = Vec::new();
    for item in raw.split(';') {
        let text = cfg.clean(item.trim().trim_end_matches('.'));
        if !text.is_empty() && !out.contains(&text) {
            out.push(text);
        }
    }
    out.truncate(max);
    out
}

/// One consistent (vocabulary, matrices, index) triple.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub id: u64,
    pub vocab: Arc<Vocabulary>,
    pub matrices: Arc<VocabMatrices>,
    pub index: Arc<HierIndex>,
}

impl Snapshot {
    pub fn new(vocab: Arc<Vocabulary>, matrices: VocabMatrices) -> Result<Self, OovError> {
        let index = HierIndex::build(vocab.clone(), &matrices)?;
        Ok(Snapshot { id: 0, vocab, matrices: Arc::new(matrices), index: Arc::new(index) })
    }

    pub fn retrieve(&self, clip: &[f32], opts: ChainOptions) -> Result<ChainResult, OovError> {
        Ok(retrieve_chain_pooled(&self.index, clip, opts)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpgradeReport {
    pub trigger_score: f32,
    pub describer_sentence: String,
    pub proposer_text: String,
    pub parsed: Vec<String>,
    pub accepted: Vec<String>,
    pub rejected: Vec<String>,
    pub accepted_count: usize,
    pub rejected_count: usize,
    pub scene_ids: Vec<u32>,
    pub snapshot_id: u64,
    pub vocab_size_before: usize,
    pub vocab_size_after: usize,
    pub retry: ChainResult,
    pub seconds: f64,
}

/// Describe, propose, parse and merge for one clip. `snapshot` is not
/// modified; the returned snapshot is `snapshot` itself when nothing new was
/// accepted.
pub fn upgrade(
    snapshot: &Snapshot,
    clip: &[f32],
    encoder: &dyn TextEncoder,
    describer: &dyn CompletionClient,
    proposer: &dyn CompletionClient,
    cfg: &UpgradeConfig,
) -> Result<(Snapshot, UpgradeReport), OovError> {
    cfg.validate()?;
    let start = Instant::now();
    let chain = snapshot.retrieve(clip, cfg.chain)?;
    let sentence = describe_scene(describer, clip)?;
    let raw = propose_narrations(proposer, &sentence)?;
    let parsed = parse_proposals(&raw, cfg.max_new_per_event);

    let vocab = &snapshot.vocab;
    let (rejected, accepted): (Vec<String>, Vec<String>) =
        parsed.iter().cloned().partition(|t| vocab.find(EntryKind::Prefix, t).is_some());
    let scene_ids = match cfg.scene_policy {
        ScenePolicy::TopScene => vec![chain.scene.entry_id],
        ScenePolicy::Global => vocab.ids(EntryKind::Scene).to_vec(),
    };

    let next = if accepted.is_empty() {
        snapshot.clone()
    } else {
        let entries: Vec<NewEntry> = accepted.iter().map(|t| NewEntry::prefix(t.clone(), scene_ids.clone())).collect();
        let new_vocab = Arc::new(vocab.merge(&entries)?);
        let rows: Vec<Vec<f32>> = accepted.iter().map(|t| encoder.encode(t)).collect::<Result<_, _>>()?;
        let mut matrices = (*snapshot.matrices).clone();
        matrices.prefix.append(&EmbeddingMatrix::from_rows(matrices.dim(), &rows)?)?;
        let index = HierIndex::build(new_vocab.clone(), &matrices)?;
        Snapshot { id: snapshot.id + 1, vocab: new_vocab, matrices: Arc::new(matrices), index: Arc::new(index) }
    };
    let retry = next.retrieve(clip, cfg.chain)?;
    let report = UpgradeReport {
        trigger_score: chain.prefix.score,
        describer_sentence: sentence,
        proposer_text: raw,
        accepted_count: accepted.len(),
        rejected_count: rejected.len(),
        parsed,
        accepted,
        rejected,
        scene_ids,
        snapshot_id: next.id,
        vocab_size_before: vocab.len(),
        vocab_size_after: next.vocab.len(),
        retry,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((next, report))
}

/// Holds the active snapshot. Readers take a cheap `Arc` clone; upgrades are
/// serialized by a writer lock and published with a single swap.
pub struct SnapshotStore {
    current: RwLock<Arc<Snapshot>>,
    writer: Mutex<()>,
}

impl SnapshotStore {
    pub fn new(snapshot: Snapshot) -> Self {
        SnapshotStore { current: RwLock::new(Arc::new(snapshot)), writer: Mutex::new(()) }
    }

    pub fn current(&self) -> Arc<Snapshot> {
        self.current.read().expect("snapshot lock poisoned").clone()
    }

    /// Runs [`upgrade`] against the current snapshot and publishes the result.
    /// On error the active snapshot is left untouched.
    pub fn upgrade(
        &self,
        clip: &[f32],
        encoder: &dyn TextEncoder,
        describer: &dyn CompletionClient,
        proposer: &dyn CompletionClient,
        cfg: &UpgradeConfig,
    ) -> Result<UpgradeReport, OovError> {
        let _guard = self.writer.lock().expect("writer lock poisoned");
        let base = self.current();
        let (next, report) = upgrade(&base, clip, encoder, describer, proposer, cfg)?;
        if next.id != base.id {
            *self.current.write().expect("snapshot lock poisoned") = Arc::new(next);
        }
        Ok(report)
    }

    /// Retrieve; on an OOV match upgrade once and return the retried chain.
    pub fn process_clip(
        &self,
        clip: &[f32],
        encoder: &dyn TextEncoder,
        describer: &dyn CompletionClient,
        proposer: &dyn CompletionClient,
        cfg: &UpgradeConfig,
    ) -> Result<ClipOutcome, OovError> {
        let first = self.current().retrieve(clip, cfg.chain)?;
        if !detect_oov(&first, cfg) {
            return Ok(ClipOutcome { chain: first, oov: false, upgrade: None });
        }
        let report = self.upgrade(clip, encoder, describer, proposer, cfg)?;
        Ok(ClipOutcome { chain: report.retry.clone(), oov: true, upgrade: Some(report) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipOutcome {
    pub chain: ChainResult,
    pub oov: bool,
    pub upgrade: Option<UpgradeReport>,
}

#[cfg(test)]
mod tests;
