//! Narration Pair Encoding.
//!
//! A narration corpus is cleaned, deduplicated and split into *base*
//! narrations (no other narration is a strict word-prefix of them) and a
//! shared, deduplicated list of postfixes: the trailing words that longer
//! narrations add on top of a shorter narration.
//!
//! ```text
//! cut a potato                 -> prefix
//! cut a potato with a knife    -> "cut a potato" + "with a knife"
//! walk around                  -> prefix
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Text of the reserved postfix meaning "no postfix".
pub const EMPTY_POSTFIX: &str = "";

/// Scene labels observed for each normalized narration text.
pub type SceneLabels = BTreeMap<String, BTreeSet<String>>;

#[derive(Debug, thiserror::Error)]
pub enum NpeError {
    #[error("invalid strip pattern {pattern:?}: {source}")]
    BadPattern {
        pattern: String,
        #[source]
        source: regex::Error,
    },
}

impl NpeError {
    pub fn code(&self) -> &'static str {
        match self {
            NpeError::BadPattern { .. } => "npe.bad_pattern",
        }
    }
}

/// A raw corpus record before cleaning.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawNarration {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<String>,
}

impl RawNarration {
    pub fn text(text: impl Into<String>) -> Self {
        RawNarration { text: text.into(), ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Narration {
    pub text: String,
    pub source_id: Option<String>,
    pub scene: Option<String>,
}

impl Narration {
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.text.split(' ')
    }
}

/// Cleaning rules applied before deduplication.
#[derive(Debug, Clone)]
pub struct NormalizeConfig {
    strip: Vec<Regex>,
}

impl NormalizeConfig {
    pub const DEFAULT_STRIP_PATTERNS: [&'static str; 2] = [r"^\s*#C\s+C\b", r"^\s*#O\b"];

    pub fn with_patterns<S: AsRef<str>>(patterns: &[S]) -> Result<Self, NpeError> {
        let strip = patterns
            .iter()
            .map(|p| {
                Regex::new(p.as_ref()).map_err(|source| NpeError::BadPattern {
                    pattern: p.as_ref().to_string(),
                    source,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(NormalizeConfig { strip })
    }

    /// Strip tags, lowercase and collapse whitespace. Returns an empty string
    /// when nothing is left.
    pub fn clean(&self, raw: &str) -> String {
        let mut text = raw.to_string();
        for re in &self.strip {
            text = re.replace_all(&text, " ").into_owned();
        }
        normalize_text(&text)
    }
}

impl Default for NormalizeConfig {
    fn default() -> Self {
        NormalizeConfig::with_patterns(&Self::DEFAULT_STRIP_PATTERNS).expect("default patterns compile")
    }
}

/// Lowercase and collapse all whitespace runs to single spaces.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizeReport {
    pub input_count: usize,
    pub dropped_empty: usize,
    pub duplicates_removed: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub narrations: Vec<Narration>,
    /// Every scene label seen for a text, including labels carried by
    /// records that were dropped as duplicates.
    pub scene_labels: SceneLabels,
    pub report: NormalizeReport,
}

pub fn normalize_corpus(raw: &[RawNarration], cfg: &NormalizeConfig) -> Corpus {
    let mut corpus = Corpus::default();
    corpus.report.input_count = raw.len();
    let mut seen = HashSet::new();
    for record in raw {
        let text = cfg.clean(&record.text);
        if text.is_empty() {
            corpus.report.dropped_empty += 1;
            continue;
        }
        if let Some(scene) = record.scene.as_deref().map(normalize_text).filter(|s| !s.is_empty()) {
            corpus.scene_labels.entry(text.clone()).or_default().insert(scene);
        }
        if !seen.insert(text.clone()) {
            corpus.report.duplicates_removed += 1;
            continue;
        }
        corpus.narrations.push(Narration {
            text,
            source_id: record.source_id.clone(),
            scene: record.scene.as_deref().map(normalize_text).filter(|s| !s.is_empty()),
        });
    }
    corpus
}

/// Convenience wrapper over [`normalize_corpus`] for bare strings.
pub fn normalize_texts<S: AsRef<str>>(raw: &[S], cfg: &NormalizeConfig) -> Vec<Narration> {
    let records: Vec<RawNarration> = raw.iter().map(|s| RawNarration::text(s.as_ref())).collect();
    normalize_corpus(&records, cfg).narrations
}

/// Word-prefix string -> ascending ids of the narrations starting with it.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PrefixDict {
    map: HashMap<String, Vec<usize>>,
}

impl PrefixDict {
    pub fn get(&self, prefix: &str) -> Option<&[usize]> {
        self.map.get(prefix).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }
}

/// Byte offsets where each word of `text` ends (exclusive), one per word.
fn word_ends(text: &str) -> Vec<usize> {
    let mut ends: Vec<usize> = text.match_indices(' ').map(|(i, _)| i).collect();
    ends.push(text.len());
    ends
}

pub fn build_prefix_dict(narrations: &[Narration]) -> PrefixDict {
    let mut map: HashMap<String, Vec<usize>> = HashMap::new();
    for (id, n) in narrations.iter().enumerate() {
        for end in word_ends(&n.text) {
            let ids = map.entry(n.text[..end].to_string()).or_default();
            if ids.last() != Some(&id) {
                ids.push(id);
            }
        }
    }
    PrefixDict { map }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decomposition {
    pub base: String,
    pub suffix: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NpeResult {
    pub prefixes: Vec<String>,
    /// Index 0 is always [`EMPTY_POSTFIX`].
    pub postfixes: Vec<String>,
    /// Extension narration -> (longest base prefix, residual words), in corpus order.
    pub decomposition: Vec<(String, Decomposition)>,
}

impl NpeResult {
    pub fn decomposition_of(&self, text: &str) -> Option<&Decomposition> {
        self.decomposition.iter().find(|(t, _)| t == text).map(|(_, d)| d)
    }

    pub fn report(&self, normalize: &NormalizeReport) -> NpeReport {
        NpeReport {
            input_count: normalize.input_count,
            dedup_count: normalize.input_count - normalize.dropped_empty - normalize.duplicates_removed,
            prefix_count: self.prefixes.len(),
            postfix_count: self.postfixes.len(),
            extension_count: self.decomposition.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NpeReport {
    pub input_count: usize,
    pub dedup_count: usize,
    pub prefix_count: usize,
    pub postfix_count: usize,
    pub extension_count: usize,
}

pub fn encode(narrations: &[Narration]) -> NpeResult {
    let dict = build_prefix_dict(narrations);
    let texts: HashSet<&str> = narrations.iter().map(|n| n.text.as_str()).collect();

    let mut is_base = vec![true; narrations.len()];
    for (id, n) in narrations.iter().enumerate() {
        let ends = word_ends(&n.text);
        is_base[id] = !ends[..ends.len() - 1].iter().any(|&e| texts.contains(&n.text[..e]));
    }

    let mut postfixes = vec![EMPTY_POSTFIX.to_string()];
    let mut seen_postfix: HashSet<String> = HashSet::new();
    for (id, n) in narrations.iter().enumerate() {
        let sharing = dict.get(&n.text).unwrap_or(&[]);
        if sharing.len() <= 1 {
            continue;
        }
        for &other in sharing.iter().filter(|&&s| s != id) {
            // `other` starts with the words of `n` followed by a space.
            let suffix = &narrations[other].text[n.text.len() + 1..];
            if seen_postfix.insert(suffix.to_string()) {
                postfixes.push(suffix.to_string());
            }
        }
    }

    let base_texts: HashSet<&str> = narrations
        .iter()
        .zip(&is_base)
        .filter(|(_, &b)| b)
        .map(|(n, _)| n.text.as_str())
        .collect();
    let mut decomposition = Vec::new();
    for (n, _) in narrations.iter().zip(&is_base).filter(|(_, &b)| !b) {
        let ends = word_ends(&n.text);
        let end = ends[..ends.len() - 1]
            .iter()
            .rev()
            .copied()
            .find(|&e| base_texts.contains(&n.text[..e]))
            .expect("the shortest narration prefix of an extension is a base");
        decomposition.push((
            n.text.clone(),
            Decomposition { base: n.text[..end].to_string(), suffix: n.text[end + 1..].to_string() },
        ));
    }

    NpeResult {
        prefixes: narrations
            .iter()
            .zip(&is_base)
            .filter(|(_, &b)| b)
            .map(|(n, _)| n.text.clone())
            .collect(),
        postfixes,
        decomposition,
    }
}
