//! Typed narration vocabulary with scene membership.
//!
//! Entry ids are dense and global across kinds. Embedding matrices are kept
//! per kind, so the row of an entry is its ordinal among entries of the same
//! kind (see [`Vocabulary::row_of`]). Ids are append-only: merging never
//! renumbers existing entries, which keeps previously computed rows valid.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::npe::{normalize_text, NpeResult, SceneLabels, EMPTY_POSTFIX};

#[derive(Debug, thiserror::Error)]
pub enum VocabError {
    #[error("prefix {0:?} has no scene label")]
    MissingScene(String),
    #[error("line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("invalid merge of {text:?}: {reason}")]
    InvalidMerge { text: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl VocabError {
    pub fn code(&self) -> &'static str {
        match self {
            VocabError::MissingScene(_) => "vocab.missing_scene",
            VocabError::Format { .. } => "vocab.format",
            VocabError::InvalidMerge { .. } => "vocab.invalid_merge",
            VocabError::Io(_) => "vocab.io",
        }
    }

    fn format(line: usize, reason: impl Into<String>) -> Self {
        VocabError::Format { line, reason: reason.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Scene,
    Prefix,
    Postfix,
}

impl EntryKind {
    pub const ALL: [EntryKind; 3] = [EntryKind::Scene, EntryKind::Prefix, EntryKind::Postfix];

    pub fn as_str(self) -> &'static str {
        match self {
            EntryKind::Scene => "scene",
            EntryKind::Prefix => "prefix",
            EntryKind::Postfix => "postfix",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Corpus,
    Upgrade,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub id: u32,
    pub text: String,
    pub kind: EntryKind,
    pub scene_ids: Vec<u32>,
    pub origin: Origin,
}

/// An immutable vocabulary snapshot. Derived lookups are rebuilt from
/// `entries` on construction.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocabulary {
    entries: Vec<VocabEntry>,
    by_kind: [Vec<u32>; 3],
    prefixes_by_scene: BTreeMap<u32, Vec<u32>>,
    rows: Vec<u32>,
    lookup: HashMap<(EntryKind, String), u32>,
}

impl Vocabulary {
    /// Validate `entries` and build the derived indexes.
    pub fn from_entries(entries: Vec<VocabEntry>) -> Result<Self, VocabError> {
        let mut v = Vocabulary { entries, ..Default::default() };
        for (i, e) in v.entries.iter().enumerate() {
            let line = i + 1;
            if e.id as usize != i {
                return Err(VocabError::format(line, format!("id {} does not match ordinal {i}", e.id)));
            }
            let is_empty_postfix = e.kind == EntryKind::Postfix && e.text == EMPTY_POSTFIX;
            if !is_empty_postfix && (e.text.is_empty() || normalize_text(&e.text) != e.text) {
                return Err(VocabError::format(line, format!("text {:?} is not normalized", e.text)));
            }
            if e.kind == EntryKind::Postfix && v.by_kind[e.kind.slot()].is_empty() && !is_empty_postfix {
                return Err(VocabError::format(line, "first postfix entry must be the EMPTY sentinel"));
            }
            if v.lookup.insert((e.kind, e.text.clone()), e.id).is_some() {
                return Err(VocabError::format(line, format!("duplicate {} text {:?}", e.kind.as_str(), e.text)));
            }
            v.rows.push(v.by_kind[e.kind.slot()].len() as u32);
            v.by_kind[e.kind.slot()].push(e.id);
        }
        if !v.entries.is_empty() && v.by_kind[EntryKind::Postfix.slot()].is_empty() {
            return Err(VocabError::format(v.entries.len(), "vocabulary has no EMPTY postfix entry"));
        }
        for (i, e) in v.entries.iter().enumerate() {
            let line = i + 1;
            match e.kind {
                EntryKind::Prefix if e.scene_ids.is_empty() => {
                    return Err(VocabError::format(line, "prefix entry without scene ids"));
                }
                EntryKind::Scene | EntryKind::Postfix if !e.scene_ids.is_empty() => {
                    return Err(VocabError::format(line, format!("{} entry carries scene ids", e.kind.as_str())));
                }
                _ => {}
            }
            if e.scene_ids.windows(2).any(|w| w[0] >= w[1]) {
                return Err(VocabError::format(line, "scene ids must be strictly ascending"));
            }
            for &s in &e.scene_ids {
                match v.entries.get(s as usize) {
                    Some(target) if target.kind == EntryKind::Scene => {}
                    Some(target) => {
                        return Err(VocabError::format(
                            line,
                            format!("scene id {s} references a {} entry", target.kind.as_str()),
                        ))
                    }
                    None => return Err(VocabError::format(line, format!("scene id {s} out of range"))),
                }
            }
        }
        for &scene in &v.by_kind[EntryKind::Scene.slot()] {
            v.prefixes_by_scene.insert(scene, Vec::new());
        }
        for &p in &v.by_kind[EntryKind::Prefix.slot()] {
            for &s in &v.entries[p as usize].scene_ids {
                v.prefixes_by_scene.get_mut(&s).expect("validated scene").push(p);
            }
        }
        Ok(v)
    }

    /// Build a vocabulary from an NPE result. A prefix takes the scene labels
    /// of its own text plus those of every extension decomposed onto it.
    ///
    /// Ids are laid out postfixes first (EMPTY is id 0), then scenes in
    /// first-seen order, then prefixes.
    pub fn from_npe(npe: &NpeResult, scene_of: &SceneLabels) -> Result<Self, VocabError> {
        let mut labels: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for p in &npe.prefixes {
            let set = labels.entry(p.as_str()).or_default();
            if let Some(ls) = scene_of.get(p) {
                set.extend(ls.iter().map(String::as_str));
            }
        }
        for (ext, d) in &npe.decomposition {
            if let (Some(set), Some(ls)) = (labels.get_mut(d.base.as_str()), scene_of.get(ext)) {
                set.extend(ls.iter().map(String::as_str));
            }
        }

        let mut entries = Vec::new();
        let mut push = |text: &str, kind, scene_ids| {
            let id = entries.len() as u32;
            entries.push(VocabEntry { id, text: text.to_string(), kind, scene_ids, origin: Origin::Corpus });
            id
        };
        for p in &npe.postfixes {
            push(p, EntryKind::Postfix, Vec::new());
        }
        let mut scene_ids: HashMap<&str, u32> = HashMap::new();
        for p in &npe.prefixes {
            for &label in &labels[p.as_str()] {
                if !scene_ids.contains_key(label) {
                    let id = push(label, EntryKind::Scene, Vec::new());
                    scene_ids.insert(label, id);
                }
            }
        }
        for p in &npe.prefixes {
            let mut ids: Vec<u32> = labels[p.as_str()].iter().map(|l| scene_ids[l]).collect();
            if ids.is_empty() {
                return Err(VocabError::MissingScene(p.clone()));
            }
            ids.sort_unstable();
            push(p, EntryKind::Prefix, ids);
        }
        Vocabulary::from_entries(entries)
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: u32) -> Option<&VocabEntry> {
        self.entries.get(id as usize)
    }

    pub fn text(&self, id: u32) -> &str {
        &self.entries[id as usize].text
    }

    /// Ids of one kind, ascending. Matrix row `r` of that kind is `ids(kind)[r]`.
    pub fn ids(&self, kind: EntryKind) -> &[u32] {
        &self.by_kind[kind.slot()]
    }

    pub fn count(&self, kind: EntryKind) -> usize {
        self.by_kind[kind.slot()].len()
    }

    /// Row of `id` within its kind's embedding matrix.
    pub fn row_of(&self, id: u32) -> u32 {
        self.rows[id as usize]
    }

    pub fn id_at(&self, kind: EntryKind, row: usize) -> u32 {
        self.by_kind[kind.slot()][row]
    }

    pub fn prefixes_by_scene(&self) -> &BTreeMap<u32, Vec<u32>> {
        &self.prefixes_by_scene
    }

    pub fn prefixes_of_scene(&self, scene: u32) -> &[u32] {
        self.prefixes_by_scene.get(&scene).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn find(&self, kind: EntryKind, text: &str) -> Option<u32> {
        self.lookup.get(&(kind, text.to_string())).copied()
    }

    pub fn empty_postfix_id(&self) -> Option<u32> {
        self.ids(EntryKind::Postfix).first().copied()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), VocabError> {
        for e in &self.entries {
            serde_json::to_writer(&mut w, e).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// SHA-256 of the JSONL serialization; binds matrices and indexes to a snapshot.
    pub fn content_hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_jsonl_bytes()).into()
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, VocabError> {
        let mut entries = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| VocabError::format(i + 1, format!("unreadable line: {e}")))?;
            if line.trim().is_empty() {
                return Err(VocabError::format(i + 1, "blank line"));
            }
            let entry: VocabEntry =
                serde_json::from_str(&line).map_err(|e| VocabError::format(i + 1, e.to_string()))?;
            entries.push(entry);
        }
        Vocabulary::from_entries(entries)
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        Vocabulary::read_jsonl(BufReader::new(File::open(path)?))
    }

    /// Append-only merge producing a new snapshot. An existing (text, kind)
    /// pair only gains scene ids; anything new gets the next dense id.
    pub fn merge(&self, new_texts: &[NewEntry]) -> Result<Vocabulary, VocabError> {
        let mut entries = self.entries.clone();
        let mut lookup = self.lookup.clone();
        for n in new_texts {
            let invalid = |reason: &str| VocabError::InvalidMerge { text: n.text.clone(), reason: reason.into() };
            let text = normalize_text(&n.text);
            if text.is_empty() {
                return Err(invalid("empty text"));
            }
            for &s in &n.scene_ids {
                if entries.get(s as usize).map(|e| e.kind) != Some(EntryKind::Scene) {
                    return Err(invalid("scene id does not reference a scene entry"));
                }
            }
            if n.kind == EntryKind::Prefix && n.scene_ids.is_empty() {
                return Err(invalid("prefix needs at least one scene"));
            }
            if n.kind != EntryKind::Prefix && !n.scene_ids.is_empty() {
                return Err(invalid("only prefixes carry scene ids"));
            }
            match lookup.get(&(n.kind, text.clone())) {
                Some(&id) => {
                    let ids = &mut entries[id as usize].scene_ids;
                    ids.extend(&n.scene_ids);
                    ids.sort_unstable();
                    ids.dedup();
                }
                None => {
                    let id = entries.len() as u32;
                    let mut scene_ids = n.scene_ids.clone();
                    scene_ids.sort_unstable();
                    scene_ids.dedup();
                    lookup.insert((n.kind, text.clone()), id);
                    entries.push(VocabEntry { id, text, kind: n.kind, scene_ids, origin: Origin::Upgrade });
                }
            }
        }
        Vocabulary::from_entries(entries)
    }
}

/// One item for [`Vocabulary::merge`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewEntry {
    pub text: String,
    pub kind: EntryKind,
    pub scene_ids: Vec<u32>,
}

impl NewEntry {
    pub fn prefix(text: impl Into<String>, scene_ids: Vec<u32>) -> Self {
        NewEntry { text: text.into(), kind: EntryKind::Prefix, scene_ids }
    }
}
