//! Exact similarity search over vocabulary embeddings.
//!
//! The hierarchical index scans the scene matrix first, then only the
//! prefixes owned by the chosen scene(s), then the shared postfix matrix.
//! Every stage is an exact linear scan; the saving comes from the smaller
//! candidate set, not from approximation.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::embed::{dot, EmbedError, EmbeddingMatrix, TextEncoder, VocabMatrices};
use crate::npe::normalize_text;
use crate::vocab::{EntryKind, Vocabulary};

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("{kind} matrix has {got} rows but the vocabulary has {expected} entries")]
    Alignment { kind: &'static str, expected: usize, got: usize },
    #[error("matrices disagree on dimension")]
    DimMismatch,
    #[error("scene {0} owns no prefixes")]
    EmptyScene(u32),
    #[error("vocabulary has no scenes")]
    NoScenes,
    #[error("query has dimension {got}, index has {expected}")]
    QueryDim { expected: usize, got: usize },
}

impl IndexError {
    pub fn code(&self) -> &'static str {
        match self {
            IndexError::Alignment { .. } => "index.alignment",
            IndexError::DimMismatch => "index.dim_mismatch",
            IndexError::EmptyScene(_) => "index.empty_scene",
            IndexError::NoScenes => "index.no_scenes",
            IndexError::QueryDim { .. } => "index.query_dim",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub entry_id: u32,
    pub score: f32,
    /// 1-based.
    pub rank: usize,
}

/// Orders by score descending, then id ascending.
#[inline]
fn better(a_score: f32, a_id: u32, b_score: f32, b_id: u32) -> bool {
    match a_score.partial_cmp(&b_score) {
        Some(Ordering::Greater) => true,
        Some(Ordering::Less) => false,
        _ => a_id < b_id,
    }
}

/// Bounded best-k buffer, kept sorted best-first.
struct TopK {
    k: usize,
    items: Vec<(f32, u32)>,
}

impl TopK {
    fn new(k: usize) -> Self {
        TopK { k, items: Vec::with_capacity(k + 1) }
    }

    #[inline]
    fn offer(&mut self, score: f32, id: u32) {
        if self.items.len() == self.k {
            let &(ws, wi) = self.items.last().expect("k >= 1");
            if !better(score, id, ws, wi) {
                return;
            }
            self.items.pop();
        }
        let pos = self.items.partition_point(|&(s, i)| better(s, i, score, id));
        self.items.insert(pos, (score, id));
    }

    fn finish(self) -> Vec<RetrievalResult> {
        self.items
            .into_iter()
            .enumerate()
            .map(|(r, (score, entry_id))| RetrievalResult { entry_id, score, rank: r + 1 })
            .collect()
    }
}

/// Exact top-k by dot product. `entry_id` in the results is the row index.
/// `k` larger than the row count returns every row.
pub fn topk(query: &[f32], matrix: &EmbeddingMatrix, k: usize) -> Vec<RetrievalResult> {
    scan(query, matrix, None, k)
}

/// [`topk`] with rows relabelled through `ids` (ascending, one per row).
pub fn topk_mapped(query: &[f32], matrix: &EmbeddingMatrix, ids: &[u32], k: usize) -> Vec<RetrievalResult> {
    debug_assert_eq!(ids.len(), matrix.count());
    scan(query, matrix, Some(ids), k)
}

fn scan(query: &[f32], matrix: &EmbeddingMatrix, ids: Option<&[u32]>, k: usize) -> Vec<RetrievalResult> {
    let k = k.max(1).min(matrix.count());
    if k == 0 {
        return Vec::new();
    }
    let mut best = TopK::new(k);
    for (row, r) in matrix.rows().enumerate() {
        let id = ids.map_or(row as u32, |ids| ids[row]);
        best.offer(dot(query, r), id);
    }
    best.finish()
}

/// Exhaustive scan over every prefix, the flat baseline the hierarchy is
/// compared against.
pub fn brute_force_topk(query: &[f32], prefix_matrix: &EmbeddingMatrix, ids: &[u32], k: usize) -> Vec<RetrievalResult> {
    topk_mapped(query, prefix_matrix, ids, k)
}

/// A matrix plus the vocabulary id of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanSet {
    pub ids: Vec<u32>,
    pub matrix: EmbeddingMatrix,
}

impl ScanSet {
    pub fn topk(&self, query: &[f32], k: usize) -> Vec<RetrievalResult> {
        topk_mapped(query, &self.matrix, &self.ids, k)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Immutable hierarchical index over one vocabulary snapshot.
#[derive(Debug, Clone)]
pub struct HierIndex {
    vocab: Arc<Vocabulary>,
    scenes: ScanSet,
    scene_prefixes: BTreeMap<u32, ScanSet>,
    prefixes: ScanSet,
    postfixes: ScanSet,
    vocab_hash: [u8; 32],
}

impl HierIndex {
    /// Per-scene prefix sub-matrices are copied out of `matrices.prefix` so
    /// each scene scans contiguous memory.
    pub fn build(vocab: Arc<Vocabulary>, matrices: &VocabMatrices) -> Result<Self, IndexError> {
        for kind in EntryKind::ALL {
            let (expected, got) = (vocab.count(kind), matrices.get(kind).count());
            if expected != got {
                return Err(IndexError::Alignment { kind: kind.as_str(), expected, got });
            }
        }
        let dim = matrices.prefix.dim();
        if matrices.scene.dim() != dim || matrices.postfix.dim() != dim {
            return Err(IndexError::DimMismatch);
        }
        let scene_prefixes = vocab
            .prefixes_by_scene()
            .iter()
            .map(|(&scene, ids)| {
                let rows: Vec<usize> = ids.iter().map(|&id| vocab.row_of(id) as usize).collect();
                (scene, ScanSet { ids: ids.clone(), matrix: matrices.prefix.select(&rows) })
            })
            .collect();
        let set = |kind: EntryKind| ScanSet { ids: vocab.ids(kind).to_vec(), matrix: matrices.get(kind).clone() };
        Ok(HierIndex {
            scenes: set(EntryKind::Scene),
            prefixes: set(EntryKind::Prefix),
            postfixes: set(EntryKind::Postfix),
            scene_prefixes,
            vocab_hash: vocab.content_hash(),
            vocab,
        })
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn vocab_hash(&self) -> &[u8; 32] {
        &self.vocab_hash
    }

    pub fn dim(&self) -> usize {
        self.prefixes.matrix.dim()
    }

    pub fn scenes(&self) -> &ScanSet {
        &self.scenes
    }

    pub fn prefixes(&self) -> &ScanSet {
        &self.prefixes
    }

    pub fn postfixes(&self) -> &ScanSet {
        &self.postfixes
    }

    pub fn scene_prefixes(&self, scene: u32) -> Option<&ScanSet> {
        self.scene_prefixes.get(&scene)
    }

    pub fn brute_force(&self, query: &[f32], k: usize) -> Vec<RetrievalResult> {
        self.prefixes.topk(query, k)
    }

    /// Top-k prefixes over the union of the given scenes' prefix sets.
    /// A prefix owned by several of them is reported once.
    pub fn prefixes_in_scenes(&self, query: &[f32], scenes: &[u32], k: usize) -> Result<Vec<RetrievalResult>, IndexError> {
        let mut best = TopK::new(k.max(1));
        let mut seen = BTreeSet::new();
        for &scene in scenes {
            let set = self.scene_prefixes.get(&scene).filter(|s| !s.is_empty()).ok_or(IndexError::EmptyScene(scene))?;
            for (row, r) in set.matrix.rows().enumerate() {
                let id = set.ids[row];
                if scenes.len() == 1 || seen.insert(id) {
                    best.offer(dot(query, r), id);
                }
            }
        }
        Ok(best.finish())
    }

    fn check_dim(&self, q: &[f32]) -> Result<(), IndexError> {
        if q.len() != self.dim() {
            return Err(IndexError::QueryDim { expected: self.dim(), got: q.len() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainOptions {
    /// Scenes kept after the first stage. Prefix scores are compared as raw
    /// cosines across all kept scenes.
    pub beam: usize,
    /// Alternatives reported per stage.
    pub k: usize,
}

impl Default for ChainOptions {
    fn default() -> Self {
        ChainOptions { beam: 1, k: 5 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub scene_s: f64,
    pub prefix_s: f64,
    pub postfix_s: f64,
}

impl StageTimings {
    pub fn total_s(&self) -> f64 {
        self.scene_s + self.prefix_s + self.postfix_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainResult {
    pub scene: RetrievalResult,
    pub prefix: RetrievalResult,
    pub postfix: RetrievalResult,
    pub scene_text: String,
    pub prefix_text: String,
    pub postfix_text: String,
    pub full_text: String,
    pub scene_candidates: Vec<RetrievalResult>,
    pub prefix_candidates: Vec<RetrievalResult>,
    pub postfix_candidates: Vec<RetrievalResult>,
    pub timings: StageTimings,
}

/// Scene -> prefix -> postfix retrieval. The prefix query may depend on the
/// chosen scenes and the postfix query on the retrieved prefix text, which
/// is how a trained model conditions its second pass.
pub fn retrieve_chain<E, P, S>(
    idx: &HierIndex,
    scene_query: &[f32],
    prefix_query: P,
    postfix_query: S,
    opts: ChainOptions,
) -> Result<ChainResult, E>
where
    E: From<IndexError>,
    P: FnOnce(&[RetrievalResult]) -> Result<Vec<f32>, E>,
    S: FnOnce(&RetrievalResult, &str) -> Result<Vec<f32>, E>,
{
    if idx.scenes.is_empty() {
        return Err(IndexError::NoScenes.into());
    }
    idx.check_dim(scene_query)?;
    let t = Instant::now();
    let scene_candidates = idx.scenes.topk(scene_query, opts.beam.max(opts.k).max(1));
    let beam: Vec<u32> = scene_candidates.iter().take(opts.beam.max(1)).map(|r| r.entry_id).collect();
    let scene_s = t.elapsed().as_secs_f64();

    let q = prefix_query(&scene_candidates[..beam.len()])?;
    idx.check_dim(&q)?;
    let t = Instant::now();
    let prefix_candidates = idx.prefixes_in_scenes(&q, &beam, opts.k)?;
    let prefix = prefix_candidates[0];
    let prefix_s = t.elapsed().as_secs_f64();
    let owner = idx.vocab.entry(prefix.entry_id).expect("indexed id").scene_ids.clone();
    let scene = *scene_candidates
        .iter()
        .take(beam.len())
        .find(|s| owner.contains(&s.entry_id))
        .expect("prefix came from a beam scene");

    let prefix_text = idx.vocab.text(prefix.entry_id).to_string();
    let q = postfix_query(&prefix, &prefix_text)?;
    idx.check_dim(&q)?;
    let t = Instant::now();
    let postfix_candidates = idx.postfixes.topk(&q, opts.k);
    let postfix = postfix_candidates[0];
    let postfix_s = t.elapsed().as_secs_f64();

    let postfix_text = idx.vocab.text(postfix.entry_id).to_string();
    let full_text = if postfix_text.is_empty() { prefix_text.clone() } else { format!("{prefix_text} {postfix_text}") };
    Ok(ChainResult {
        scene,
        prefix,
        postfix,
        scene_text: idx.vocab.text(scene.entry_id).to_string(),
        prefix_text,
        postfix_text,
        full_text,
        scene_candidates,
        prefix_candidates,
        postfix_candidates,
        timings: StageTimings { scene_s, prefix_s, postfix_s },
    })
}

/// The untrained chain: one pooled clip embedding queries all three stages.
pub fn retrieve_chain_pooled(idx: &HierIndex, query: &[f32], opts: ChainOptions) -> Result<ChainResult, IndexError> {
    retrieve_chain(idx, query, |_| Ok(query.to_vec()), |_, _| Ok(query.to_vec()), opts)
}

/// Chain retrieval for a narration given as text. The prefix stage tries
/// every word prefix of the text and keeps the one whose best match scores
/// highest (longer on ties); the postfix stage encodes the words left after
/// the retrieved prefix.
pub fn retrieve_chain_text<E>(idx: &HierIndex, encoder: &dyn TextEncoder, text: &str, opts: ChainOptions) -> Result<ChainResult, E>
where
    E: From<IndexError> + From<EmbedError>,
{
    let text = normalize_text(text);
    let full = encoder.encode(&text)?;
    let words: Vec<&str> = text.split(' ').filter(|w| !w.is_empty()).collect();
    retrieve_chain(
        idx,
        &full,
        |beam: &[RetrievalResult]| {
            let scenes: Vec<u32> = beam.iter().map(|r| r.entry_id).collect();
            let mut best: Option<(f32, Vec<f32>)> = None;
            for n in (1..=words.len()).rev() {
                let q = encoder.encode(&words[..n].join(" "))?;
                let top = idx.prefixes_in_scenes(&q, &scenes, 1)?[0].score;
                if best.as_ref().is_none_or(|(s, _)| top > *s) {
                    best = Some((top, q));
                }
            }
            Ok(best.map_or(full.clone(), |(_, q)| q))
        },
        |_, prefix_text: &str| {
            let rest = match text.strip_prefix(prefix_text) {
                Some(r) if r.is_empty() || r.starts_with(' ') => r.trim(),
                _ => text.as_str(),
            };
            Ok(encoder.encode(rest)?)
        },
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{stub_encode_text, StubEncoder};
    use crate::npe::{encode, normalize_texts, NormalizeConfig, SceneLabels};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(rows: usize, dim: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f32>> = (0..rows).map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        EmbeddingMatrix::from_rows(dim, &rows).unwrap()
    }

    /// Full-sort oracle.
    fn sorted_oracle(query: &[f32], m: &EmbeddingMatrix) -> Vec<(u32, f32)> {
        let mut all: Vec<(u32, f32)> = m.rows().enumerate().map(|(i, r)| (i as u32, dot(query, r))).collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all
    }

    #[test]
    fn self_retrieval() {
        let m = random_matrix(20, 16, 1);
        let r = topk(m.row(7), &m, 1);
        assert_eq!(r[0].entry_id, 7);
        assert!((r[0].score - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ties_break_by_id() {
        let mut rows: Vec<Vec<f32>> = (0..6).map(|i| stub_encode_text(&format!("r{i}"), 8)).collect();
        rows[5] = rows[2].clone();
        let m = EmbeddingMatrix::from_rows(8, &rows).unwrap();
        let r = topk(m.row(2), &m, 2);
        assert_eq!((r[0].entry_id, r[1].entry_id), (2, 5));
    }

    #[test]
    fn k_larger_than_rows_returns_all() {
        let m = random_matrix(4, 8, 2);
        assert_eq!(topk(m.row(0), &m, 10).len(), 4);
    }

    proptest! {
        #[test]
        fn topk_matches_sort_oracle(seed in 0u64..1000, k in 1usize..12) {
            let m = random_matrix(10, 8, seed);
            let q = random_matrix(1, 8, seed + 7_000);
            let got: Vec<u32> = topk(q.row(0), &m, k).iter().map(|r| r.entry_id).collect();
            let want: Vec<u32> = sorted_oracle(q.row(0), &m).iter().take(k).map(|x| x.0).collect();
            prop_assert_eq!(got, want);
        }

        #[test]
        fn top1_is_permutation_invariant(seed in 0u64..500) {
            let m = random_matrix(30, 8, seed);
            let q = random_matrix(1, 8, seed + 1);
            let mut perm: Vec<usize> = (0..30).collect();
            perm.reverse();
            perm.rotate_left((seed % 30) as usize);
            let pm = m.select(&perm);
            let ids: Vec<u32> = perm.iter().map(|&p| p as u32).collect();
            let a = topk(q.row(0), &m, 1)[0].entry_id;
            // ids are not ascending here, so map by hand
            let b = ids[topk(q.row(0), &pm, 1)[0].entry_id as usize];
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn dot_agrees_with_f64() {
        let m = random_matrix(50, 33, 9);
        for a in m.rows() {
            let exact: f64 = a.iter().zip(m.row(0)).map(|(x, y)| *x as f64 * *y as f64).sum();
            assert!((dot(a, m.row(0)) as f64 - exact).abs() < 1e-6);
        }
    }

    fn world_vocab(scenes: &[(&str, &[&str])]) -> Arc<Vocabulary> {
        let mut texts = Vec::new();
        let mut labels = SceneLabels::new();
        for (scene, events) in scenes {
            for e in *events {
                texts.push(e.to_string());
                labels.entry(e.to_string()).or_default().insert(scene.to_string());
            }
        }
        let narrs = normalize_texts(&texts, &NormalizeConfig::default());
        Arc::new(Vocabulary::from_npe(&encode(&narrs), &labels).unwrap())
    }

    #[test]
    fn build_splits_by_scene() {
        let v = world_vocab(&[("kitchen", &["a b", "c d", "e f"]), ("garden", &["g h", "i j", "k l"])]);
        let m = VocabMatrices::build(&v, &StubEncoder::new(16).unwrap()).unwrap();
        let idx = HierIndex::build(v.clone(), &m).unwrap();
        for &s in v.ids(EntryKind::Scene) {
            assert_eq!(idx.scene_prefixes(s).unwrap().len(), 3);
        }
    }

    #[test]
    fn shared_prefix_appears_in_both_scenes() {
        let v = world_vocab(&[("kitchen", &["a b", "wash hands"]), ("garden", &["wash hands", "dig"])]);
        let m = VocabMatrices::build(&v, &StubEncoder::new(16).unwrap()).unwrap();
        let idx = HierIndex::build(v.clone(), &m).unwrap();
        let wash = v.find(EntryKind::Prefix, "wash hands").unwrap();
        for &s in v.ids(EntryKind::Scene) {
            assert!(idx.scene_prefixes(s).unwrap().ids.contains(&wash));
        }
    }

    #[test]
    fn misaligned_matrices_are_rejected() {
        let v = world_vocab(&[("kitchen", &["a b", "c d"])]);
        let mut m = VocabMatrices::build(&v, &StubEncoder::new(16).unwrap()).unwrap();
        m.prefix = m.prefix.select(&[0]);
        assert!(matches!(HierIndex::build(v, &m), Err(IndexError::Alignment { kind: "prefix", .. })));
    }

    #[test]
    fn degenerate_chain_returns_prefix_text() {
        let v = world_vocab(&[("kitchen", &["cut a potato"])]);
        let m = VocabMatrices::build(&v, &StubEncoder::new(16).unwrap()).unwrap();
        let idx = HierIndex::build(v, &m).unwrap();
        let empty_q = m.postfix.row(0).to_vec();
        let r: ChainResult = retrieve_chain::<IndexError, _, _>(
            &idx,
            &empty_q,
            |_| Ok(empty_q.clone()),
            |_, _| Ok(empty_q.clone()),
            ChainOptions::default(),
        )
        .unwrap();
        assert_eq!(r.full_text, "cut a potato");
        assert_eq!(r.postfix_text, "");
    }

    #[test]
    fn text_chain_splits_toy_narrations() {
        let v = world_vocab(&[("kitchen", &["cut a potato", "cut a potato with a knife", "walk around"])]);
        let enc = StubEncoder::new(64).unwrap();
        let idx = HierIndex::build(v.clone(), &VocabMatrices::build(&v, &enc).unwrap()).unwrap();
        let run = |t: &str| retrieve_chain_text::<crate::oov::OovError>(&idx, &enc, t, ChainOptions::default()).unwrap();
        let r = run("Cut a potato  with a KNIFE");
        assert_eq!((r.scene_text.as_str(), r.prefix_text.as_str(), r.postfix_text.as_str()), ("kitchen", "cut a potato", "with a knife"));
        assert!((r.prefix.score - 1.0).abs() < 1e-5 && (r.postfix.score - 1.0).abs() < 1e-5, "{} {}", r.prefix.score, r.postfix.score);
        let r = run("walk around");
        assert_eq!((r.prefix_text.as_str(), r.postfix_text.as_str()), ("walk around", ""));
        assert_eq!(run("cut a potato").full_text, "cut a potato");
    }

    #[test]
    fn empty_scene_is_an_error() {
        let v = world_vocab(&[("kitchen", &["cut a potato"])]);
        let v = Arc::new(
            v.merge(&[crate::vocab::NewEntry { text: "attic".into(), kind: EntryKind::Scene, scene_ids: vec![] }])
                .unwrap(),
        );
        let enc = StubEncoder::new(16).unwrap();
        let m = VocabMatrices::build(&v, &enc).unwrap();
        let idx = HierIndex::build(v.clone(), &m).unwrap();
        let attic = v.find(EntryKind::Scene, "attic").unwrap();
        let q = m.scene.row(v.row_of(attic) as usize).to_vec();
        assert!(matches!(retrieve_chain_pooled(&idx, &q, ChainOptions::default()), Err(IndexError::EmptyScene(s)) if s == attic));
    }

    #[test]
    fn beam_widens_prefix_search() {
        let v = world_vocab(&[("kitchen", &["a b", "c d"]), ("garden", &["g h", "i j"])]);
        let m = VocabMatrices::build(&v, &StubEncoder::new(32).unwrap()).unwrap();
        let idx = HierIndex::build(v.clone(), &m).unwrap();
        let target = v.find(EntryKind::Prefix, "i j").unwrap();
        let q = m.vector(&v, target).to_vec();
        let r = retrieve_chain_pooled(&idx, &q, ChainOptions { beam: 2, k: 5 }).unwrap();
        assert_eq!(r.prefix.entry_id, target);
        assert_eq!(r.scene_text, "garden");
        assert_eq!(r.prefix_candidates.len(), 4);
    }
}
