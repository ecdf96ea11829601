//! Embeddings: unit-normalized matrices aligned with vocabulary ids, a
//! deterministic stub text encoder, clip pooling, and the NVEM file format.

mod client;
mod format;

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::npe::normalize_text;
use crate::vocab::{EntryKind, Vocabulary};

pub use client::ExternalEncoder;
pub use format::{load_matrix, load_matrix_bound, save_matrix, MATRIX_MAGIC, MATRIX_VERSION, UNBOUND};

/// Tolerance on row norms.
pub const NORM_TOLERANCE: f32 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("clip has no frames")]
    EmptyClip,
    #[error("clip frames average to the zero vector")]
    DegenerateClip,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("embedding dimension must be at least 8, got {0}")]
    DimTooSmall(usize),
    #[error("row {row} is not unit norm (norm {norm})")]
    NotUnit { row: usize, norm: f32 },
    #[error("encoding entry {entry_id} failed: {source}")]
    Encoder {
        entry_id: u32,
        #[source]
        source: Box<EmbedError>,
    },
    #[error("encoder unavailable: {0}")]
    EncoderUnavailable(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl EmbedError {
    pub fn code(&self) -> &'static str {
        match self {
            EmbedError::EmptyClip => "embed.empty_clip",
            EmbedError::DegenerateClip => "embed.degenerate_clip",
            EmbedError::DimMismatch { .. } => "embed.dim_mismatch",
            EmbedError::DimTooSmall(_) => "embed.dim_too_small",
            EmbedError::NotUnit { .. } => "embed.not_unit",
            EmbedError::Encoder { .. } => "embed.encoder",
            EmbedError::EncoderUnavailable(_) => "embed.encoder_unavailable",
            EmbedError::Format(_) => "embed.format",
            EmbedError::Io(_) => "embed.io",
        }
    }
}

/// Row-major `count x dim` matrix of unit-norm f32 rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    /// Wrap rows that are already unit norm; fails on the first row that is not.
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self, EmbedError> {
        if dim == 0 {
            return Err(EmbedError::Format("dim must be positive".into()));
        }
        if data.len() % dim != 0 {
            return Err(EmbedError::Format(format!("{} values do not form rows of {dim}", data.len())));
        }
        let m = EmbeddingMatrix { dim, data };
        for (row, r) in m.rows().enumerate() {
            let norm = l2_norm(r);
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(EmbedError::NotUnit { row, norm });
            }
        }
        Ok(m)
    }

    /// Normalize every row; zero rows are rejected.
    pub fn from_rows<R: AsRef<[f32]>>(dim: usize, rows: &[R]) -> Result<Self, EmbedError> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(EmbedError::DimMismatch { expected: dim, got: r.len() });
            }
            let n = normalized(r).ok_or(EmbedError::NotUnit { row: i, norm: 0.0 })?;
            data.extend_from_slice(&n);
        }
        EmbeddingMatrix::new(dim, data)
    }

    pub fn empty(dim: usize) -> Self {
        EmbeddingMatrix { dim, data: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Copy of the selected rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> EmbeddingMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        EmbeddingMatrix { dim: self.dim, data }
    }

    pub fn append(&mut self, other: &EmbeddingMatrix) -> Result<(), EmbedError> {
        if other.dim != self.dim {
            return Err(EmbedError::DimMismatch { expected: self.dim, got: other.dim });
        }
        self.data.extend_from_slice(&other.data);
        Ok(())
    }

    /// Dot product of `query` against every row.
    pub fn scores(&self, query: &[f32]) -> Vec<f32> {
        self.rows().map(|r| dot(query, r)).collect()
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f32>() + tail
}

pub fn l2_norm(v: &[f32]) -> f32 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt() as f32
}

/// L2-normalized copy, or `None` for a (numerically) zero vector.
pub fn normalized(v: &[f32]) -> Option<Vec<f32>> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm < 1e-12 || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

/// Anything that maps narration text into the shared embedding space.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Vec<f32>, EmbedError>;
}

/// Stable 64-bit seed for a text: first eight bytes of SHA-256 of its normalized form.
pub fn text_seed(text: &str) -> u64 {
    let digest = Sha256::digest(normalize_text(text).as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Deterministic pseudo-embedding: ChaCha20 seeded from [`text_seed`], `dim`
/// standard normals, L2-normalized. Identical text gives bitwise identical
/// vectors on every platform.
pub fn stub_encode_text(text: &str, dim: usize) -> Vec<f32> {
    assert!(dim >= 8, "stub encoder needs dim >= 8");
    gaussian_unit(text_seed(text), dim)
}

pub(crate) fn gaussian_unit(seed: u64, dim: usize) -> Vec<f32> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    raw.iter().map(|x| (x / norm) as f32).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct StubEncoder {
    dim: usize,
}

impl StubEncoder {
    pub fn new(dim: usize) -> Result<Self, EmbedError> {
        if dim < 8 {
            return Err(EmbedError::DimTooSmall(dim));
        }
        Ok(StubEncoder { dim })
    }
}

impl TextEncoder for StubEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        Ok(stub_encode_text(text, self.dim))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipEmbedding {
    pub frames: Vec<Vec<f32>>,
    pub pooled: Vec<f32>,
}

/// Pool a clip into one vector: the normalized mean of its frames.
pub fn encode_clip(frames: &[Vec<f32>]) -> Result<ClipEmbedding, EmbedError> {
    let pooled = mean_pool(frames)?;
    Ok(ClipEmbedding { frames: frames.to_vec(), pooled })
}

/// Normalized mean of a set of equal-length vectors.
pub fn mean_pool<R: AsRef<[f32]>>(vectors: &[R]) -> Result<Vec<f32>, EmbedError> {
    let first = vectors.first().ok_or(EmbedError::EmptyClip)?.as_ref();
    let dim = first.len();
    let mut sum = vec![0.0f64; dim];
    for v in vectors {
        let v = v.as_ref();
        if v.len() != dim {
            return Err(EmbedError::DimMismatch { expected: dim, got: v.len() });
        }
        for (s, &x) in sum.iter_mut().zip(v) {
            *s += x as f64;
        }
    }
    let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-6 * vectors.len() as f64 {
        return Err(EmbedError::DegenerateClip);
    }
    Ok(sum.iter().map(|x| (x / norm) as f32).collect())
}

/// Encode every entry of `kind`, in id order.
pub fn build_matrix(vocab: &Vocabulary, kind: EntryKind, encoder: &dyn TextEncoder) -> Result<EmbeddingMatrix, EmbedError> {
    let dim = encoder.dim();
    let ids = vocab.ids(kind);
    let mut data = Vec::with_capacity(ids.len() * dim);
    for &id in ids {
        let wrap = |source| EmbedError::Encoder { entry_id: id, source: Box::new(source) };
        let v = encoder.encode(vocab.text(id)).map_err(wrap)?;
        if v.len() != dim {
            return Err(wrap(EmbedError::DimMismatch { expected: dim, got: v.len() }));
        }
        let v = normalized(&v).ok_or_else(|| wrap(EmbedError::NotUnit { row: 0, norm: 0.0 }))?;
        data.extend_from_slice(&v);
    }
    EmbeddingMatrix::new(dim, data)
}

/// Encode a list of texts into a matrix.
pub fn encode_texts<S: AsRef<str>>(texts: &[S], encoder: &dyn TextEncoder) -> Result<EmbeddingMatrix, EmbedError> {
    let rows = texts.iter().map(|t| encoder.encode(t.as_ref())).collect::<Result<Vec<_>, _>>()?;
    EmbeddingMatrix::from_rows(encoder.dim(), &rows)
}

/// The three per-kind matrices of one vocabulary snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabMatrices {
    pub scene: EmbeddingMatrix,
    pub prefix: EmbeddingMatrix,
    pub postfix: EmbeddingMatrix,
}

impl VocabMatrices {
    pub fn build(vocab: &Vocabulary, encoder: &dyn TextEncoder) -> Result<Self, EmbedError> {
        Ok(VocabMatrices {
            scene: build_matrix(vocab, EntryKind::Scene, encoder)?,
            prefix: build_matrix(vocab, EntryKind::Prefix, encoder)?,
            postfix: build_matrix(vocab, EntryKind::Postfix, encoder)?,
        })
    }

    pub fn get(&self, kind: EntryKind) -> &EmbeddingMatrix {
        match kind {
            EntryKind::Scene => &self.scene,
            EntryKind::Prefix => &self.prefix,
            EntryKind::Postfix => &self.postfix,
        }
    }

    pub fn dim(&self) -> usize {
        self.prefix.dim()
    }

    /// Embedding of a vocabulary entry.
    pub fn vector(&self, vocab: &Vocabulary, id: u32) -> &[f32] {
        let e = vocab.entry(id).expect("id in vocabulary");
        self.get(e.kind).row(vocab.row_of(id) as usize)
    }
}

/// Memoizes per-kind matrices for vocabulary snapshots and counts how often
/// the encoder actually ran.
#[derive(Default)]
pub struct MatrixCache {
    built: HashMap<([u8; 32], EntryKind), Arc<EmbeddingMatrix>>,
    builds: usize,
    hits: usize,
}

impl MatrixCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_build(
        &mut self,
        vocab: &Vocabulary,
        kind: EntryKind,
        encoder: &dyn TextEncoder,
    ) -> Result<Arc<EmbeddingMatrix>, EmbedError> {
        let key = (vocab.content_hash(), kind);
        if let Some(m) = self.built.get(&key) {
            self.hits += 1;
            return Ok(m.clone());
        }
        let m = Arc::new(build_matrix(vocab, kind, encoder)?);
        self.builds += 1;
        self.built.insert(key, m.clone());
        Ok(m)
    }

    pub fn builds(&self) -> usize {
        self.builds
    }

    pub fn hits(&self) -> usize {
        self.hits
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::npe::{encode, normalize_texts, NormalizeConfig, SceneLabels};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stub_is_deterministic_and_unit() {
        let a = stub_encode_text("cut a potato", 64);
        let b = stub_encode_text("cut a potato", 64);
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_eq!(a, stub_encode_text("Cut  a potato", 64));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let len = rng.random_range(1..20);
            let s: String = (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect();
            let n = l2_norm(&stub_encode_text(&s, 64));
            assert!((n - 1.0).abs() <= 1e-6, "{s}: {n}");
        }
    }

    #[test]
    fn stub_vectors_are_nearly_orthogonal() {
        let dim = 64;
        let mean: f64 = (0..1000)
            .map(|i| {
                let a = stub_encode_text(&format!("text a {i}"), dim);
                let b = stub_encode_text(&format!("text b {i}"), dim);
                dot(&a, &b).abs() as f64
            })
            .sum::<f64>()
            / 1000.0;
        assert!(mean <= 3.0 / (dim as f64).sqrt(), "mean |cos| = {mean}");
    }

    #[test]
    fn clip_pooling() {
        let f = stub_encode_text("walk", 16);
        assert_eq!(encode_clip(&[f.clone()]).unwrap().pooled, f);
        assert!(matches!(encode_clip(&[]), Err(EmbedError::EmptyClip)));
        let neg: Vec<f32> = f.iter().map(|x| -x).collect();
        assert!(matches!(encode_clip(&[f, neg]), Err(EmbedError::DegenerateClip)));
    }

    #[test]
    fn noisy_frames_pool_back_to_source() {
        let dim = 64;
        let target = stub_encode_text("cut a potato", dim);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let frames: Vec<Vec<f32>> = (0..8)
                .map(|_| {
                    let noisy: Vec<f32> = target
                        .iter()
                        .map(|&x| x + 0.1 * rng.sample::<f32, _>(StandardNormal))
                        .collect();
                    normalized(&noisy).unwrap()
                })
                .collect();
            let pooled = encode_clip(&frames).unwrap().pooled;
            assert!(dot(&pooled, &target) > 0.95);
        }
    }

    fn toy_vocab() -> Vocabulary {
        let narrs = normalize_texts(&["cut a potato", "walk around", "open door"], &NormalizeConfig::default());
        let mut labels = SceneLabels::new();
        for n in &narrs {
            labels.entry(n.text.clone()).or_default().insert("home".into());
        }
        Vocabulary::from_npe(&encode(&narrs), &labels).unwrap()
    }

    #[test]
    fn build_matrix_rows_follow_id_order() {
        let v = toy_vocab();
        let enc = StubEncoder::new(16).unwrap();
        let m = build_matrix(&v, EntryKind::Prefix, &enc).unwrap();
        assert_eq!(m.count(), 3);
        for (row, &id) in v.ids(EntryKind::Prefix).iter().enumerate() {
            assert_eq!(m.row(row), stub_encode_text(v.text(id), 16).as_slice());
        }
        assert_eq!(build_matrix(&v, EntryKind::Prefix, &enc).unwrap(), m);
    }

    struct Failing;
    impl TextEncoder for Failing {
        fn dim(&self) -> usize {
            8
        }
        fn encode(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
            if text == "walk around" {
                Err(EmbedError::EncoderUnavailable("down".into()))
            } else {
                Ok(stub_encode_text(text, 8))
            }
        }
    }

    #[test]
    fn encoder_failure_carries_entry_id() {
        let v = toy_vocab();
        let err = build_matrix(&v, EntryKind::Prefix, &Failing).unwrap_err();
        let walk = v.find(EntryKind::Prefix, "walk around").unwrap();
        assert!(matches!(err, EmbedError::Encoder { entry_id, .. } if entry_id == walk));
    }

    #[test]
    fn cache_builds_once() {
        let v = toy_vocab();
        let enc = StubEncoder::new(16).unwrap();
        let mut cache = MatrixCache::new();
        for _ in 0..5 {
            cache.get_or_build(&v, EntryKind::Prefix, &enc).unwrap();
        }
        assert_eq!((cache.builds(), cache.hits()), (1, 4));
    }

    #[test]
    fn matrix_byte_size_arithmetic() {
        // 4.6K rows at width 1152: header + binding + payload.
        let payload = 4600usize * 1152 * 4;
        assert_eq!(payload, 21_196_800);
        assert_eq!(format::HEADER_LEN + 32 + payload, 21_196_852);
    }
}
