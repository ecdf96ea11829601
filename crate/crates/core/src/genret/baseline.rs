//! Mean-pool retrieval baseline: no model, the pooled clip (optionally mixed
//! with the encoded query) is scored directly against the vocabulary.

use serde::{Deserialize, Serialize};

use super::GenretError;
use crate::datagen::{Dataset, InstructionSample};
use crate::embed::{mean_pool, normalized, stub_encode_text, EmbeddingMatrix};
use crate::index::{topk, RetrievalResult};
use crate::metrics::{EvalBuilder, EvalResult};
use crate::npe::normalize_text;
use crate::vocab::EntryKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Track {
    /// Clip only.
    Naive,
    /// Clip pooled with the query embedding.
    Casual,
}

impl Track {
    pub fn as_str(self) -> &'static str {
        match self {
            Track::Naive => "naive",
            Track::Casual => "casual",
        }
    }
}

/// Top-`k` rows of `matrix` for a pooled clip. Result ids are row indices.
pub fn retrieval_baseline(
    clip: &[f32],
    query: &str,
    matrix: &EmbeddingMatrix,
    track: Track,
    k: usize,
) -> Result<Vec<RetrievalResult>, GenretError> {
    if clip.len() != matrix.dim() {
        return Err(GenretError::DimMismatch { expected: matrix.dim(), got: clip.len() });
    }
    let query = normalize_text(query);
    let q = match track {
        Track::Casual if !query.is_empty() => {
            let enc = stub_encode_text(&query, matrix.dim());
            let mixed: Vec<f32> = clip.iter().zip(&enc).map(|(a, b)| (a + b) / 2.0).collect();
            normalized(&mixed).unwrap_or_else(|| clip.to_vec())
        }
        _ => clip.to_vec(),
    };
    Ok(topk(&q, matrix, k))
}

/// Baseline Recall@K over `samples`, against the flat matrix of each target kind.
pub fn evaluate_baseline(ds: &Dataset, samples: &[InstructionSample], track: Track) -> Result<EvalResult, GenretError> {
    let mut b = EvalBuilder::new();
    for s in samples {
        let clips = ds.span_clips(s);
        let pooled = mean_pool(&clips).map_err(|e| GenretError::Data(e.to_string()))?;
        let kind = s.relation.target_kind();
        let ranked: Vec<u32> = retrieval_baseline(&pooled, &s.query_text, ds.matrices.get(kind), track, 5)?
            .iter()
            .map(|r| ds.vocab.id_at(kind, r.entry_id as usize))
            .collect();
        if let Some(pf) = s.target_postfix_id {
            let p = retrieval_baseline(&pooled, &s.query_text, ds.matrices.get(EntryKind::Postfix), track, 1)?;
            b.add_chain((ranked[0], ds.vocab.id_at(EntryKind::Postfix, p[0].entry_id as usize)), (s.target_id, pf));
        }
        b.add(s.relation, ranked, s.target_id);
    }
    Ok(b.finish(track.as_str()))
}
