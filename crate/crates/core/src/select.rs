//! Guidance-driven top-k candidate selection and reranking.
//!
//! A guidance similarity matrix (text queries x gallery images) nominates the
//! `k` most promising gallery images for every query. An external matcher
//! then scores only those candidates, and [`rerank_selected`] folds its
//! scores back into a full score matrix.

use crate::error::{Error, Result};
use crate::matrix::{rank_order, topk_rows, EmbeddingMatrix, ScoreMatrix};

pub const DEFAULT_SELECT_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate<'a> {
    pub gallery_index: usize,
    pub guidance_score: f64,
    pub feature: &'a [f64],
}

/// The `k` candidates chosen for each query, best guidance score first.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedFeatures<'a> {
    guidance: &'a ScoreMatrix,
    k: usize,
    gallery_size: usize,
    per_query: Vec<Vec<Candidate<'a>>>,
}

impl<'a> SelectedFeatures<'a> {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn gallery_size(&self) -> usize {
        self.gallery_size
    }

    pub fn n_queries(&self) -> usize {
        self.per_query.len()
    }

    pub fn candidates(&self, query: usize) -> &[Candidate<'a>] {
        &self.per_query[query]
    }

    pub fn indices(&self, query: usize) -> Vec<usize> {
        self.per_query[query].iter().map(|c| c.gallery_index).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[Candidate<'a>]> {
        self.per_query.iter().map(Vec::as_slice)
    }
}

/// For every guidance row, the `k` gallery features with the highest
/// guidance score (ties go to the lower gallery index).
pub fn select_topk_features<'a>(
    features: &'a EmbeddingMatrix,
    guidance: &'a ScoreMatrix,
    k: usize,
) -> Result<SelectedFeatures<'a>> {
    if guidance.n_cols() != features.n_rows() {
        return Err(Error::shape(format!(
            "guidance has {} gallery columns but there are {} image features",
            guidance.n_cols(),
            features.n_rows()
        )));
    }
    let top = topk_rows(guidance, k)?;
    let per_query = (0..guidance.n_rows())
        .map(|q| {
            top.indices(q)
                .iter()
                .zip(top.values(q))
                .map(|(&g, &score)| Candidate {
                    gallery_index: g,
                    guidance_score: score,
                    feature: features.row(g),
                })
                .collect()
        })
        .collect();
    Ok(SelectedFeatures {
        guidance,
        k,
        gallery_size: features.n_rows(),
        per_query,
    })
}

/// Builds a full `queries x gallery` matrix from matcher scores on the
/// selected candidates.
///
/// Candidates keep their match score exactly, so their relative order follows
/// `match_scores`. Every non-candidate is placed strictly below the weakest
/// candidate of its row, ordered by guidance score.
pub fn rerank_selected(selected: &SelectedFeatures<'_>, match_scores: &ScoreMatrix) -> Result<ScoreMatrix> {
    if match_scores.shape() != (selected.n_queries(), selected.k()) {
        return Err(Error::shape(format!(
            "match scores are {}x{} but {} queries with {} candidates were selected",
            match_scores.n_rows(),
            match_scores.n_cols(),
            selected.n_queries(),
            selected.k()
        )));
    }
    let n = selected.gallery_size();
    let mut data = vec![0.0; selected.n_queries() * n];
    let mut is_candidate = vec![false; n];
    for (q, (cands, row)) in selected.iter().zip(data.chunks_exact_mut(n)).enumerate() {
        let matched = match_scores.row(q);
        is_candidate.fill(false);
        for (c, &m) in cands.iter().zip(matched) {
            row[c.gallery_index] = m;
            is_candidate[c.gallery_index] = true;
        }

        let g = selected.guidance.row(q);
        let mut rest: Vec<usize> = (0..n).filter(|&j| !is_candidate[j]).collect();
        rest.sort_unstable_by(|&a, &b| rank_order((a, g[a]), (b, g[b])));
        // Rank-based band in (floor - 1, floor]: exact order, no rescaling of
        // raw guidance values.
        let floor = matched.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
        let span = rest.len().max(1) as f64;
        for (rank, &j) in rest.iter().enumerate() {
            row[j] = floor - rank as f64 / span;
        }
    }
    ScoreMatrix::new(selected.n_queries(), n, data)
}
