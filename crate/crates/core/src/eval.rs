//! Recall@K evaluation.
//!
//! A query counts as a hit at `k` when any of its relevant gallery items is
//! among its `k` best-ranked gallery items. Rankings use the same tie-break
//! as [`crate::matrix::topk_rows`].

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::matrix::{topk_rows, ScoreMatrix, TopKResult};

/// Relevant gallery indices per query, each list sorted and deduplicated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    gallery_size: usize,
    relevant: Vec<Vec<usize>>,
}

impl GroundTruth {
    pub fn new(gallery_size: usize, relevant: Vec<Vec<usize>>) -> Result<Self> {
        let mut relevant = relevant;
        for (q, rel) in relevant.iter_mut().enumerate() {
            if rel.is_empty() {
                return Err(Error::invalid(format!("query {q} has no relevant gallery item")));
            }
            if let Some(&bad) = rel.iter().find(|&&g| g >= gallery_size) {
                return Err(Error::invalid(format!(
                    "query {q}: relevant index {bad} outside gallery of size {gallery_size}"
                )));
            }
            rel.sort_unstable();
            rel.dedup();
        }
        Ok(Self {
            gallery_size,
            relevant,
        })
    }

    /// Query `i` matches gallery item `i`.
    pub fn identity(n: usize) -> Self {
        Self {
            gallery_size: n,
            relevant: (0..n).map(|i| vec![i]).collect(),
        }
    }

    pub fn n_queries(&self) -> usize {
        self.relevant.len()
    }

    pub fn gallery_size(&self) -> usize {
        self.gallery_size
    }

    pub fn relevant(&self, query: usize) -> &[usize] {
        &self.relevant[query]
    }

    pub fn is_relevant(&self, query: usize, gallery: usize) -> bool {
        self.relevant[query].binary_search(&gallery).is_ok()
    }

    pub(crate) fn check_covers(&self, s: &ScoreMatrix) -> Result<()> {
        if self.relevant.len() != s.n_rows() {
            return Err(Error::invalid(format!(
                "ground truth has {} queries but the score matrix has {} rows",
                self.relevant.len(),
                s.n_rows()
            )));
        }
        if self.gallery_size != s.n_cols() {
            return Err(Error::invalid(format!(
                "ground truth gallery size {} but the score matrix has {} columns",
                self.gallery_size,
                s.n_cols()
            )));
        }
        Ok(())
    }
}

/// Recall at each requested cutoff.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalMetrics {
    pub r_at: BTreeMap<usize, f64>,
    pub n_queries: usize,
}

impl RetrievalMetrics {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.r_at.get(&k).copied()
    }
}

impl fmt::Display for RetrievalMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "queries={}", self.n_queries)?;
        for (k, r) in &self.r_at {
            writeln!(f, "R@{k}={r:.4}")?;
        }
        Ok(())
    }
}

/// Fraction of queries with a relevant item in the first `k` columns of
/// `pred`. `k` must not exceed `pred.k()`.
pub fn recall_from_topk(pred: &TopKResult, gt: &GroundTruth, k: usize) -> f64 {
    debug_assert!(k <= pred.k());
    let hits = pred
        .index_rows()
        .enumerate()
        .filter(|(q, idx)| idx[..k].iter().any(|&g| gt.is_relevant(*q, g)))
        .count();
    hits as f64 / gt.n_queries() as f64
}

fn check_k(k: usize, gallery: usize) -> Result<()> {
    if k == 0 || k > gallery {
        return Err(Error::param(format!("k must be in [1, {gallery}], got {k}")));
    }
    Ok(())
}

pub fn recall_at_k(s: &ScoreMatrix, gt: &GroundTruth, k: usize) -> Result<f64> {
    gt.check_covers(s)?;
    check_k(k, s.n_cols())?;
    Ok(recall_from_topk(&topk_rows(s, k)?, gt, k))
}

/// Recall at every cutoff in `ks`, ranking each row once.
pub fn metrics_report(s: &ScoreMatrix, gt: &GroundTruth, ks: &[usize]) -> Result<RetrievalMetrics> {
    gt.check_covers(s)?;
    let Some(&k_max) = ks.iter().max() else {
        return Err(Error::param("no cutoffs requested"));
    };
    for &k in ks {
        check_k(k, s.n_cols())?;
    }
    let pred = topk_rows(s, k_max)?;
    let r_at = ks
        .iter()
        .map(|&k| (k, recall_from_topk(&pred, gt, k)))
        .collect();
    Ok(RetrievalMetrics {
        r_at,
        n_queries: gt.n_queries(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn worked() -> ScoreMatrix {
        ScoreMatrix::from_rows(&[
            vec![0.1, 0.9, 0.3],
            vec![0.8, 0.2, 0.1],
            vec![0.2, 0.3, 0.9],
        ])
        .unwrap()
    }

    // Full stable sort of each row; first k positions.
    fn brute_recall(s: &ScoreMatrix, gt: &GroundTruth, k: usize) -> f64 {
        let mut hits = 0;
        for q in 0..s.n_rows() {
            let row = s.row(q);
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
            if order[..k].iter().any(|g| gt.relevant(q).contains(g)) {
                hits += 1;
            }
        }
        hits as f64 / s.n_rows() as f64
    }

    #[test]
    fn perfect_retrieval() {
        let s = ScoreMatrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.7]]).unwrap();
        assert_eq!(recall_at_k(&s, &GroundTruth::identity(2), 1).unwrap(), 1.0);
    }

    #[test]
    fn worked_example() {
        let gt = GroundTruth::identity(3);
        assert_eq!(recall_at_k(&worked(), &gt, 1).unwrap(), 1.0 / 3.0);
        // Row 0 ranks its match last, so only rows 1 and 2 hit at k = 2.
        assert_eq!(recall_at_k(&worked(), &gt, 2).unwrap(), 2.0 / 3.0);
        assert_eq!(recall_at_k(&worked(), &gt, 3).unwrap(), 1.0);
    }

    #[test]
    fn errors() {
        let gt = GroundTruth::identity(3);
        assert!(matches!(recall_at_k(&worked(), &gt, 0), Err(Error::Parameter(_))));
        assert!(matches!(recall_at_k(&worked(), &gt, 4), Err(Error::Parameter(_))));
        let short = GroundTruth::new(3, vec![vec![0], vec![1]]).unwrap();
        assert!(matches!(recall_at_k(&worked(), &short, 1), Err(Error::Validation(_))));
        assert!(GroundTruth::new(3, vec![vec![5]]).is_err());
        assert!(GroundTruth::new(3, vec![vec![]]).is_err());
        assert!(matches!(metrics_report(&worked(), &gt, &[]), Err(Error::Parameter(_))));
    }

    #[test]
    fn multi_relevant_sets() {
        let gt = GroundTruth::new(3, vec![vec![2, 1, 2], vec![2], vec![0, 1]]).unwrap();
        assert_eq!(gt.relevant(0), &[1, 2]);
        // Row 0 ranks 1 first, row 1 ranks 0 first, row 2 ranks 2 first.
        assert_eq!(recall_at_k(&worked(), &gt, 1).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn report_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = ScoreMatrix::new(20, 20, (0..400).map(|_| rng.random()).collect()).unwrap();
        let gt = GroundTruth::identity(20);
        let m = metrics_report(&s, &gt, &[1, 5, 10]).unwrap();
        assert!(m.r_at[&1] <= m.r_at[&5] && m.r_at[&5] <= m.r_at[&10]);

        let m = metrics_report(&s, &gt, &[20]).unwrap();
        assert_eq!(m.recall(20), Some(1.0));
        assert_eq!(m.to_string().lines().last(), Some("R@20=1.0000"));
    }

    #[test]
    fn report_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let data = (0..2500).map(|_| f64::from(rng.random_range(0..40u8))).collect();
            let s = ScoreMatrix::new(50, 50, data).unwrap();
            let gt = GroundTruth::new(
                50,
                (0..50).map(|_| vec![rng.random_range(0..50), rng.random_range(0..50)]).collect(),
            )
            .unwrap();
            let ks = [1, 5, 10, 50];
            let m = metrics_report(&s, &gt, &ks).unwrap();
            for k in ks {
                assert_eq!(m.r_at[&k], brute_recall(&s, &gt, k));
            }
        }
    }

    proptest! {
        #[test]
        fn invariant_under_monotone_row_transform(
            data in prop::collection::vec(-3.0f64..3.0, 36),
            k in 1usize..=6,
        ) {
            let s = ScoreMatrix::new(6, 6, data.clone()).unwrap();
            let t = ScoreMatrix::new(6, 6, data.iter().map(|v| v.exp() * 3.0 + 1.0).collect()).unwrap();
            let gt = GroundTruth::identity(6);
            prop_assert_eq!(recall_at_k(&s, &gt, k).unwrap(), recall_at_k(&t, &gt, k).unwrap());
        }

        #[test]
        fn invariant_under_column_permutation(
            data in prop::collection::vec(-3.0f64..3.0, 30),
            perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
            rel in prop::collection::vec(0usize..6, 5),
        ) {
            let s = ScoreMatrix::new(5, 6, data.clone()).unwrap();
            // Column j of the permuted matrix is column perm[j] of the original.
            let mut inv = [0; 6];
            for (j, &p) in perm.iter().enumerate() {
                inv[p] = j;
            }
            let permuted: Vec<f64> = (0..5)
                .flat_map(|i| perm.iter().map(move |&p| (i, p)))
                .map(|(i, p)| data[i * 6 + p])
                .collect();
            let sp = ScoreMatrix::new(5, 6, permuted).unwrap();
            let gt = GroundTruth::new(6, rel.iter().map(|&g| vec![g]).collect()).unwrap();
            let gtp = GroundTruth::new(6, rel.iter().map(|&g| vec![inv[g]]).collect()).unwrap();
            // Distinct scores only: permutation changes which index wins a tie.
            let mut sorted = data.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assume!(sorted.windows(2).all(|w| w[0] != w[1]));
            for k in [1, 3, 6] {
                prop_assert_eq!(recall_at_k(&s, &gt, k).unwrap(), recall_at_k(&sp, &gtp, k).unwrap());
            }
        }
    }
}
