//! Descriptor correspondence (pipeline stage 2): mutual-nearest-neighbor
//! cosine matching with a two-sided Lowe ratio test, plus the coarse filter
//! that prunes candidate pairs with a low overall degree of match.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::DescriptorSet;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("descriptor dimension mismatch: {a} vs {b}")]
    DimMismatch { a: usize, b: usize },
    #[error("ratio threshold {0} outside (0, 1]")]
    InvalidRatio(f64),
}

/// One correspondence between keypoint `index_a` of image A and `index_b`
/// of image B.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    pub index_a: usize,
    pub index_b: usize,
    /// Cosine similarity in [-1, 1].
    pub similarity: f32,
}

/// The correspondences between two images. Each keypoint appears in at most
/// one pair; pairs are sorted by descending similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchSet {
    pub pairs: Vec<MatchPair>,
    pub n_a: usize,
    pub n_b: usize,
}

impl MatchSet {
    pub fn mean_similarity(&self) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        self.pairs.iter().map(|p| p.similarity as f64).sum::<f64>() / self.pairs.len() as f64
    }

    /// Swap the roles of the two images; pair order is preserved.
    pub fn flipped(&self) -> MatchSet {
        MatchSet {
            pairs: self
                .pairs
                .iter()
                .map(|p| MatchPair {
                    index_a: p.index_b,
                    index_b: p.index_a,
                    similarity: p.similarity,
                })
                .collect(),
            n_a: self.n_b,
            n_b: self.n_a,
        }
    }
}

/// Cosine similarity of two equal-length vectors, clamped to [-1, 1].
///
/// The accumulation order (8 fixed lanes, then a fixed folding tree) is part
/// of the function's contract: every caller, including test oracles, sees
/// bit-identical results for identical inputs.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for k in 0..chunks {
        let i = k * 8;
        for (l, slot) in acc.iter_mut().enumerate() {
            *slot += a[i + l] * b[i + l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
    s.clamp(-1.0, 1.0)
}

/// Euclidean distance between unit vectors with the given cosine similarity.
pub fn similarity_to_distance(sim: f32) -> f64 {
    (2.0 - 2.0 * sim as f64).max(0.0).sqrt()
}

#[derive(Debug, Clone, Copy, Default)]
struct Best {
    arg: Option<usize>,
    best: f32,
    second: f32,
}

impl Best {
    fn new() -> Self {
        Best { arg: None, best: f32::NEG_INFINITY, second: f32::NEG_INFINITY }
    }

    fn update(&mut self, idx: usize, sim: f32) {
        if sim > self.best {
            self.second = self.best;
            self.best = sim;
            self.arg = Some(idx);
        } else if sim > self.second {
            self.second = sim;
        }
    }

    /// Lowe ratio test: nearest / second-nearest Euclidean distance must be
    /// strictly below `ratio`. With no second neighbor the test passes (no
    /// ambiguity is measurable).
    fn passes_ratio(&self, ratio: f64) -> bool {
        let d1 = similarity_to_distance(self.best);
        if self.second == f32::NEG_INFINITY {
            return true;
        }
        let d2 = similarity_to_distance(self.second);
        d1 < ratio * d2
    }
}

/// Match two descriptor sets: mutual nearest neighbors under cosine
/// similarity, with the ratio test applied on both sides (which keeps the
/// result symmetric in its arguments). An empty set on either side yields
/// an empty `MatchSet`.
pub fn match_descriptors(
    desc_a: &DescriptorSet,
    desc_b: &DescriptorSet,
    ratio: f64,
) -> Result<MatchSet, MatchError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(MatchError::InvalidRatio(ratio));
    }
    let (n_a, n_b) = (desc_a.len(), desc_b.len());
    if n_a == 0 || n_b == 0 {
        return Ok(MatchSet { pairs: Vec::new(), n_a, n_b });
    }
    if desc_a.dim() != desc_b.dim() {
        return Err(MatchError::DimMismatch { a: desc_a.dim(), b: desc_b.dim() });
    }

    let mut best_a = vec![Best::new(); n_a];
    let mut best_b = vec![Best::new(); n_b];
    for i in 0..n_a {
        let row = desc_a.row(i);
        for (j, best) in best_b.iter_mut().enumerate() {
            let sim = cosine_similarity(row, desc_b.row(j));
            best_a[i].update(j, sim);
            best.update(i, sim);
        }
    }

    let mut pairs = Vec::new();
    for (i, a) in best_a.iter().enumerate() {
        let Some(j) = a.arg else { continue };
        if best_b[j].arg != Some(i) {
            continue;
        }
        if a.passes_ratio(ratio) && best_b[j].passes_ratio(ratio) {
            pairs.push(MatchPair { index_a: i, index_b: j, similarity: a.best });
        }
    }
    pairs.sort_by(|p, q| {
        q.similarity
            .total_cmp(&p.similarity)
            .then(p.index_a.cmp(&q.index_a))
            .then(p.index_b.cmp(&q.index_b))
    });
    Ok(MatchSet { pairs, n_a, n_b })
}

/// Coarse-filter policy: a candidate pair must clear all three thresholds
/// (inclusive) to proceed to alignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoarseFilterPolicy {
    pub min_matches: usize,
    /// Minimum |pairs| / min(n_a, n_b).
    pub min_match_ratio: f64,
    pub min_mean_similarity: f64,
}

impl Default for CoarseFilterPolicy {
    fn default() -> Self {
        CoarseFilterPolicy {
            min_matches: 12,
            min_match_ratio: 0.04,
            min_mean_similarity: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    MinMatches,
    MinMatchRatio,
    MinMeanSimilarity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterDecision {
    Pass,
    Reject(RejectReason),
}

impl FilterDecision {
    pub fn passed(&self) -> bool {
        matches!(self, FilterDecision::Pass)
    }
}

/// Apply the coarse filter. The reject reason names the first criterion
/// that failed, in the order: match count, match ratio, mean similarity.
pub fn coarse_filter(m: &MatchSet, policy: &CoarseFilterPolicy) -> FilterDecision {
    if m.pairs.len() < policy.min_matches {
        return FilterDecision::Reject(RejectReason::MinMatches);
    }
    let denom = m.n_a.min(m.n_b);
    let ratio = if denom == 0 { 0.0 } else { m.pairs.len() as f64 / denom as f64 };
    if ratio < policy.min_match_ratio {
        return FilterDecision::Reject(RejectReason::MinMatchRatio);
    }
    if m.mean_similarity() < policy.min_mean_similarity {
        return FilterDecision::Reject(RejectReason::MinMeanSimilarity);
    }
    FilterDecision::Pass
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(dim: usize, hot: usize) -> Vec<f32> {
        let mut v = vec![0.0; dim];
        v[hot] = 1.0;
        v
    }

    fn set_from_rows(rows: Vec<Vec<f32>>) -> DescriptorSet {
        let dim = rows[0].len();
        DescriptorSet::new(dim, rows.into_iter().flatten().collect())
    }

    #[test]
    fn identical_orthogonal_sets_match_identity() {
        let rows: Vec<Vec<f32>> = (0..5).map(|i| one_hot(8, i)).collect();
        let a = set_from_rows(rows.clone());
        let b = set_from_rows(rows);
        let m = match_descriptors(&a, &b, 0.85).unwrap();
        assert_eq!(m.pairs.len(), 5);
        for p in &m.pairs {
            assert_eq!(p.index_a, p.index_b);
            assert!((p.similarity - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_orthogonal_sets_produce_no_matches() {
        let a = set_from_rows((0..3).map(|i| one_hot(8, i)).collect());
        let b = set_from_rows((3..6).map(|i| one_hot(8, i)).collect());
        let m = match_descriptors(&a, &b, 0.85).unwrap();
        // all similarities are 0, so nearest and second-nearest tie: the
        // ratio test rejects every candidate
        assert!(m.pairs.is_empty());
    }

    #[test]
    fn empty_set_yields_empty_matchset() {
        let a = DescriptorSet::empty(8);
        let b = set_from_rows(vec![one_hot(8, 0)]);
        let m = match_descriptors(&a, &b, 0.85).unwrap();
        assert!(m.pairs.is_empty());
        assert_eq!((m.n_a, m.n_b), (0, 1));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = set_from_rows(vec![one_hot(8, 0)]);
        let b = set_from_rows(vec![one_hot(16, 0)]);
        assert!(matches!(
            match_descriptors(&a, &b, 0.85),
            Err(MatchError::DimMismatch { .. })
        ));
    }

    /// Independent O(N^2) oracle: full similarity matrix, mutual-NN and
    /// two-sided ratio test recomputed from scratch.
    pub(crate) fn brute_force_oracle(
        a: &DescriptorSet,
        b: &DescriptorSet,
        ratio: f64,
    ) -> Vec<(usize, usize, f32)> {
        let (n_a, n_b) = (a.len(), b.len());
        if n_a == 0 || n_b == 0 {
            return Vec::new();
        }
        let mut sims = vec![vec![0.0f32; n_b]; n_a];
        for (i, row) in sims.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = cosine_similarity(a.row(i), b.row(j));
            }
        }
        let ratio_ok = |sorted: &mut Vec<f32>| -> bool {
            sorted.sort_by(|x, y| y.total_cmp(x));
            match sorted.len() {
                0 => false,
                1 => true,
                _ => {
                    similarity_to_distance(sorted[0])
                        < ratio * similarity_to_distance(sorted[1])
                }
            }
        };
        let mut out = Vec::new();
        for i in 0..n_a {
            // arg best over row i, ties to the smallest j
            let mut jbest = 0;
            for j in 1..n_b {
                if sims[i][j] > sims[i][jbest] {
                    jbest = j;
                }
            }
            // mutual: i must be the argbest of column jbest, ties to the smallest i
            let mut ibest = 0;
            for (r, row) in sims.iter().enumerate() {
                if row[jbest] > sims[ibest][jbest] {
                    ibest = r;
                }
            }
            if ibest != i {
                continue;
            }
            let mut row: Vec<f32> = sims[i].clone();
            let mut col: Vec<f32> = sims.iter().map(|r| r[jbest]).collect();
            if ratio_ok(&mut row) && ratio_ok(&mut col) {
                out.push((i, jbest, sims[i][jbest]));
            }
        }
        out.sort_by(|p, q| q.2.total_cmp(&p.2).then(p.0.cmp(&q.0)).then(p.1.cmp(&q.1)));
        out
    }

    fn random_unit_rows(n: usize, dim: usize, state: &mut u64) -> Vec<Vec<f32>> {
        let mut next = move |state: &mut u64| {
            *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((*state >> 33) as f64 / u32::MAX as f64) * 2.0 - 1.0
        };
        (0..n)
            .map(|_| {
                let mut v: Vec<f32> = (0..dim).map(|_| next(state) as f32).collect();
                let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                for x in &mut v {
                    *x = (*x as f64 / norm) as f32;
                }
                v
            })
            .collect()
    }

    #[test]
    fn permuted_copy_recovers_permutation_against_oracle() {
        let mut state = 7u64;
        let rows = random_unit_rows(50, 32, &mut state);
        // deterministic permutation
        let perm: Vec<usize> = (0..50).map(|i| (i * 37 + 11) % 50).collect();
        let permuted: Vec<Vec<f32>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let a = set_from_rows(rows);
        let b = set_from_rows(permuted);

        let m = match_descriptors(&a, &b, 0.85).unwrap();
        assert_eq!(m.pairs.len(), 50, "every point of a permuted copy must match");
        for p in &m.pairs {
            assert_eq!(perm[p.index_b], p.index_a);
        }
        let oracle = brute_force_oracle(&a, &b, 0.85);
        let got: Vec<(usize, usize, f32)> =
            m.pairs.iter().map(|p| (p.index_a, p.index_b, p.similarity)).collect();
        assert_eq!(got, oracle);
    }

    #[test]
    fn matcher_equals_oracle_on_random_sets() {
        let mut state = 99u64;
        for trial in 0..20 {
            let n_a = 3 + (trial * 7) % 60;
            let n_b = 3 + (trial * 11) % 60;
            let a = set_from_rows(random_unit_rows(n_a, 16, &mut state));
            let b = set_from_rows(random_unit_rows(n_b, 16, &mut state));
            let m = match_descriptors(&a, &b, 0.85).unwrap();
            let oracle = brute_force_oracle(&a, &b, 0.85);
            let got: Vec<(usize, usize, f32)> =
                m.pairs.iter().map(|p| (p.index_a, p.index_b, p.similarity)).collect();
            assert_eq!(got, oracle, "trial {trial} ({n_a}x{n_b})");
        }
    }

    #[test]
    fn matching_is_symmetric() {
        let mut state = 1234u64;
        let a = set_from_rows(random_unit_rows(40, 16, &mut state));
        let b = set_from_rows(random_unit_rows(35, 16, &mut state));
        let ab = match_descriptors(&a, &b, 0.85).unwrap();
        let ba = match_descriptors(&b, &a, 0.85).unwrap();
        let mut ab_pairs: Vec<(usize, usize)> =
            ab.pairs.iter().map(|p| (p.index_a, p.index_b)).collect();
        let mut ba_pairs: Vec<(usize, usize)> =
            ba.pairs.iter().map(|p| (p.index_b, p.index_a)).collect();
        ab_pairs.sort_unstable();
        ba_pairs.sort_unstable();
        assert_eq!(ab_pairs, ba_pairs);
    }

    #[test]
    fn coarse_filter_rejects_by_first_failed_criterion() {
        let empty = MatchSet { pairs: Vec::new(), n_a: 100, n_b: 100 };
        assert_eq!(
            coarse_filter(&empty, &CoarseFilterPolicy::default()),
            FilterDecision::Reject(RejectReason::MinMatches)
        );

        let pairs: Vec<MatchPair> = (0..100)
            .map(|i| MatchPair { index_a: i, index_b: i, similarity: 0.2 })
            .collect();
        let weak = MatchSet { pairs, n_a: 200, n_b: 150 };
        let policy = CoarseFilterPolicy {
            min_matches: 12,
            min_match_ratio: 0.04,
            min_mean_similarity: 0.5,
        };
        assert_eq!(
            coarse_filter(&weak, &policy),
            FilterDecision::Reject(RejectReason::MinMeanSimilarity)
        );
    }

    #[test]
    fn coarse_filter_thresholds_are_inclusive() {
        let pairs: Vec<MatchPair> = (0..12)
            .map(|i| MatchPair { index_a: i, index_b: i, similarity: 0.5 })
            .collect();
        let m = MatchSet { pairs, n_a: 300, n_b: 300 };
        let policy = CoarseFilterPolicy {
            min_matches: 12,
            min_match_ratio: 0.04,
            min_mean_similarity: 0.5,
        };
        assert_eq!(coarse_filter(&m, &policy), FilterDecision::Pass);
    }

    #[test]
    fn coarse_filter_is_monotone() {
        let base_pairs: Vec<MatchPair> = (0..20)
            .map(|i| MatchPair { index_a: i, index_b: i, similarity: 0.4 })
            .collect();
        let base = MatchSet { pairs: base_pairs.clone(), n_a: 100, n_b: 100 };
        let policy = CoarseFilterPolicy {
            min_matches: 12,
            min_match_ratio: 0.1,
            min_mean_similarity: 0.2,
        };
        assert!(coarse_filter(&base, &policy).passed());

        // superset with equal-or-higher mean similarity also passes
        let mut more = base_pairs;
        more.extend((20..30).map(|i| MatchPair { index_a: i, index_b: i, similarity: 0.9 }));
        let superset = MatchSet { pairs: more, n_a: 100, n_b: 100 };
        assert!(superset.mean_similarity() >= base.mean_similarity());
        assert!(coarse_filter(&superset, &policy).passed());
    }
}
