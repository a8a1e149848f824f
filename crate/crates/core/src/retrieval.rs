//! The coarse-to-fine pipeline per candidate pair, per-query ranking within
//! a group, and exhaustive group-wide duplicate discovery.
//!
//! Pair scoring runs match -> coarse filter -> robust affine -> character
//! association -> patch similarity -> content score. Rejections are
//! recorded at the first failing stage. The final score is the content
//! score when both images carry character annotations, and the affine
//! inlier ratio otherwise.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::alignment::{
    estimate_affine, pair_seed, transform_region, AffineModel, AlignmentError,
};
use crate::config::PipelineConfig;
use crate::content::{
    associate_regions, content_score, localize_characters, patch_similarity, CharacterMatch,
    ContentError, ContentScore,
};
use crate::corpus::{CharRegion, Corpus, CorpusError};
use crate::features::index::run_pool;
use crate::features::{FeatureIndex, ImageFeatures};
use crate::matching::{coarse_filter, match_descriptors, FilterDecision, MatchError, MatchSet};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("unknown image id `{0}`")]
    UnknownImage(String),
    #[error("unknown group `{0}`")]
    UnknownGroup(String),
    #[error("images `{query}` (group `{qg}`) and `{candidate}` (group `{cg}`) are in different groups")]
    CrossGroup { query: String, candidate: String, qg: String, cg: String },
    #[error("image `{0}` has no entry in the feature index")]
    NotIndexed(String),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Content(#[from] ContentError),
}

impl From<CorpusError> for RetrievalError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::UnknownImage { id } => RetrievalError::UnknownImage(id),
            other => RetrievalError::UnknownImage(other.to_string()),
        }
    }
}

/// Where in the pipeline a candidate pair stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    RejectedCoarse,
    RejectedAlignment,
    Scored,
}

/// Fused pair score with its per-stage breakdown.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateScore {
    #[serde(rename = "query")]
    pub query_id: String,
    #[serde(rename = "candidate")]
    pub candidate_id: String,
    pub stage: Stage,
    pub n_matches: usize,
    pub mean_kp_similarity: f64,
    pub affine_inliers: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub content: Option<ContentScore>,
    pub final_score: f64,
}

/// Ranked candidates for one query, deepest `k` entries only. Ordering is
/// total: descending final score, then ascending candidate id.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<CandidateScore>,
    pub k: usize,
}

/// One associated character pair with both source-frame and target-frame
/// boxes, kept for report rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct CharPair {
    /// Source region in its own image's coordinates.
    pub src_region: CharRegion,
    /// Source region mapped into target coordinates (clipped).
    pub src_in_tgt: CharRegion,
    pub tgt_region: CharRegion,
    pub iou: f64,
    pub similarity: f64,
}

/// Full per-pair evidence for inspection and HTML reports.
#[derive(Debug, Clone)]
pub struct ScoreDetail {
    pub score: CandidateScore,
    /// Source side of the fitted map (the fewer-keypoint image).
    pub src_id: String,
    pub tgt_id: String,
    /// Matches in query -> candidate orientation.
    pub matches: MatchSet,
    /// Inlier indices into `matches.pairs` (empty when alignment was not
    /// reached or failed).
    pub inlier_pair_indices: Vec<usize>,
    pub model: Option<AffineModel>,
    pub char_pairs: Vec<CharPair>,
}

/// Run the full pipeline on one candidate pair.
pub fn score_pair(
    query_id: &str,
    candidate_id: &str,
    index: &FeatureIndex,
    corpus: &Corpus,
    cfg: &PipelineConfig,
) -> Result<CandidateScore, RetrievalError> {
    score_pair_detailed(query_id, candidate_id, index, corpus, cfg).map(|d| d.score)
}

/// As [`score_pair`], returning the full evidence trail.
pub fn score_pair_detailed(
    query_id: &str,
    candidate_id: &str,
    index: &FeatureIndex,
    corpus: &Corpus,
    cfg: &PipelineConfig,
) -> Result<ScoreDetail, RetrievalError> {
    let qg = corpus.group_of(query_id)?;
    let cg = corpus.group_of(candidate_id)?;
    if qg != cg {
        return Err(RetrievalError::CrossGroup {
            query: query_id.to_string(),
            candidate: candidate_id.to_string(),
            qg: qg.to_string(),
            cg: cg.to_string(),
        });
    }
    let fq = index
        .get(query_id)
        .ok_or_else(|| RetrievalError::NotIndexed(query_id.to_string()))?;
    let fc = index
        .get(candidate_id)
        .ok_or_else(|| RetrievalError::NotIndexed(candidate_id.to_string()))?;
    score_pair_features(query_id, candidate_id, fq, fc, corpus, cfg)
}

/// Pipeline core over already-extracted features (shared by the warm and
/// cold paths).
pub(crate) fn score_pair_features(
    query_id: &str,
    candidate_id: &str,
    fq: &ImageFeatures,
    fc: &ImageFeatures,
    corpus: &Corpus,
    cfg: &PipelineConfig,
) -> Result<ScoreDetail, RetrievalError> {
    let matches = match_descriptors(&fq.descriptors, &fc.descriptors, cfg.matching.ratio)?;
    let n_matches = matches.pairs.len();
    let mean_kp_similarity = matches.mean_similarity();

    let rejected = |stage: Stage, matches: MatchSet| ScoreDetail {
        score: CandidateScore {
            query_id: query_id.to_string(),
            candidate_id: candidate_id.to_string(),
            stage,
            n_matches,
            mean_kp_similarity,
            affine_inliers: 0,
            content: None,
            final_score: 0.0,
        },
        src_id: query_id.to_string(),
        tgt_id: candidate_id.to_string(),
        matches,
        inlier_pair_indices: Vec::new(),
        model: None,
        char_pairs: Vec::new(),
    };

    if let FilterDecision::Reject(_) = coarse_filter(&matches, &cfg.matching.coarse) {
        return Ok(rejected(Stage::RejectedCoarse, matches));
    }

    // Source = fewer keypoints; ties go to the lexicographically smaller id.
    let (n_q, n_c) = (fq.keypoints.len(), fc.keypoints.len());
    let query_is_src = match n_q.cmp(&n_c) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => query_id <= candidate_id,
    };
    let (src_id, tgt_id, f_src, f_tgt, oriented) = if query_is_src {
        (query_id, candidate_id, fq, fc, matches.clone())
    } else {
        (candidate_id, query_id, fc, fq, matches.flipped())
    };

    let seed = pair_seed(cfg.alignment.seed, query_id, candidate_id);
    let model = match estimate_affine(
        &f_src.keypoints,
        &f_tgt.keypoints,
        &oriented,
        cfg.alignment.inlier_tol,
        cfg.alignment.max_iters,
        seed,
    ) {
        Ok(m) => m,
        Err(
            AlignmentError::TooFewMatches(_)
            | AlignmentError::NoConsensus
            | AlignmentError::DegenerateGeometry,
        ) => {
            return Ok(rejected(Stage::RejectedAlignment, matches));
        }
    };
    let affine_inliers = model.inliers.len();

    let src_regions = localize_characters(src_id, corpus)?;
    let tgt_regions = localize_characters(tgt_id, corpus)?;
    let tgt_image = &corpus.image(tgt_id).expect("group_of validated id").image;
    let src_image = &corpus.image(src_id).expect("group_of validated id").image;

    let mut char_pairs = Vec::new();
    let content;
    let final_score;
    if src_regions.is_empty() || tgt_regions.is_empty() {
        // Keypoint fallback: normalized inlier ratio.
        let denom = n_q.min(n_c).max(1);
        final_score = (affine_inliers as f64 / denom as f64).clamp(0.0, 1.0);
        content = Some(content_score(&[], src_regions.len()));
    } else {
        // Map source regions into the target frame, clip, and drop the ones
        // that leave the target image entirely.
        let mut mapped: Vec<(usize, CharRegion)> = Vec::with_capacity(src_regions.len());
        for (i, r) in src_regions.iter().enumerate() {
            let m = transform_region(&model, r);
            if let Some(clipped) = m.bbox.clip_to_bounds(tgt_image.width(), tgt_image.height()) {
                mapped.push((i, CharRegion { bbox: clipped, ..m }));
            }
        }
        let mapped_regions: Vec<CharRegion> = mapped.iter().map(|(_, r)| r.clone()).collect();
        let assoc = associate_regions(&mapped_regions, &tgt_regions, cfg.content.min_iou);

        let mut char_matches = Vec::with_capacity(assoc.len());
        for (mi, tj) in assoc {
            let (src_idx, ref src_in_tgt) = mapped[mi];
            let src_region = &src_regions[src_idx];
            let tgt_region = &tgt_regions[tj];
            let similarity = patch_similarity(
                src_image,
                &src_region.bbox,
                tgt_image,
                &tgt_region.bbox,
                &cfg.similarity,
            )?;
            let overlap = crate::content::iou(&src_in_tgt.bbox, &tgt_region.bbox);
            char_matches.push(CharacterMatch {
                region_src: src_in_tgt.clone(),
                region_tgt: tgt_region.clone(),
                iou: overlap,
                similarity,
            });
            char_pairs.push(CharPair {
                src_region: src_region.clone(),
                src_in_tgt: src_in_tgt.clone(),
                tgt_region: tgt_region.clone(),
                iou: overlap,
                similarity,
            });
        }
        let cs = content_score(&char_matches, src_regions.len());
        final_score = cs.score;
        content = Some(cs);
    }

    let inlier_pair_indices = model.inliers.clone();
    Ok(ScoreDetail {
        score: CandidateScore {
            query_id: query_id.to_string(),
            candidate_id: candidate_id.to_string(),
            stage: Stage::Scored,
            n_matches,
            mean_kp_similarity,
            affine_inliers,
            content,
            final_score,
        },
        src_id: src_id.to_string(),
        tgt_id: tgt_id.to_string(),
        matches,
        inlier_pair_indices,
        model: Some(model),
        char_pairs,
    })
}

/// Order scores into the spec's total order: descending final score, ties
/// by ascending candidate id.
pub fn rank_scores(scores: &mut [CandidateScore]) {
    scores.sort_by(|a, b| {
        b.final_score
            .total_cmp(&a.final_score)
            .then_with(|| a.candidate_id.cmp(&b.candidate_id))
    });
}

/// Score every other image in the query's group and return the top `k`.
pub fn search(
    query_id: &str,
    k: usize,
    index: &FeatureIndex,
    corpus: &Corpus,
    cfg: &PipelineConfig,
) -> Result<RankedList, RetrievalError> {
    let group = corpus.group_of(query_id)?.to_string();
    let mut candidates: Vec<&String> = corpus
        .group_members(&group)
        .expect("group from group_of")
        .iter()
        .filter(|id| id.as_str() != query_id)
        .collect();
    candidates.sort_unstable();

    let mut scores = run_pool(cfg.workers, || {
        candidates
            .par_iter()
            .map(|cand| score_pair(query_id, cand, index, corpus, cfg))
            .collect::<Result<Vec<_>, _>>()
    })?;
    rank_scores(&mut scores);
    scores.truncate(k);
    Ok(RankedList { query_id: query_id.to_string(), entries: scores, k })
}

/// Score all unordered pairs in a group once (query = the lexicographically
/// smaller id) and return the pairs at or above `threshold`, best first.
pub fn discover(
    group_id: &str,
    threshold: f64,
    index: &FeatureIndex,
    corpus: &Corpus,
    cfg: &PipelineConfig,
) -> Result<Vec<CandidateScore>, RetrievalError> {
    let mut members: Vec<&String> = corpus
        .group_members(group_id)
        .ok_or_else(|| RetrievalError::UnknownGroup(group_id.to_string()))?
        .iter()
        .collect();
    members.sort_unstable();

    let mut tasks = Vec::new();
    for i in 0..members.len() {
        for j in i + 1..members.len() {
            tasks.push((members[i].as_str(), members[j].as_str()));
        }
    }
    let scores = run_pool(cfg.workers, || {
        tasks
            .par_iter()
            .map(|(a, b)| score_pair(a, b, index, corpus, cfg))
            .collect::<Result<Vec<_>, _>>()
    })?;

    let mut hits: Vec<CandidateScore> =
        scores.into_iter().filter(|s| s.final_score >= threshold).collect();
    hits.sort_by(|a, b| {
        b.final_score
            .total_cmp(&a.final_score)
            .then_with(|| a.query_id.cmp(&b.query_id))
            .then_with(|| a.candidate_id.cmp(&b.candidate_id))
    });
    Ok(hits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SynthConfig};
    use crate::features::{build_index, FeatureBackend};

    fn fixture() -> (Corpus, FeatureIndex, PipelineConfig) {
        let corpus = generate_synthetic(&SynthConfig {
            seed: 77,
            n_base: 3,
            image_size: 160,
            rotation_max: 8.0,
            scale_range: (0.95, 1.05),
            translation_max: 6.0,
            noise_sigma: 0.01,
            stroke_jitter: 0,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig { workers: 1, ..Default::default() };
        let index = build_index(&corpus, &FeatureBackend::default(), dir.path(), 1).unwrap();
        (corpus, index, cfg)
    }

    #[test]
    fn planted_duplicate_scores_high_and_ranks_first() {
        let (corpus, index, cfg) = fixture();
        let truth = corpus.ground_truth().unwrap().clone();
        for (base, dups) in truth {
            let ranked = search(&base, 5, &index, &corpus, &cfg).unwrap();
            assert!(!ranked.entries.is_empty());
            let top = &ranked.entries[0];
            assert!(
                dups.contains(&top.candidate_id),
                "query {base}: expected one of {dups:?} first, got {} ({:.3})",
                top.candidate_id,
                top.final_score
            );
            assert!(top.final_score >= 0.6, "duplicate score {:.3}", top.final_score);
            assert_eq!(top.stage, Stage::Scored);
        }
    }

    #[test]
    fn cross_group_pair_is_an_error() {
        let corpus = generate_synthetic(&SynthConfig {
            seed: 5,
            n_base: 4,
            n_groups: 2,
            image_size: 128,
            ..Default::default()
        })
        .unwrap();
        // find two bases in different groups
        let mut by_group: std::collections::BTreeMap<&str, &str> = Default::default();
        for rec in corpus.images() {
            by_group.entry(rec.group.as_str()).or_insert(rec.id.as_str());
        }
        let ids: Vec<&str> = by_group.values().copied().collect();
        assert!(ids.len() >= 2, "seed must spread bases over both groups");
        let dir = tempfile::tempdir().unwrap();
        let index = build_index(&corpus, &FeatureBackend::default(), dir.path(), 1).unwrap();
        let cfg = PipelineConfig { workers: 1, ..Default::default() };
        assert!(matches!(
            score_pair(ids[0], ids[1], &index, &corpus, &cfg),
            Err(RetrievalError::CrossGroup { .. })
        ));
    }

    #[test]
    fn search_truncates_to_group_when_k_is_large() {
        let (corpus, index, cfg) = fixture();
        let query = &corpus.images()[0].id;
        let group_size = corpus
            .group_members(corpus.group_of(query).unwrap())
            .unwrap()
            .len();
        let ranked = search(query, 10_000, &index, &corpus, &cfg).unwrap();
        assert_eq!(ranked.entries.len(), group_size - 1, "self excluded, rest returned");
    }

    #[test]
    fn unknown_query_errors() {
        let (corpus, index, cfg) = fixture();
        assert!(matches!(
            search("ghost", 5, &index, &corpus, &cfg),
            Err(RetrievalError::UnknownImage(_))
        ));
    }

    #[test]
    fn discover_threshold_zero_returns_all_pairs() {
        let (corpus, index, cfg) = fixture();
        let group = corpus.groups().keys().next().unwrap().clone();
        let n = corpus.group_members(&group).unwrap().len();
        let all = discover(&group, 0.0, &index, &corpus, &cfg).unwrap();
        assert_eq!(all.len(), n * (n - 1) / 2);
        for pair in &all {
            assert!(pair.query_id < pair.candidate_id, "query id must be the smaller");
        }
    }

    #[test]
    fn discover_unknown_group_errors() {
        let (corpus, index, cfg) = fixture();
        assert!(matches!(
            discover("nope", 0.5, &index, &corpus, &cfg),
            Err(RetrievalError::UnknownGroup(_))
        ));
    }

    #[test]
    fn results_are_deterministic_across_worker_counts() {
        let (corpus, index, cfg) = fixture();
        let query = &corpus.images()[0].id;
        let mut cfg1 = cfg.clone();
        cfg1.workers = 1;
        let mut cfg8 = cfg;
        cfg8.workers = 8;
        let r1 = search(query, 25, &index, &corpus, &cfg1).unwrap();
        let r8 = search(query, 25, &index, &corpus, &cfg8).unwrap();
        assert_eq!(r1, r8);
    }

    #[test]
    fn rejected_coarse_pairs_never_reach_alignment() {
        let (corpus, index, cfg) = fixture();
        // a blank image matched against anything real: no keypoints, no
        // matches, coarse rejection with zero downstream work
        let query = &corpus.images()[0].id;
        let ranked = search(query, 100, &index, &corpus, &cfg).unwrap();
        for e in &ranked.entries {
            if e.stage == Stage::RejectedCoarse {
                assert_eq!(e.affine_inliers, 0);
                assert!(e.content.is_none());
                assert_eq!(e.final_score, 0.0);
            }
        }
    }
}
