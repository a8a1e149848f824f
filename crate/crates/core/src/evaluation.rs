//! Retrieval metrics and the benchmark harness: Recall@K, the simplified
//! mean-rank variant Rank@K, and per-pair timing in warm (index reused) and
//! cold (extraction included) modes.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::corpus::Corpus;
use crate::features::index::run_pool;
use crate::features::{extract_features, FeatureError, FeatureIndex, ImageFeatures};
use crate::retrieval::{
    rank_scores, score_pair_detailed, score_pair_features, RankedList, RetrievalError,
};

/// The K values reported by default, mirroring common retrieval tables.
pub const DEFAULT_KS: &[usize] = &[1, 5, 10, 15, 20, 25];

pub type TruthMap = BTreeMap<String, BTreeSet<String>>;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty query set")]
    EmptyQuerySet,
    #[error("corpus has no ground truth attached")]
    NoGroundTruth,
    #[error("query `{0}` missing from the ground-truth map")]
    MissingTruth(String),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// Whether per-pair timing includes feature extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingMode {
    /// Features come from a warm index; timing covers scoring only.
    Warm,
    /// Features are re-extracted for every pair, so timing is
    /// inference-inclusive.
    Cold,
}

/// Aggregated Recall@K / Rank@K tables plus timing.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub recall_at: BTreeMap<usize, f64>,
    /// Mean rank of the correct answer among queries that hit within K;
    /// absent for K values where no query hit.
    pub rank_at: BTreeMap<usize, f64>,
    pub n_queries: usize,
    pub n_queries_hit_at: BTreeMap<usize, usize>,
    pub n_pairs_scored: usize,
    pub seconds_per_pair: f64,
    pub pairs_per_second: f64,
    pub workers: usize,
    pub timing_mode: TimingMode,
}

/// Fraction of queries whose ground-truth duplicate appears in the top K.
pub fn recall_at_k(results: &[RankedList], truth: &TruthMap, k: usize) -> Result<f64, EvalError> {
    let hits = hits_at_k(results, truth, k)?;
    Ok(hits as f64 / results.len() as f64)
}

/// Count of queries with at least one ground-truth duplicate in the top K.
pub fn hits_at_k(results: &[RankedList], truth: &TruthMap, k: usize) -> Result<usize, EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyQuerySet);
    }
    let mut hits = 0;
    for list in results {
        let dups = truth
            .get(&list.query_id)
            .ok_or_else(|| EvalError::MissingTruth(list.query_id.clone()))?;
        if list
            .entries
            .iter()
            .take(k)
            .any(|e| dups.contains(&e.candidate_id))
        {
            hits += 1;
        }
    }
    Ok(hits)
}

/// Mean rank (1-based) of the best-ranked correct answer over the queries
/// whose correct answer appears within the top K. Queries with no hit in
/// the top K are excluded; `None` when no query hits at all.
pub fn rank_at_k(
    results: &[RankedList],
    truth: &TruthMap,
    k: usize,
) -> Result<Option<f64>, EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyQuerySet);
    }
    let mut ranks = Vec::new();
    for list in results {
        let dups = truth
            .get(&list.query_id)
            .ok_or_else(|| EvalError::MissingTruth(list.query_id.clone()))?;
        if let Some(pos) = list
            .entries
            .iter()
            .take(k)
            .position(|e| dups.contains(&e.candidate_id))
        {
            ranks.push(pos + 1);
        }
    }
    if ranks.is_empty() {
        return Ok(None);
    }
    Ok(Some(ranks.iter().sum::<usize>() as f64 / ranks.len() as f64))
}

/// Run `search` over every query, aggregate Recall@K / Rank@K for the given
/// K values, and measure mean wall-clock per scored pair. Index build time
/// is excluded; `TimingMode::Cold` re-extracts features inside the timed
/// region to mimic inference-inclusive per-pair figures.
pub fn benchmark(
    corpus: &Corpus,
    index: &FeatureIndex,
    queries: &[String],
    cfg: &PipelineConfig,
    ks: &[usize],
    mode: TimingMode,
) -> Result<(EvalReport, Vec<RankedList>), EvalError> {
    if queries.is_empty() || ks.is_empty() {
        return Err(EvalError::EmptyQuerySet);
    }
    let truth = corpus.ground_truth().ok_or(EvalError::NoGroundTruth)?.clone();
    for q in queries {
        if !truth.contains_key(q) {
            return Err(EvalError::MissingTruth(q.clone()));
        }
    }
    let k_max = *ks.iter().max().expect("non-empty ks");

    // One flat task list across all queries: the pair-scoring layer is the
    // parallel work pool, so worker counts never affect result content.
    let mut tasks: Vec<(&str, &str)> = Vec::new();
    let mut spans: Vec<(usize, usize)> = Vec::new(); // per-query (offset, len)
    for query in queries {
        let group = corpus.group_of(query)?;
        let mut members: Vec<&String> = corpus
            .group_members(group)
            .expect("group exists")
            .iter()
            .filter(|id| id.as_str() != query.as_str())
            .collect();
        members.sort_unstable();
        let offset = tasks.len();
        tasks.extend(members.iter().map(|m| (query.as_str(), m.as_str())));
        spans.push((offset, members.len()));
    }

    let started = Instant::now();
    let scores = run_pool(cfg.workers, || match mode {
        TimingMode::Warm => tasks
            .par_iter()
            .map(|(q, c)| score_pair_detailed(q, c, index, corpus, cfg).map(|d| d.score))
            .collect::<Result<Vec<_>, RetrievalError>>()
            .map_err(EvalError::from),
        TimingMode::Cold => tasks
            .par_iter()
            .map(|(q, c)| {
                let fq = extract_now(corpus, q, cfg)?;
                let fc = extract_now(corpus, c, cfg)?;
                score_pair_features(q, c, &fq, &fc, corpus, cfg)
                    .map(|d| d.score)
                    .map_err(EvalError::from)
            })
            .collect::<Result<Vec<_>, EvalError>>(),
    })?;
    let wall = started.elapsed().as_secs_f64();

    let per_query: Vec<RankedList> = queries
        .iter()
        .zip(&spans)
        .map(|(query, &(offset, len))| {
            let mut entries = scores[offset..offset + len].to_vec();
            rank_scores(&mut entries);
            entries.truncate(k_max);
            RankedList { query_id: query.clone(), entries, k: k_max }
        })
        .collect();

    let n_queries = per_query.len();
    let mut recall_at = BTreeMap::new();
    let mut rank_at = BTreeMap::new();
    let mut n_queries_hit_at = BTreeMap::new();
    for &k in ks {
        let hits = hits_at_k(&per_query, &truth, k)?;
        n_queries_hit_at.insert(k, hits);
        recall_at.insert(k, hits as f64 / n_queries as f64);
        if let Some(rank) = rank_at_k(&per_query, &truth, k)? {
            rank_at.insert(k, rank);
        }
    }
    // Recall must be non-decreasing in K; a violation is a pipeline bug.
    let recalls: Vec<f64> = recall_at.values().copied().collect();
    assert!(
        recalls.windows(2).all(|w| w[0] <= w[1]),
        "recall_at must be non-decreasing over K: {recall_at:?}"
    );

    let n_pairs = tasks.len();
    let seconds_per_pair = wall / n_pairs as f64;
    let report = EvalReport {
        recall_at,
        rank_at,
        n_queries,
        n_queries_hit_at,
        n_pairs_scored: n_pairs,
        seconds_per_pair,
        pairs_per_second: 1.0 / seconds_per_pair,
        workers: cfg.workers,
        timing_mode: mode,
    };
    Ok((report, per_query))
}

fn extract_now(corpus: &Corpus, id: &str, cfg: &PipelineConfig) -> Result<ImageFeatures, EvalError> {
    let rec = corpus
        .image(id)
        .ok_or_else(|| EvalError::Retrieval(RetrievalError::UnknownImage(id.to_string())))?;
    let (keypoints, descriptors) = extract_features(&rec.image, &cfg.features)?;
    Ok(ImageFeatures { keypoints, descriptors })
}

/// Render the report as aligned plain-text tables (the method row carries
/// the config name).
pub fn render_table(report: &EvalReport, name: &str) -> String {
    let ks: Vec<usize> = report.recall_at.keys().copied().collect();
    let mut out = String::new();

    let header: Vec<String> = std::iter::once("Method".to_string())
        .chain(ks.iter().map(|k| format!("Recall@{k}")))
        .collect();
    let row: Vec<String> = std::iter::once(name.to_string())
        .chain(ks.iter().map(|k| format!("{:.1}", report.recall_at[k] * 100.0)))
        .collect();
    out.push_str(&format_rows(&[header, row]));
    out.push('\n');

    let header: Vec<String> = std::iter::once("Method".to_string())
        .chain(ks.iter().map(|k| format!("Rank@{k}")))
        .collect();
    let row: Vec<String> = std::iter::once(name.to_string())
        .chain(ks.iter().map(|k| match report.rank_at.get(k) {
            Some(r) => format!("{r:.2}"),
            None => "-".to_string(),
        }))
        .collect();
    out.push_str(&format_rows(&[header, row]));
    out.push('\n');

    let header = vec![
        "Method".to_string(),
        "Inf. Speed (s/pair)".to_string(),
        "FPS (pair/s)".to_string(),
        "Workers".to_string(),
        "Mode".to_string(),
    ];
    let row = vec![
        name.to_string(),
        format!("{:.4}", report.seconds_per_pair),
        format!("{:.2}", report.pairs_per_second),
        report.workers.to_string(),
        format!("{:?}", report.timing_mode).to_lowercase(),
    ];
    out.push_str(&format_rows(&[header, row]));
    out
}

fn format_rows(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, cell)| format!("{cell:<width$}", width = widths[c]))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}
