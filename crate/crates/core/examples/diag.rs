//! Scratch diagnostic: retrieval quality and score separation on a slice of
//! the seed-42 corpus.

use glyphmatch::corpus::generate_synthetic;
use glyphmatch::evaluation::{benchmark, TimingMode, DEFAULT_KS};
use glyphmatch::features::build_index;
use glyphmatch::retrieval::Stage;
use glyphmatch::{PipelineConfig, SynthConfig};

fn main() {
    let n_queries: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(30);
    let cfg_synth = SynthConfig {
        seed: 42,
        n_base: 100,
        duplicates_per_base: 1,
        rotation_max: 15.0,
        scale_range: (0.85, 1.15),
        noise_sigma: 0.02,
        fragment_fraction: 0.2,
        n_groups: 1,
        ..Default::default()
    };
    let corpus = generate_synthetic(&cfg_synth).unwrap();
    let cfg = PipelineConfig { workers: 2, ..Default::default() };
    let dir = tempfile::tempdir().unwrap();
    let t0 = std::time::Instant::now();
    let index = build_index(&corpus, &cfg.features, dir.path(), 2).unwrap();
    println!("index build: {:?}", t0.elapsed());

    let mut counts: Vec<usize> = corpus
        .images()
        .iter()
        .map(|r| index.get(&r.id).unwrap().keypoints.len())
        .collect();
    counts.sort_unstable();
    println!(
        "keypoints/image: min {} p25 {} median {} p75 {} max {}",
        counts[0],
        counts[counts.len() / 4],
        counts[counts.len() / 2],
        counts[3 * counts.len() / 4],
        counts[counts.len() - 1]
    );

    let truth = corpus.ground_truth().unwrap().clone();
    let queries: Vec<String> = truth.keys().take(n_queries).cloned().collect();
    let t0 = std::time::Instant::now();
    let (report, per_query) =
        benchmark(&corpus, &index, &queries, &cfg, DEFAULT_KS, TimingMode::Warm).unwrap();
    println!(
        "benchmark: {:?} for {} pairs ({:.4} s/pair at {} workers)",
        t0.elapsed(),
        report.n_pairs_scored,
        report.seconds_per_pair,
        report.workers
    );
    println!("recall: {:?}", report.recall_at);
    println!("rank:   {:?}", report.rank_at);

    // direct true-pair scoring (independent of top-k truncation)
    let mut min_true: f64 = 1.0;
    let mut true_misses = Vec::new();
    for query in &queries {
        for dup in &truth[query] {
            let s = glyphmatch::score_pair(query, dup, &index, &corpus, &cfg).unwrap();
            min_true = min_true.min(s.final_score);
            if s.stage != Stage::Scored || s.final_score < 0.6 {
                true_misses.push(format!(
                    "{} -> {}: {:?} {:.3} (m={} in={} content={:?})",
                    query, dup, s.stage, s.final_score, s.n_matches, s.affine_inliers, s.content
                ));
            }
        }
    }

    let mut max_neg: f64 = 0.0;
    let mut frag_misses = Vec::new();
    for list in &per_query {
        let dups = &truth[&list.query_id];
        let top5: Vec<&str> = list.entries.iter().take(5).map(|e| e.candidate_id.as_str()).collect();
        for e in &list.entries {
            if !dups.contains(&e.candidate_id) {
                max_neg = max_neg.max(e.final_score);
            }
        }
        if dups.len() >= 2 {
            for d in dups {
                if !top5.contains(&d.as_str()) {
                    frag_misses.push(format!("{}: fragment {d} not in top5", list.query_id));
                }
            }
        }
    }
    println!("min true-pair score: {min_true:.3}");
    println!("max negative score:  {max_neg:.3}");
    for list in &per_query {
        let dups = &truth[&list.query_id];
        for e in list.entries.iter().take(8) {
            if !dups.contains(&e.candidate_id) && e.final_score > 0.45 {
                println!(
                    "  high negative: {} -> {} {:?} final {:.3} m={} in={} content={:?}",
                    list.query_id, e.candidate_id, e.stage, e.final_score,
                    e.n_matches, e.affine_inliers,
                    e.content.map(|c| (c.matched, c.total_src,
                        (c.mean_similarity * 1000.0).round() / 1000.0)),
                );
            }
        }
        if dups.len() >= 2 {
            let top: Vec<String> = list
                .entries
                .iter()
                .take(6)
                .map(|e| format!("{}:{:.3}", e.candidate_id, e.final_score))
                .collect();
            println!("  frag query {} top6: {top:?}", list.query_id);
        }
    }
    println!("weak/missing true pairs ({}):", true_misses.len());
    for m in &true_misses {
        println!("  {m}");
    }
    println!("fragment top5 misses ({}):", frag_misses.len());
    for m in &frag_misses {
        println!("  {m}");
    }
}
