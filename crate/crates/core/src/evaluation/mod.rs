//! Ranking and classification metrics, significance testing, cascade
//! re-ranking, and the analytical latency model.

mod metrics;
mod ranking;
mod stats;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use metrics::{compute_ranking_metrics, label_accuracy, EvalReport, RankingResult};
pub use ranking::{
    cascade_rerank, classify_bundles, evaluate_as2, evaluate_verification, pack_bundle, rank_bundle, rank_bundles,
    read_scores_tsv, score_bundles, write_scores_tsv, CandidateScorer, JointScorer,
};
pub use stats::{paired_t_test, t_critical_95, TTestResult};

/// Joint-model cost relative to `k` pairwise passes of length `2L`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub k: usize,
    /// Ratio when self-attention (quadratic in length) dominates.
    pub quadratic_ratio: f64,
    /// Ratio when length-linear layers dominate.
    pub linear_ratio: f64,
}

pub fn latency_ratio(k: usize) -> Result<CostReport> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    let kf = k as f64;
    Ok(CostReport {
        k,
        quadratic_ratio: (kf + 1.0).powi(2) / (4.0 * kf),
        linear_ratio: (kf + 1.0) / (2.0 * kf),
    })
}
