use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Candidates of one bundle ordered best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub bundle_id: u64,
    /// Original candidate indices, best first.
    pub order: Vec<usize>,
    /// Score of each entry of `order`.
    pub scores: Vec<f64>,
}

impl RankingResult {
    /// Sorts by descending score; equal scores keep their original order.
    pub fn from_scores(bundle_id: u64, scores: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let scores = order.iter().map(|&i| scores[i]).collect();
        RankingResult {
            bundle_id,
            order,
            scores,
        }
    }

    /// 1-based rank of each positive candidate.
    fn positive_ranks(&self, gold: &[u8]) -> Vec<usize> {
        self.order
            .iter()
            .enumerate()
            .filter(|(_, &c)| gold.get(c).copied().unwrap_or(0) == 1)
            .map(|(r, _)| r + 1)
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_at_1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mrr: Option<f64>,
    /// Queries that entered the averages.
    pub n_queries: usize,
    /// Queries skipped because no candidate is positive.
    #[serde(default)]
    pub n_excluded: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_accuracy: Option<f64>,
}

impl fmt::Display for EvalReport {
    /// Aligned two-column table.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = [
            ("P@1", self.p_at_1),
            ("MAP", self.map),
            ("MRR", self.mrr),
            ("LA", self.label_accuracy),
        ];
        writeln!(f, "{:<8} {:>8}", "metric", "value")?;
        for (name, v) in rows {
            if let Some(v) = v {
                writeln!(f, "{name:<8} {v:>8.4}")?;
            }
        }
        writeln!(f, "{:<8} {:>8}", "queries", self.n_queries)?;
        if self.n_excluded > 0 {
            writeln!(f, "{:<8} {:>8}", "skipped", self.n_excluded)?;
        }
        Ok(())
    }
}

/// P@1, MAP and MRR over the queries that have at least one positive.
pub fn compute_ranking_metrics(results: &[(RankingResult, Vec<u8>)]) -> Result<EvalReport> {
    let mut p1 = 0.0;
    let mut ap = 0.0;
    let mut rr = 0.0;
    let mut n = 0usize;
    for (res, gold) in results {
        let ranks = res.positive_ranks(gold);
        let Some(&first) = ranks.first() else { continue };
        n += 1;
        p1 += if first == 1 { 1.0 } else { 0.0 };
        rr += 1.0 / first as f64;
        ap += ranks
            .iter()
            .enumerate()
            .map(|(i, &r)| (i + 1) as f64 / r as f64)
            .sum::<f64>()
            / ranks.len() as f64;
    }
    if n == 0 {
        return Err(Error::NoEligibleQueries);
    }
    let nf = n as f64;
    Ok(EvalReport {
        p_at_1: Some(p1 / nf),
        map: Some(ap / nf),
        mrr: Some(rr / nf),
        n_queries: n,
        n_excluded: results.len() - n,
        label_accuracy: None,
    })
}

pub fn label_accuracy<L: PartialEq>(predictions: &[L], golds: &[L]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            golds.len()
        )));
    }
    if golds.is_empty() {
        return Err(Error::Invalid("label accuracy over an empty set".into()));
    }
    let hits = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / golds.len() as f64)
}
