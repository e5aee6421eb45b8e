//! Recall@K and NDCG@K with a single relevant item per instance.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no evaluation instances")]
    EmptyEvalSet,
    #[error("k must be at least 1")]
    ZeroK,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalInstance {
    pub ranking: Vec<u32>,
    pub true_id: u32,
}

impl EvalInstance {
    /// Orders every id not in `excluded` by descending score, lower id first on ties.
    pub fn from_scores(scores: &[f64], true_id: u32, excluded: impl Fn(u32) -> bool) -> EvalInstance {
        let mut ranking: Vec<u32> = (0..scores.len() as u32).filter(|i| !excluded(*i)).collect();
        ranking.sort_by(|a, b| scores[*b as usize].total_cmp(&scores[*a as usize]).then(a.cmp(b)));
        EvalInstance { ranking, true_id }
    }

    /// 1-based rank of the true id; `None` if it is absent from the ranking.
    pub fn rank(&self) -> Option<usize> {
        self.ranking.iter().position(|id| *id == self.true_id).map(|p| p + 1)
    }
}

fn check(instances: &[EvalInstance], k: usize) -> Result<(), MetricsError> {
    if k == 0 {
        return Err(MetricsError::ZeroK);
    }
    if instances.is_empty() {
        return Err(MetricsError::EmptyEvalSet);
    }
    Ok(())
}

pub fn recall_from_rank(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

pub fn ndcg_from_rank(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r <= k => 1.0 / ((1 + r) as f64).log2(),
        _ => 0.0,
    }
}

pub fn recall_at_k(instances: &[EvalInstance], k: usize) -> Result<f64, MetricsError> {
    check(instances, k)?;
    let hits: f64 = instances.iter().map(|i| recall_from_rank(i.rank(), k)).sum();
    Ok(hits / instances.len() as f64)
}

pub fn ndcg_at_k(instances: &[EvalInstance], k: usize) -> Result<f64, MetricsError> {
    check(instances, k)?;
    let total: f64 = instances.iter().map(|i| ndcg_from_rank(i.rank(), k)).sum();
    Ok(total / instances.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub instances: usize,
    /// Instances left out because their true id was UNK.
    pub skipped: usize,
}

impl MetricsReport {
    /// Aggregates 1-based ranks (`None` = not ranked).
    pub fn from_ranks(ranks: &[Option<usize>], ks: &[usize], skipped: usize) -> Result<MetricsReport, MetricsError> {
        if ranks.is_empty() {
            return Err(MetricsError::EmptyEvalSet);
        }
        let n = ranks.len() as f64;
        let mut rows = Vec::new();
        for &k in ks {
            if k == 0 {
                return Err(MetricsError::ZeroK);
            }
            rows.push(MetricsRow {
                k,
                recall: ranks.iter().map(|r| recall_from_rank(*r, k)).sum::<f64>() / n,
                ndcg: ranks.iter().map(|r| ndcg_from_rank(*r, k)).sum::<f64>() / n,
            });
        }
        Ok(MetricsReport { rows, instances: ranks.len(), skipped })
    }

    pub fn from_instances(instances: &[EvalInstance], ks: &[usize], skipped: usize) -> Result<MetricsReport, MetricsError> {
        let ranks: Vec<Option<usize>> = instances.iter().map(EvalInstance::rank).collect();
        MetricsReport::from_ranks(&ranks, ks, skipped)
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.k == k).map(|r| r.recall)
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.k == k).map(|r| r.ndcg)
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut head = String::new();
        let mut vals = String::new();
        for r in &self.rows {
            head.push_str(&format!("{:>10}{:>10}", format!("Recall@{}", r.k), format!("NDCG@{}", r.k)));
            vals.push_str(&format!("{:>9.2}%{:>9.2}%", r.recall * 100.0, r.ndcg * 100.0));
        }
        writeln!(f, "{head}")?;
        writeln!(f, "{vals}")?;
        write!(f, "instances: {}, skipped (unknown target): {}", self.instances, self.skipped)
    }
}

pub const DEFAULT_KS: [usize; 2] = [5, 10];
