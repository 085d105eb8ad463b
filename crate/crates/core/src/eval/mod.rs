//! Cosine retrieval, AP@R / mAP@R, and the session retention metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::EmbeddingBatch;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("row {0} has zero norm; cosine similarity is undefined")]
    ZeroNorm(usize),
    #[error("query has zero norm")]
    ZeroQuery,
    #[error("classes {0:?} have a single item, so their queries have nothing to retrieve")]
    Singleton(Vec<usize>),
    #[error("R = {r} is invalid for a gallery of {gallery}")]
    BadR { r: usize, gallery: usize },
    #[error("dimension mismatch: query {query}, gallery {gallery}")]
    Dim { query: usize, gallery: usize },
    #[error("query index {0} out of range")]
    Query(usize),
    #[error("omega metrics need at least two sessions, got {0}")]
    TooFewSessions(usize),
    #[error("ideal mAP@R must be positive, got {0}")]
    BadIdeal(f64),
    #[error("session {session}: {name} = {value} lies outside [0, 1]")]
    OutOfRange {
        session: usize,
        name: &'static str,
        value: f64,
    },
}

/// Gallery order for one query. `order` excludes the query itself when it
/// belongs to the gallery.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedRetrieval {
    pub query: Option<usize>,
    pub order: Vec<usize>,
    pub relevance: Vec<bool>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gallery_norms(gallery: &EmbeddingBatch) -> Result<Vec<f64>, EvalError> {
    (0..gallery.len())
        .map(|i| {
            let n = norm(gallery.vectors.row(i));
            if n > 0.0 && n.is_finite() {
                Ok(n)
            } else {
                Err(EvalError::ZeroNorm(i))
            }
        })
        .collect()
}

fn rank_with_norms(
    query: &[f64],
    query_label: usize,
    exclude: Option<usize>,
    gallery: &EmbeddingBatch,
    norms: &[f64],
) -> Result<RankedRetrieval, EvalError> {
    if query.len() != gallery.dim() {
        return Err(EvalError::Dim {
            query: query.len(),
            gallery: gallery.dim(),
        });
    }
    let qn = norm(query);
    if !(qn > 0.0 && qn.is_finite()) {
        return Err(EvalError::ZeroQuery);
    }
    let mut scored: Vec<(f64, usize)> = (0..gallery.len())
        .filter(|&i| Some(i) != exclude)
        .map(|i| (dot(query, gallery.vectors.row(i)) / (qn * norms[i]), i))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let order: Vec<usize> = scored.into_iter().map(|(_, i)| i).collect();
    let relevance = order.iter().map(|&i| gallery.labels[i] == query_label).collect();
    Ok(RankedRetrieval {
        query: exclude,
        order,
        relevance,
    })
}

/// Orders `gallery` by descending cosine similarity to `query`, ties by
/// ascending index. `exclude` drops the query's own row from the gallery.
pub fn rank_by_cosine(
    query: &[f64],
    query_label: usize,
    exclude: Option<usize>,
    gallery: &EmbeddingBatch,
) -> Result<RankedRetrieval, EvalError> {
    let norms = gallery_norms(gallery)?;
    rank_with_norms(query, query_label, exclude, gallery, &norms)
}

/// `(1/R) sum_{k<=R} P@k * rel@k` over a ranked relevance list.
pub fn average_precision_at_r(relevance: &[bool], r: usize) -> Result<f64, EvalError> {
    if r == 0 || r > relevance.len() {
        return Err(EvalError::BadR {
            r,
            gallery: relevance.len(),
        });
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (k, &rel) in relevance[..r].iter().enumerate() {
        if rel {
            hits += 1;
            total += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(total / r as f64)
}

/// Mean AP@R over `queries`, each ranked against the whole batch minus itself.
pub fn mean_ap_at_r_for(batch: &EmbeddingBatch, queries: &[usize]) -> Result<f64, EvalError> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in &batch.labels {
        *counts.entry(l).or_default() += 1;
    }
    let mut singletons: Vec<usize> = queries
        .iter()
        .map(|&q| batch.labels.get(q).copied().ok_or(EvalError::Query(q)))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .filter(|l| counts[l] < 2)
        .collect();
    if !singletons.is_empty() {
        singletons.sort_unstable();
        singletons.dedup();
        return Err(EvalError::Singleton(singletons));
    }
    if queries.is_empty() {
        return Ok(0.0);
    }
    let norms = gallery_norms(batch)?;
    let mut total = 0.0;
    for &q in queries {
        let label = batch.labels[q];
        let ranked = rank_with_norms(batch.vectors.row(q), label, Some(q), batch, &norms)?;
        total += average_precision_at_r(&ranked.relevance, counts[&label] - 1)?;
    }
    Ok(total / queries.len() as f64)
}

/// Mean AP@R with every item used once as a query.
pub fn mean_ap_at_r(batch: &EmbeddingBatch) -> Result<f64, EvalError> {
    let all: Vec<usize> = (0..batch.len()).collect();
    mean_ap_at_r_for(batch, &all)
}

/// One evaluated session; session 0 is the base model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session: usize,
    pub classes_seen: usize,
    pub alpha_base: f64,
    pub alpha_new: f64,
    pub alpha_all: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub records: Vec<SessionRecord>,
    pub ideal_base: f64,
    pub ideal_all: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmegaReport {
    pub omega_base: f64,
    pub omega_new: f64,
    pub omega_all: f64,
}

/// Retention metrics over the incremental sessions (every record after
/// the first): mean of `alpha_base / ideal_base`, of `alpha_new`, and of
/// `alpha_all / ideal_all`.
pub fn omega_metrics(log: &SessionLog) -> Result<OmegaReport, EvalError> {
    let t = log.records.len();
    if t < 2 {
        return Err(EvalError::TooFewSessions(t));
    }
    for ideal in [log.ideal_base, log.ideal_all] {
        if !(ideal > 0.0 && ideal.is_finite()) {
            return Err(EvalError::BadIdeal(ideal));
        }
    }
    for r in &log.records {
        for (name, value) in [
            ("alpha_base", r.alpha_base),
            ("alpha_new", r.alpha_new),
            ("alpha_all", r.alpha_all),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(EvalError::OutOfRange {
                    session: r.session,
                    name,
                    value,
                });
            }
        }
    }
    let inc = &log.records[1..];
    let n = inc.len() as f64;
    Ok(OmegaReport {
        omega_base: inc.iter().map(|r| r.alpha_base / log.ideal_base).sum::<f64>() / n,
        omega_new: inc.iter().map(|r| r.alpha_new).sum::<f64>() / n,
        omega_all: inc.iter().map(|r| r.alpha_all / log.ideal_all).sum::<f64>() / n,
    })
}

#[cfg(test)]
mod tests;
