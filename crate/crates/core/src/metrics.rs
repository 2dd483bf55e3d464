//! Exact retrieval metrics (P@1, P@R, MAP@R) and pairwise violation rates.
//!
//! Every sample is a query against all other samples. `R` for a query is the
//! number of other samples sharing its label; queries with `R = 0` are
//! skipped and counted. Ranking is by ascending Euclidean distance with ties
//! broken by ascending reference index.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::kcenter::{self, PointCloud};
use crate::losses::{generalized_contrastive, violation_indicator};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryScores {
    pub p_at_1: f64,
    pub p_at_r: f64,
    pub map_at_r: f64,
}

/// Chance-constraint diagnostics at `(alpha, beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViolationStats {
    pub alpha: f64,
    pub beta: f64,
    /// Fraction of unordered pairs violating their proximity constraint.
    pub violation_rate: f64,
    /// Mean generalized contrastive loss over the same pairs.
    pub mean_loss: f64,
    /// `mean_loss / alpha`, the violation bound induced by the loss; absent
    /// when `alpha = 0`.
    pub induced_epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub p_at_1: f64,
    pub p_at_r: f64,
    pub map_at_r: f64,
    pub num_queries: usize,
    /// Queries without any true reference.
    pub skipped_queries: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_query: Option<Vec<QueryScores>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub violation: Option<ViolationStats>,
    /// Mean over classes of the per-class average covering radius.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg_covering_radius: Option<f64>,
    /// Minimum pairwise distance among same-class proxies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_proxy_distance: Option<f64>,
}

fn check_rows(embeddings: &[f64], labels: &[usize], dim: usize) -> Result<()> {
    if dim == 0 {
        return Err(Error::InvalidArgument("embedding dim must be positive".into()));
    }
    if embeddings.len() != labels.len() * dim {
        return Err(Error::shape("embeddings", labels.len() * dim, embeddings.len()));
    }
    if embeddings.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("embeddings contain non-finite values".into()));
    }
    Ok(())
}

/// Reference indices ordered by distance to `query`; `exclude` removes the
/// query itself when queries and references are the same set.
pub fn rank_references(
    query: &[f64],
    references: &[f64],
    dim: usize,
    exclude: Option<usize>,
) -> Result<Vec<usize>> {
    if dim == 0 || query.len() != dim {
        return Err(Error::shape("query", dim, query.len()));
    }
    if references.len() % dim != 0 {
        return Err(Error::shape("references", dim, references.len() % dim));
    }
    let n = references.len() / dim;
    let mut scored: Vec<(f64, usize)> = (0..n)
        .filter(|&j| Some(j) != exclude)
        .map(|j| (crate::dist(query, &references[j * dim..(j + 1) * dim]), j))
        .collect();
    if scored.is_empty() {
        return Err(Error::Empty("references"));
    }
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, j)| j).collect())
}

/// `(1/R) Σ_{i ≤ R} P(i)` with `P(i) = P@i` when the `i`-th retrieval is
/// correct and 0 otherwise. `None` when `R = 0`.
pub fn map_at_r(ranked_labels: &[usize], query_label: usize, r: usize) -> Option<f64> {
    if r == 0 {
        return None;
    }
    let mut correct = 0usize;
    let mut acc = 0.0;
    for (i, &l) in ranked_labels.iter().take(r).enumerate() {
        if l == query_label {
            correct += 1;
            acc += correct as f64 / (i + 1) as f64;
        }
    }
    Some(acc / r as f64)
}

fn query_scores(ranked_labels: &[usize], query_label: usize, r: usize) -> QueryScores {
    let hits = ranked_labels.iter().take(r).filter(|&&l| l == query_label).count();
    QueryScores {
        p_at_1: f64::from(u8::from(ranked_labels[0] == query_label)),
        p_at_r: hits as f64 / r as f64,
        map_at_r: map_at_r(ranked_labels, query_label, r).expect("r >= 1"),
    }
}

/// Leave-one-out retrieval metrics over all samples.
pub fn evaluate(embeddings: &[f64], labels: &[usize], dim: usize) -> Result<RetrievalReport> {
    check_rows(embeddings, labels, dim)?;
    let n = labels.len();
    if n < 2 {
        return Err(Error::Empty("evaluation needs at least two samples"));
    }
    let mut class_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *class_counts.entry(l).or_default() += 1;
    }
    let mut per_query = Vec::with_capacity(n);
    let mut skipped = 0;
    for q in 0..n {
        let r = class_counts[&labels[q]] - 1;
        if r == 0 {
            skipped += 1;
            continue;
        }
        let order = rank_references(&embeddings[q * dim..(q + 1) * dim], embeddings, dim, Some(q))?;
        let ranked: Vec<usize> = order.iter().take(r).map(|&j| labels[j]).collect();
        per_query.push(query_scores(&ranked, labels[q], r));
    }
    if per_query.is_empty() {
        return Err(Error::Empty("no query has a true reference"));
    }
    let m = per_query.len() as f64;
    let mean = |f: fn(&QueryScores) -> f64| per_query.iter().map(f).sum::<f64>() / m;
    Ok(RetrievalReport {
        p_at_1: mean(|s| s.p_at_1),
        p_at_r: mean(|s| s.p_at_r),
        map_at_r: mean(|s| s.map_at_r),
        num_queries: per_query.len(),
        skipped_queries: skipped,
        per_query: Some(per_query),
        violation: None,
        avg_covering_radius: None,
        min_proxy_distance: None,
    })
}

/// Fraction of unordered pairs whose violation indicator fires.
pub fn violation_rate(embeddings: &[f64], labels: &[usize], dim: usize, beta: f64) -> Result<f64> {
    Ok(violation_stats(embeddings, labels, dim, 0.0, beta)?.violation_rate)
}

/// Violation rate together with the mean generalized contrastive loss over
/// all unordered pairs.
pub fn violation_stats(
    embeddings: &[f64],
    labels: &[usize],
    dim: usize,
    alpha: f64,
    beta: f64,
) -> Result<ViolationStats> {
    check_rows(embeddings, labels, dim)?;
    let n = labels.len();
    if n < 2 {
        return Err(Error::Empty("violation rate needs at least two samples"));
    }
    let mut violations = 0u64;
    let mut loss = 0.0;
    let mut pairs = 0u64;
    for i in 0..n {
        let u = &embeddings[i * dim..(i + 1) * dim];
        for j in (i + 1)..n {
            let d = crate::dist(u, &embeddings[j * dim..(j + 1) * dim]);
            let same = labels[i] == labels[j];
            violations += u64::from(violation_indicator(d, same, beta));
            loss += generalized_contrastive(d, same, alpha, beta);
            pairs += 1;
        }
    }
    let mean_loss = loss / pairs as f64;
    Ok(ViolationStats {
        alpha,
        beta,
        violation_rate: violations as f64 / pairs as f64,
        mean_loss,
        induced_epsilon: (alpha > 0.0).then(|| mean_loss / alpha),
    })
}

/// Mean over classes of [`kcenter::average_covering_radius`] of that class's
/// embeddings.
pub fn class_average_covering_radius(
    embeddings: &[f64],
    labels: &[usize],
    dim: usize,
) -> Result<f64> {
    check_rows(embeddings, labels, dim)?;
    let mut by_class: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class
            .entry(l)
            .or_default()
            .extend_from_slice(&embeddings[i * dim..(i + 1) * dim]);
    }
    if by_class.is_empty() {
        return Err(Error::Empty("covering radius needs samples"));
    }
    let mut total = 0.0;
    for pts in by_class.values() {
        total += kcenter::average_covering_radius(&PointCloud::new(dim, pts.clone())?);
    }
    Ok(total / by_class.len() as f64)
}

/// Minimum distance between two proxies of the same class; `None` when no
/// class has two proxies.
pub fn min_same_class_distance(proxies: &[f64], classes: &[usize], dim: usize) -> Option<f64> {
    let mut best: Option<f64> = None;
    for i in 0..classes.len() {
        for j in (i + 1)..classes.len() {
            if classes[i] == classes[j] {
                let d = crate::dist(&proxies[i * dim..(i + 1) * dim], &proxies[j * dim..(j + 1) * dim]);
                best = Some(best.map_or(d, |b| b.min(d)));
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_examples() {
        let refs = [0.2, 0.1, 0.3];
        assert_eq!(rank_references(&[0.0], &refs, 1, None).unwrap(), vec![1, 0, 2]);
        let tied = [1.0, -1.0];
        assert_eq!(rank_references(&[0.0], &tied, 1, None).unwrap(), vec![0, 1]);
        let same = [0.0, 0.5, 0.7, 0.9];
        assert_eq!(rank_references(&[0.0], &same, 1, Some(0)).unwrap().len(), 3);
        assert!(rank_references(&[0.0], &[], 1, None).is_err());
    }

    #[test]
    fn map_at_r_examples() {
        assert_eq!(map_at_r(&[0, 1, 0], 0, 2), Some(0.5));
        assert_eq!(map_at_r(&[3, 3, 3], 3, 3), Some(1.0));
        assert_eq!(map_at_r(&[1, 2, 0], 0, 2), Some(0.0));
        assert_eq!(map_at_r(&[1], 0, 0), None);
    }

    #[test]
    fn evaluate_two_same_class() {
        let r = evaluate(&[0.0, 0.0, 1.0, 1.0], &[4, 4], 2).unwrap();
        assert_eq!((r.p_at_1, r.p_at_r, r.map_at_r), (1.0, 1.0, 1.0));
        assert_eq!(r.num_queries, 2);
    }

    #[test]
    fn evaluate_without_valid_queries_errors() {
        assert!(matches!(
            evaluate(&[0.0, 0.0, 1.0, 1.0], &[0, 1], 2),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn singleton_classes_are_skipped() {
        let r = evaluate(&[0.0, 0.1, 5.0], &[0, 0, 1], 1).unwrap();
        assert_eq!(r.skipped_queries, 1);
        assert_eq!(r.num_queries, 2);
        assert_eq!(r.map_at_r, 1.0);
    }

    #[test]
    fn violation_rate_examples() {
        // coincident same-class points never violate
        assert_eq!(violation_rate(&[0.2, 0.2, 0.2], &[1, 1, 1], 1, 0.5).unwrap(), 0.0);
        // every pair violates: same class far apart, different classes close
        assert_eq!(violation_rate(&[0.0, 0.9], &[0, 0], 1, 0.5).unwrap(), 1.0);
        assert_eq!(violation_rate(&[0.0, 0.1], &[0, 1], 1, 0.5).unwrap(), 1.0);
        // 4 points on a line, β = 0.5
        let e = [0.0, 0.2, 0.9, 1.0];
        let l = [0, 0, 1, 0];
        // pairs: (0,1) s d=.2 → 0; (0,2) d d=.9 → 0; (0,3) s d=1 → 1;
        //        (1,2) d d=.7 → 0; (1,3) s d=.8 → 1; (2,3) d d=.1 → 1
        assert_eq!(violation_rate(&e, &l, 1, 0.5).unwrap(), 0.5);
    }

    #[test]
    fn min_proxy_distance_requires_pairs() {
        assert_eq!(min_same_class_distance(&[0.0, 1.0], &[0, 1], 1), None);
        assert_eq!(min_same_class_distance(&[0.0, 1.0, 0.25], &[0, 1, 0], 1), Some(0.25));
    }
}
