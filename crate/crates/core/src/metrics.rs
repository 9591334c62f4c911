//! Task metrics: instance accuracy, retrieval mAP and NDCG, face accuracy and
//! length-weighted edge accuracy.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Default number of retrieved items scored per query.
pub const DEFAULT_CUTOFF: usize = 1000;

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("length mismatch: {a} vs {b}")));
    }
    Ok(())
}

pub fn mean_instance_accuracy(predictions: &[usize], targets: &[usize]) -> Result<f64> {
    check_lengths(predictions.len(), targets.len())?;
    if predictions.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let hits = predictions.iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predictions.len() as f64)
}

pub fn face_accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    mean_instance_accuracy(predicted, truth)
}

/// `Σ len_e [pred_e = truth_e] / Σ len_e`.
pub fn edge_accuracy(predicted: &[usize], truth: &[usize], lengths: &[f64]) -> Result<f64> {
    check_lengths(predicted.len(), truth.len())?;
    check_lengths(predicted.len(), lengths.len())?;
    if predicted.is_empty() {
        return Err(Error::invalid("edge accuracy of an empty set"));
    }
    if let Some(l) = lengths.iter().find(|l| !(**l > 0.0)) {
        return Err(Error::invalid(format!("nonpositive edge length {l}")));
    }
    let (mut hit, mut total) = (0.0, 0.0);
    for ((p, t), l) in predicted.iter().zip(truth).zip(lengths) {
        total += l;
        if p == t {
            hit += l;
        }
    }
    Ok(hit / total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub query_id: String,
    pub ranked_ids: Vec<String>,
    /// Same-class flags, aligned with `ranked_ids`.
    pub relevance: Vec<bool>,
    /// Relevant items in the whole corpus (excluding the query).
    pub total_relevant: usize,
}

impl RetrievalResult {
    pub fn validate(&self) -> Result<()> {
        check_lengths(self.ranked_ids.len(), self.relevance.len())?;
        let mut seen = std::collections::HashSet::new();
        for id in &self.ranked_ids {
            if *id == self.query_id || !seen.insert(id) {
                return Err(Error::invalid(format!("bad ranking for query {}: {id}", self.query_id)));
            }
        }
        if self.relevance.iter().filter(|r| **r).count() > self.total_relevant {
            return Err(Error::invalid("more relevant ranks than relevant items"));
        }
        Ok(())
    }
}

pub fn average_precision(relevance: &[bool], total_relevant: usize, cutoff: usize) -> f64 {
    let denom = total_relevant.min(cutoff);
    if denom == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, _) in relevance.iter().take(cutoff).enumerate().filter(|(_, r)| **r) {
        hits += 1;
        sum += hits as f64 / (k + 1) as f64;
    }
    sum / denom as f64
}

fn check_cutoff(cutoff: usize) -> Result<()> {
    if cutoff == 0 {
        return Err(Error::invalid("cutoff must be at least 1"));
    }
    Ok(())
}

/// Mean over queries of [`average_precision`]; zero when there are no queries.
pub fn mean_average_precision(results: &[RetrievalResult], cutoff: usize) -> Result<f64> {
    check_cutoff(cutoff)?;
    if results.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = results.iter().map(|r| average_precision(&r.relevance, r.total_relevant, cutoff)).sum();
    Ok(sum / results.len() as f64)
}

/// Binary-gain NDCG with a base-2 discount.
pub fn ndcg_single(relevance: &[bool], total_relevant: usize, cutoff: usize) -> f64 {
    let dcg: f64 = relevance
        .iter()
        .take(cutoff)
        .enumerate()
        .filter(|(_, r)| **r)
        .map(|(k, _)| 1.0 / ((k + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..total_relevant.min(cutoff)).map(|k| 1.0 / ((k + 2) as f64).log2()).sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

pub fn ndcg(results: &[RetrievalResult], cutoff: usize) -> Result<f64> {
    check_cutoff(cutoff)?;
    if results.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = results.iter().map(|r| ndcg_single(&r.relevance, r.total_relevant, cutoff)).sum();
    Ok(sum / results.len() as f64)
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// A corpus item: id, class and descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub id: String,
    pub class: usize,
    pub vector: Vec<f64>,
}

/// Ranks the corpus for every query by ascending Euclidean distance, ties by id.
/// Each query is excluded from its own ranking.
pub fn rank_corpus(corpus: &[Descriptor]) -> Vec<(RetrievalResult, Vec<f64>)> {
    corpus
        .iter()
        .map(|q| {
            let mut others: Vec<(&Descriptor, f64)> = corpus
                .iter()
                .filter(|c| c.id != q.id)
                .map(|c| (c, euclidean(&q.vector, &c.vector)))
                .collect();
            others.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then_with(|| a.0.id.cmp(&b.0.id)));
            let result = RetrievalResult {
                query_id: q.id.clone(),
                ranked_ids: others.iter().map(|(c, _)| c.id.clone()).collect(),
                relevance: others.iter().map(|(c, _)| c.class == q.class).collect(),
                total_relevant: others.iter().filter(|(c, _)| c.class == q.class).count(),
            };
            (result, others.iter().map(|(_, d)| *d).collect())
        })
        .collect()
}

/// `query_id,rank,mesh_id,distance` lines, ranks starting at 1.
pub fn rankings_csv(ranked: &[(RetrievalResult, Vec<f64>)]) -> String {
    let mut out = String::from("query_id,rank,mesh_id,distance\n");
    for (r, dists) in ranked {
        for (k, (id, d)) in r.ranked_ids.iter().zip(dists).enumerate() {
            let _ = writeln!(out, "{},{},{id},{d}", r.query_id, k + 1);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub dataset: String,
    pub split: String,
    pub method: String,
    pub metric: String,
    pub value: f64,
}

pub fn report_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("dataset,split,method,metric,value\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.dataset, r.split, r.method, r.metric, r.value);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_counts() {
        assert_eq!(mean_instance_accuracy(&[0, 1, 2], &[0, 1, 1]).unwrap(), 2.0 / 3.0);
        assert!(mean_instance_accuracy(&[], &[]).is_err());
        assert!(mean_instance_accuracy(&[0], &[0, 1]).is_err());
        assert_eq!(face_accuracy(&[1, 1, 0, 0], &[1, 0, 0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn edge_accuracy_weights_by_length() {
        assert_eq!(edge_accuracy(&[0, 1, 2], &[0, 0, 2], &[2.0, 1.0, 1.0]).unwrap(), 0.75);
        assert!(edge_accuracy(&[0], &[0], &[0.0]).is_err());
        assert!(edge_accuracy(&[0], &[0], &[f64::NAN]).is_err());
    }

    #[test]
    fn worked_retrieval_examples() {
        let rel = [true, false, true];
        assert!((average_precision(&rel, 2, 10) - 5.0 / 6.0).abs() < 1e-15);
        assert!((ndcg_single(&rel, 2, 10) - 1.5 / (1.0 + 1.0 / 3f64.log2())).abs() < 1e-15);
        assert_eq!(average_precision(&[false; 3], 0, 10), 0.0);
        assert_eq!(ndcg_single(&[false; 3], 0, 10), 0.0);
        assert_eq!(average_precision(&[true, true], 2, 10), 1.0);
    }

    #[test]
    fn ranking_breaks_ties_by_id_and_excludes_query() {
        let d = |id: &str, class, x| Descriptor { id: id.into(), class, vector: vec![x] };
        let corpus = [d("q", 0, 0.0), d("b", 0, 1.0), d("a", 1, 1.0), d("c", 0, 0.5)];
        let ranked = rank_corpus(&corpus);
        assert_eq!(ranked[0].0.ranked_ids, ["c", "a", "b"]);
        assert_eq!(ranked[0].0.relevance, [true, false, true]);
        assert_eq!(ranked[0].0.total_relevant, 2);
        for (r, _) in &ranked {
            r.validate().unwrap();
        }
        assert!(rankings_csv(&ranked).starts_with("query_id,rank,mesh_id,distance\nq,1,c,0.5\n"));
    }
}
