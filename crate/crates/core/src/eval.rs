//! Parent-to-child retrieval accuracy.
//!
//! Every test (parent, child) pair is a query. The parent's embedding is
//! ranked against a gallery of test children: the target child plus every
//! child of the other test families (the target's siblings are left out, so
//! each query has exactly one correct answer). A query is a hit at `k` when
//! the target ranks in the top `k`.

use std::fmt::Write as _;

use dcml_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::{positive_pairs, FaceSample, Generation, Relation};
use crate::error::{Error, Result};

/// `(TP + TN) / (P + N) * 100`.
pub fn mean_verification_accuracy(tp: usize, tn: usize, p: usize, n: usize) -> f64 {
    if p + n == 0 {
        return 0.0;
    }
    100.0 * (tp + tn) as f64 / (p + n) as f64
}

/// Retrieval has no negative queries (`TN = N = 0`), so the accuracy is
/// `TP / P * 100`.
pub fn topk_accuracy(tp: usize, p: usize) -> f64 {
    mean_verification_accuracy(tp, 0, p, 0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub relation: Relation,
    pub pairs: usize,
    /// Hits for each `k`, aligned with `EvalReport::topk`.
    pub hits: Vec<usize>,
    pub accuracy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fold: Option<usize>,
    pub topk: Vec<usize>,
    /// F-S, F-D, M-S, M-D in that order.
    pub cells: Vec<Cell>,
    /// Mean over relations that have at least one pair.
    pub average: Vec<f64>,
    /// `TP / P` pooled over all queries.
    pub overall: Vec<f64>,
    pub queries: usize,
    /// Mean of `1 / gallery size` over queries.
    pub chance_top1: f64,
    pub label: String,
}

/// Ranks for every test pair. `query` and `gallery` hold one embedding row
/// per entry of `test`.
pub fn evaluate_topk(
    samples: &[FaceSample],
    test: &[usize],
    query: &Tensor<f32>,
    gallery: &Tensor<f32>,
    topk: &[usize],
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Data("empty test fold".into()));
    }
    if query.shape()[0] != test.len() || gallery.shape() != query.shape() {
        return Err(Error::Data(format!(
            "embeddings {:?} / {:?} do not match {} test samples",
            query.shape(),
            gallery.shape(),
            test.len()
        )));
    }
    if topk.is_empty() || topk.contains(&0) {
        return Err(Error::Config(format!("top-k values must be positive, got {topk:?}")));
    }
    let row_of = |sample: usize| test.iter().position(|&t| t == sample).expect("pair from test set");
    let children: Vec<usize> = test
        .iter()
        .copied()
        .filter(|&i| samples[i].info.generation == Generation::Child)
        .collect();
    let mut cells: Vec<Cell> = Relation::ALL
        .iter()
        .map(|&relation| Cell {
            relation,
            pairs: 0,
            hits: vec![0; topk.len()],
            accuracy: vec![0.0; topk.len()],
        })
        .collect();
    let mut inv_gallery = 0.0;
    let mut clamped = false;
    let pairs = positive_pairs(samples, test);
    for pair in &pairs {
        let q = query.row(row_of(pair.parent));
        let family = samples[pair.child].info.family_id;
        let score = |c: usize| -> f64 {
            let g = gallery.row(row_of(c));
            q.iter().zip(g).map(|(&a, &b)| a as f64 * b as f64).sum()
        };
        let target = score(pair.child);
        let mut size = 1;
        let mut rank = 0;
        for &c in &children {
            if samples[c].info.family_id == family {
                continue;
            }
            size += 1;
            if score(c) >= target {
                rank += 1;
            }
        }
        inv_gallery += 1.0 / size as f64;
        let cell = cells.iter_mut().find(|c| c.relation == pair.relation).expect("relation cell");
        cell.pairs += 1;
        for (j, &k) in topk.iter().enumerate() {
            if k > size {
                clamped = true;
            }
            if rank < k.min(size) {
                cell.hits[j] += 1;
            }
        }
    }
    if clamped {
        log::warn!("top-k clamped to gallery size");
    }
    if pairs.is_empty() {
        return Err(Error::Data("test fold has no parent-child pairs".into()));
    }
    for cell in &mut cells {
        cell.accuracy = cell.hits.iter().map(|&h| topk_accuracy(h, cell.pairs)).collect();
    }
    let filled: Vec<&Cell> = cells.iter().filter(|c| c.pairs > 0).collect();
    let average = (0..topk.len())
        .map(|j| filled.iter().map(|c| c.accuracy[j]).sum::<f64>() / filled.len() as f64)
        .collect();
    let overall = (0..topk.len())
        .map(|j| topk_accuracy(cells.iter().map(|c| c.hits[j]).sum(), pairs.len()))
        .collect();
    Ok(EvalReport {
        fold: None,
        topk: topk.to_vec(),
        cells,
        average,
        overall,
        queries: pairs.len(),
        chance_top1: 100.0 * inv_gallery / pairs.len() as f64,
        label: String::new(),
    })
}

impl EvalReport {
    /// Pools hits across reports with the same `topk` (e.g. several folds
    /// or seeds) into one report.
    pub fn pooled(reports: &[EvalReport], label: &str) -> Result<EvalReport> {
        let first = reports.first().ok_or_else(|| Error::Data("no reports to pool".into()))?;
        if reports.iter().any(|r| r.topk != first.topk) {
            return Err(Error::Data("reports use different k lists".into()));
        }
        let mut cells = first.cells.clone();
        for r in &reports[1..] {
            for (c, o) in cells.iter_mut().zip(&r.cells) {
                c.pairs += o.pairs;
                c.hits.iter_mut().zip(&o.hits).for_each(|(a, b)| *a += b);
            }
        }
        let k = first.topk.len();
        for c in &mut cells {
            c.accuracy = c.hits.iter().map(|&h| topk_accuracy(h, c.pairs)).collect();
        }
        let filled: Vec<&Cell> = cells.iter().filter(|c| c.pairs > 0).collect();
        let queries: usize = reports.iter().map(|r| r.queries).sum();
        let weighted_chance: f64 = reports.iter().map(|r| r.chance_top1 * r.queries as f64).sum();
        Ok(EvalReport {
            fold: None,
            topk: first.topk.clone(),
            average: (0..k)
                .map(|j| filled.iter().map(|c| c.accuracy[j]).sum::<f64>() / filled.len().max(1) as f64)
                .collect(),
            overall: (0..k)
                .map(|j| topk_accuracy(cells.iter().map(|c| c.hits[j]).sum(), queries))
                .collect(),
            cells,
            queries,
            chance_top1: weighted_chance / queries.max(1) as f64,
            label: label.to_string(),
        })
    }

    /// Aligned table: one row per `k`, columns F-S, F-D, M-S, M-D, Avg.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let title = match self.fold {
            Some(f) => format!("fold {f}"),
            None => "pooled".to_string(),
        };
        let _ = write!(out, "{title:<10}");
        for c in &self.cells {
            let _ = write!(out, "{:>8}", c.relation.label());
        }
        let _ = writeln!(out, "{:>8}", "Avg");
        for (j, k) in self.topk.iter().enumerate() {
            let _ = write!(out, "{:<10}", format!("top-{k}"));
            for c in &self.cells {
                if c.pairs == 0 {
                    let _ = write!(out, "{:>8}", "-");
                } else {
                    let _ = write!(out, "{:>8.2}", c.accuracy[j]);
                }
            }
            let _ = writeln!(out, "{:>8.2}", self.average[j]);
        }
        let _ = writeln!(out, "queries {}  chance top-1 {:.2}", self.queries, self.chance_top1);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_arithmetic() {
        assert_eq!(topk_accuracy(5, 10), 50.0);
        assert_eq!(mean_verification_accuracy(5, 0, 10, 0), topk_accuracy(5, 10));
        assert_eq!(mean_verification_accuracy(3, 2, 4, 6), 50.0);
    }
}
