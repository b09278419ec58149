//! Clustering and retrieval quality: NMI, the structured margin and Recall@K.

use crate::embedding::{pairwise_distances, EmbeddingBatch};
use crate::facility::Labels;
use crate::{Error, Result};

/// Co-occurrence counts of two assignments over the same points.
#[derive(Debug, Clone, PartialEq)]
pub struct ContingencyCounts {
    rows: usize,
    cols: usize,
    joint: Vec<usize>,
    total: usize,
}

impl ContingencyCounts {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::InvalidInput(format!(
                "assignment lengths differ: {} vs {}",
                a.len(),
                b.len()
            )));
        }
        let (a, rows) = canonical(a);
        let (b, cols) = canonical(b);
        let mut joint = vec![0; rows * cols];
        for (&x, &y) in a.iter().zip(b.iter()) {
            joint[x * cols + y] += 1;
        }
        Ok(Self {
            rows,
            cols,
            joint,
            total: a.len(),
        })
    }

    pub fn get(&self, i: usize, j: usize) -> usize {
        self.joint[i * self.cols + j]
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn row_sums(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self.get(i, j)).sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<usize> {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self.get(i, j)).sum())
            .collect()
    }

    /// True when the two assignments induce the same partition.
    pub fn is_bijective(&self) -> bool {
        let nonzero_in_row = |i: usize| (0..self.cols).filter(|&j| self.get(i, j) > 0).count();
        let nonzero_in_col = |j: usize| (0..self.rows).filter(|&i| self.get(i, j) > 0).count();
        (0..self.rows).all(|i| nonzero_in_row(i) == 1)
            && (0..self.cols).all(|j| nonzero_in_col(j) == 1)
    }
}

/// Relabels to `0..k` in order of first occurrence, so that any bijective
/// relabeling of the input yields the same table.
fn canonical(labels: &[usize]) -> (Vec<usize>, usize) {
    let max = labels.iter().copied().max().map_or(0, |c| c + 1);
    let mut next = 0;
    let out = if max <= 4 * labels.len() + 16 {
        let mut map = vec![usize::MAX; max];
        labels
            .iter()
            .map(|&c| {
                if map[c] == usize::MAX {
                    map[c] = next;
                    next += 1;
                }
                map[c]
            })
            .collect()
    } else {
        let mut map = std::collections::HashMap::new();
        labels
            .iter()
            .map(|&c| {
                *map.entry(c).or_insert_with(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    };
    (out, next)
}

fn entropy(counts: &[usize], total: f64) -> f64 {
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / total;
            h -= p * p.ln();
        }
    }
    h
}

/// Normalized mutual information `MI / sqrt(H1 * H2)` (natural log),
/// clamped to `[0, 1]`.
///
/// Identical partitions give exactly 1. Otherwise, if either assignment has
/// zero entropy, the result is 0.
pub fn nmi(y1: &Labels, y2: &Labels) -> Result<f64> {
    nmi_slices(y1.as_slice(), y2.as_slice())
}

pub(crate) fn nmi_slices(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::InvalidInput("nmi of empty assignments".into()));
    }
    let t = ContingencyCounts::new(a, b)?;
    Ok(nmi_from_counts(&t))
}

pub(crate) fn nmi_from_counts(t: &ContingencyCounts) -> f64 {
    let m = t.total as f64;
    let rows = t.row_sums();
    let cols = t.col_sums();
    if t.is_bijective() {
        return 1.0;
    }
    let h1 = entropy(&rows, m);
    let h2 = entropy(&cols, m);
    if h1 == 0.0 || h2 == 0.0 {
        return 0.0;
    }
    let mut mi = 0.0;
    for (i, &ri) in rows.iter().enumerate() {
        if ri == 0 {
            continue;
        }
        for (j, &cj) in cols.iter().enumerate() {
            let c = t.get(i, j);
            if c == 0 {
                continue;
            }
            let pij = c as f64 / m;
            let pi = ri as f64 / m;
            let pj = cj as f64 / m;
            mi += pij * (pij / (pi * pj)).ln();
        }
    }
    (mi / (h1 * h2).sqrt()).clamp(0.0, 1.0)
}

/// Structured margin `1 - NMI(y, y_star)`.
pub fn margin(y: &Labels, y_star: &Labels) -> Result<f64> {
    Ok(1.0 - nmi(y, y_star)?)
}

/// Fraction of points with at least one same-label point among their `k`
/// nearest neighbours (Euclidean, self excluded, ties to the smaller index).
pub fn recall_at_k(e: &EmbeddingBatch, labels: &Labels, k: usize) -> Result<f64> {
    Ok(recall_at_ks(e, labels, &[k])?[0])
}

/// Recall@K for several `K` at once, sharing the neighbour ranking.
pub fn recall_at_ks(e: &EmbeddingBatch, labels: &Labels, ks: &[usize]) -> Result<Vec<f64>> {
    let m = e.len();
    if labels.len() != m {
        return Err(Error::InvalidInput(format!(
            "{} labels for {m} embeddings",
            labels.len()
        )));
    }
    for &k in ks {
        if k == 0 || k >= m {
            return Err(Error::InvalidInput(format!(
                "recall@{k} needs 0 < k < batch size {m}"
            )));
        }
    }
    let d = pairwise_distances(e)?;
    let mut hits = vec![0usize; ks.len()];
    let mut order: Vec<usize> = Vec::with_capacity(m);
    for i in 0..m {
        order.clear();
        order.extend((0..m).filter(|&j| j != i));
        order.sort_by(|&a, &b| d.get(i, a).total_cmp(&d.get(i, b)).then(a.cmp(&b)));
        // rank of the first same-label neighbour
        let first = order.iter().position(|&j| labels[j] == labels[i]);
        for (h, &k) in hits.iter_mut().zip(ks) {
            if first.is_some_and(|r| r < k) {
                *h += 1;
            }
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / m as f64).collect())
}
