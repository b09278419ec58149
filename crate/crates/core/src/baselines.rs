//! Comparison losses: triplet with semi-hard negative mining, lifted
//! structured embedding and N-pairs. Each returns the loss and its gradient
//! with respect to the embedding rows.
//!
//! Positive pairs are *ordered*: `(i, j)` and `(j, i)` are both in the set
//! whenever `i != j` share a label.

use ndarray::Array2;

use crate::embedding::{
    pairwise_distances, pairwise_similarities, pairwise_sq_distances, EmbeddingBatch,
};
use crate::facility::Labels;
use crate::{Error, Result};

/// Same-label and different-label ordered pairs of a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairIndex {
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
    /// Different-label partners of every point, ascending.
    negatives_of: Vec<Vec<usize>>,
}

impl PairIndex {
    pub fn new(y: &Labels) -> Self {
        let m = y.len();
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        let mut negatives_of = vec![Vec::new(); m];
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    continue;
                }
                if y[i] == y[j] {
                    positives.push((i, j));
                } else {
                    negatives.push((i, j));
                    negatives_of[i].push(j);
                }
            }
        }
        Self {
            positives,
            negatives,
            negatives_of,
        }
    }

    pub fn negatives_of(&self, i: usize) -> &[usize] {
        &self.negatives_of[i]
    }

    /// Every anchor of a positive pair needs at least one negative.
    fn checked(y: &Labels, m: usize) -> Result<Self> {
        if y.len() != m {
            return Err(Error::InvalidInput(format!(
                "{} labels for {m} embeddings",
                y.len()
            )));
        }
        let idx = Self::new(y);
        if idx.positives.is_empty() {
            return Err(Error::PathologicalBatch("no positive pairs".into()));
        }
        if let Some(&(i, _)) = idx
            .positives
            .iter()
            .find(|(i, _)| idx.negatives_of[*i].is_empty())
        {
            return Err(Error::PathologicalBatch(format!(
                "point {i} has no negatives"
            )));
        }
        Ok(idx)
    }
}

/// `d(D_ab)/d(E_a) = (E_a - E_b) / D_ab`, zero at coincidence.
fn add_distance_grad(
    e: &EmbeddingBatch,
    g: &mut Array2<f64>,
    a: usize,
    b: usize,
    dist: f64,
    coef: f64,
) {
    if dist == 0.0 || coef == 0.0 {
        return;
    }
    for t in 0..e.dim() {
        let u = coef * (e.data()[[a, t]] - e.data()[[b, t]]) / dist;
        g[[a, t]] += u;
        g[[b, t]] -= u;
    }
}

/// `d(D^2_ab)/d(E_a) = 2 (E_a - E_b)`.
fn add_sq_distance_grad(e: &EmbeddingBatch, g: &mut Array2<f64>, a: usize, b: usize, coef: f64) {
    for t in 0..e.dim() {
        let u = 2.0 * coef * (e.data()[[a, t]] - e.data()[[b, t]]);
        g[[a, t]] += u;
        g[[b, t]] -= u;
    }
}

/// Semi-hard negative for positive pair `(i, j)`: the closest negative that
/// is strictly farther than `j`, or the farthest negative if none is.
/// Ties go to the smaller index.
pub fn semi_hard_negative(d2: &Array2<f64>, negatives: &[usize], i: usize, j: usize) -> usize {
    let pos = d2[[i, j]];
    let mut semi: Option<usize> = None;
    for &k in negatives {
        if d2[[i, k]] > pos && semi.is_none_or(|s| d2[[i, k]] < d2[[i, s]]) {
            semi = Some(k);
        }
    }
    semi.unwrap_or_else(|| {
        let mut far = negatives[0];
        for &k in &negatives[1..] {
            if d2[[i, k]] > d2[[i, far]] {
                far = k;
            }
        }
        far
    })
}

/// `1/|P| sum_{(i,j)} [D^2_ij + alpha - D^2_{i,k*}]_+` with squared distances
/// and `k*` the semi-hard negative.
pub fn triplet_semihard_loss(
    e: &EmbeddingBatch,
    y: &Labels,
    alpha: f64,
) -> Result<(f64, Array2<f64>)> {
    let idx = PairIndex::checked(y, e.len())?;
    let d2 = pairwise_sq_distances(e)?;
    let scale = 1.0 / idx.positives.len() as f64;
    let mut loss = 0.0;
    let mut g = Array2::zeros((e.len(), e.dim()));
    for &(i, j) in &idx.positives {
        let k = semi_hard_negative(&d2, idx.negatives_of(i), i, j);
        let term = d2[[i, j]] + alpha - d2[[i, k]];
        if term > 0.0 {
            loss += term;
            add_sq_distance_grad(e, &mut g, i, j, scale);
            add_sq_distance_grad(e, &mut g, i, k, -scale);
        }
    }
    Ok((loss * scale, g))
}

/// Numerically stable `log(sum exp(v))` for a nonempty slice.
fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for &x in v {
        s += (x - max).exp();
    }
    max + s.ln()
}

/// Lifted structured loss with unsquared distances and a squared hinge:
///
/// ```text
/// 1/(2|P|) sum_{(i,j)} [ log( sum_{k in N(i)} e^{alpha - D_ik} + sum_{l in N(j)} e^{alpha - D_jl} ) + D_ij ]_+^2
/// ```
pub fn lifted_struct_loss(
    e: &EmbeddingBatch,
    y: &Labels,
    alpha: f64,
) -> Result<(f64, Array2<f64>)> {
    let idx = PairIndex::checked(y, e.len())?;
    let d = pairwise_distances(e)?;
    let scale = 1.0 / (2.0 * idx.positives.len() as f64);
    let mut loss = 0.0;
    let mut g = Array2::zeros((e.len(), e.dim()));
    let mut logits = Vec::new();
    let mut owners = Vec::new();
    for &(i, j) in &idx.positives {
        logits.clear();
        owners.clear();
        for &k in idx.negatives_of(i) {
            logits.push(alpha - d.get(i, k));
            owners.push((i, k));
        }
        for &l in idx.negatives_of(j) {
            logits.push(alpha - d.get(j, l));
            owners.push((j, l));
        }
        let lse = log_sum_exp(&logits);
        let inner = lse + d.get(i, j);
        if inner <= 0.0 {
            continue;
        }
        loss += inner * inner;
        let coef = 2.0 * scale * inner;
        add_distance_grad(e, &mut g, i, j, d.get(i, j), coef);
        for (&z, &(a, b)) in logits.iter().zip(&owners) {
            let p = (z - lse).exp();
            add_distance_grad(e, &mut g, a, b, d.get(a, b), -coef * p);
        }
    }
    Ok((loss * scale, g))
}

/// N-pairs loss: softmax cross-entropy of each positive similarity against
/// the anchor's negatives, plus `lambda/m sum_i |E_i|` (unsquared norm).
pub fn npairs_loss(e: &EmbeddingBatch, y: &Labels, lambda: f64) -> Result<(f64, Array2<f64>)> {
    let idx = PairIndex::checked(y, e.len())?;
    let s = pairwise_similarities(e)?;
    let m = e.len();
    let scale = 1.0 / idx.positives.len() as f64;
    let mut loss = 0.0;
    let mut g = Array2::zeros((m, e.dim()));
    let mut logits = Vec::new();
    // accumulate d(loss)/d(S_ab) over ordered (a, b)
    let mut ds = Array2::<f64>::zeros((m, m));
    for &(i, j) in &idx.positives {
        logits.clear();
        logits.push(s.get(i, j));
        logits.extend(idx.negatives_of(i).iter().map(|&k| s.get(i, k)));
        let lse = log_sum_exp(&logits);
        loss += lse - s.get(i, j);
        ds[[i, j]] += scale * ((logits[0] - lse).exp() - 1.0);
        for (&k, &z) in idx.negatives_of(i).iter().zip(&logits[1..]) {
            ds[[i, k]] += scale * (z - lse).exp();
        }
    }
    for a in 0..m {
        for b in 0..m {
            let c = ds[[a, b]];
            if c == 0.0 {
                continue;
            }
            for t in 0..e.dim() {
                g[[a, t]] += c * e.data()[[b, t]];
                g[[b, t]] += c * e.data()[[a, t]];
            }
        }
    }
    let mut loss = loss * scale;
    if lambda != 0.0 {
        let coef = lambda / m as f64;
        let mut reg = 0.0;
        for (i, row) in e.data().rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if norm == 0.0 {
                return Err(Error::DegenerateRow { row: i, norm });
            }
            reg += norm;
            for t in 0..e.dim() {
                g[[i, t]] += coef * row[t] / norm;
            }
        }
        loss += coef * reg;
    }
    Ok((loss, g))
}
