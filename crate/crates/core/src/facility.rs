//! The facility-location score, nearest-medoid assignment and the oracle
//! (per ground-truth class) score.
//!
//! Everything here works on a precomputed [`DistanceMatrix`] so that
//! inference, which evaluates these functions many times per batch, never
//! touches the raw embeddings.

use crate::embedding::DistanceMatrix;
use crate::{Error, Result};

/// Cluster / class assignment of every point in a batch.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Labels(Vec<usize>);

impl Labels {
    pub fn new(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `max + 1`, or 0 for an empty vector.
    pub fn num_classes(&self) -> usize {
        self.0.iter().max().map_or(0, |&c| c + 1)
    }

    /// Member indices of every class id in `0..num_classes()`.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, &c) in self.0.iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    /// Checks that every id in `0..num_classes()` occurs at least once.
    pub fn check_dense(&self) -> Result<()> {
        if let Some(k) = self.members().iter().position(Vec::is_empty) {
            return Err(Error::Precondition(format!("class {k} has no members")));
        }
        Ok(())
    }
}

impl From<Vec<usize>> for Labels {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

impl std::ops::Index<usize> for Labels {
    type Output = usize;
    fn index(&self, i: usize) -> &usize {
        &self.0[i]
    }
}

/// Ordered set of distinct point indices acting as facilities (medoids).
/// Position `k` in the set is cluster id `k` under [`assign`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MedoidSet(Vec<usize>);

impl MedoidSet {
    pub fn new(indices: Vec<usize>) -> Self {
        Self(indices)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.contains(&i)
    }

    /// Copy of the set with position `k` replaced by `j`.
    pub fn with_swap(&self, k: usize, j: usize) -> Self {
        let mut v = self.0.clone();
        v[k] = j;
        Self(v)
    }

    /// Nonempty, in range for a batch of `m` points, no duplicates.
    pub fn validate(&self, m: usize) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::Precondition("medoid set is empty".into()));
        }
        for (p, &i) in self.0.iter().enumerate() {
            if i >= m {
                return Err(Error::Precondition(format!(
                    "medoid {i} out of range for a batch of {m}"
                )));
            }
            if self.0[..p].contains(&i) {
                return Err(Error::Precondition(format!("duplicate medoid {i}")));
            }
        }
        Ok(())
    }
}

impl From<Vec<usize>> for MedoidSet {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

impl std::ops::Index<usize> for MedoidSet {
    type Output = usize;
    fn index(&self, k: usize) -> &usize {
        &self.0[k]
    }
}

/// Nearest medoid of point `i`: (position in `s`, distance). Ties go to the
/// smaller position.
#[inline]
pub(crate) fn nearest(d: &DistanceMatrix, s: &[usize], i: usize) -> (usize, f64) {
    let mut best_k = 0;
    let mut best = d.get(i, s[0]);
    for (k, &j) in s.iter().enumerate().skip(1) {
        let v = d.get(i, j);
        if v < best {
            best = v;
            best_k = k;
        }
    }
    (best_k, best)
}

/// `-sum_i min_{j in S} D[i][j]`.
pub fn facility_score(d: &DistanceMatrix, s: &MedoidSet) -> Result<f64> {
    s.validate(d.len())?;
    Ok(facility_score_unchecked(d, s.as_slice()))
}

pub(crate) fn facility_score_unchecked(d: &DistanceMatrix, s: &[usize]) -> f64 {
    let mut total = 0.0;
    for i in 0..d.len() {
        total += nearest(d, s, i).1;
    }
    -total
}

/// Nearest-medoid assignment `g(S)`: `label[i]` is the position within `S`
/// of the closest medoid, smallest position on ties.
pub fn assign(d: &DistanceMatrix, s: &MedoidSet) -> Result<Labels> {
    s.validate(d.len())?;
    Ok(assign_unchecked(d, s.as_slice()))
}

pub(crate) fn assign_unchecked(d: &DistanceMatrix, s: &[usize]) -> Labels {
    Labels((0..d.len()).map(|i| nearest(d, s, i).0).collect())
}

/// Facility score of the subset `members` served by the single facility `j`.
#[inline]
pub(crate) fn within_score(d: &DistanceMatrix, members: &[usize], j: usize) -> f64 {
    let mut total = 0.0;
    for &i in members {
        total += d.get(i, j);
    }
    -total
}

/// Best single medoid of `members`: (index, score). Ties go to the smaller
/// index; `members` must be sorted ascending and nonempty.
pub(crate) fn best_medoid(d: &DistanceMatrix, members: &[usize]) -> (usize, f64) {
    let mut best_j = members[0];
    let mut best = within_score(d, members, best_j);
    for &j in &members[1..] {
        let v = within_score(d, members, j);
        if v > best {
            best = v;
            best_j = j;
        }
    }
    (best_j, best)
}

/// Oracle score: for each ground-truth class, the best within-class single
/// medoid score, summed over classes. Also returns those medoids in class-id
/// order.
pub fn oracle_score(d: &DistanceMatrix, y_star: &Labels) -> Result<(f64, MedoidSet)> {
    if y_star.len() != d.len() {
        return Err(Error::InvalidInput(format!(
            "{} labels for a batch of {}",
            y_star.len(),
            d.len()
        )));
    }
    if y_star.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    y_star.check_dense()?;
    let mut total = 0.0;
    let mut medoids = Vec::new();
    for members in y_star.members() {
        let (j, v) = best_medoid(d, &members);
        total += v;
        medoids.push(j);
    }
    Ok((total, MedoidSet(medoids)))
}
