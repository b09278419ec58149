//! Loss-augmented inference: find a medoid set `S` with `|S| = C` that
//! (approximately) maximizes
//!
//! ```text
//! A(S) = F(S) + gamma * (1 - NMI(g(S), y*))
//! ```
//!
//! [`greedy_inference`] builds `S` one medoid at a time by best marginal
//! gain, [`pam_refine`] then swaps medoids within their clusters, and
//! [`brute_force_inference`] enumerates every subset for small instances.
//!
//! `A` is not submodular once `gamma > 0`, so gains are recomputed exactly at
//! every step (no lazy evaluation).

use itertools::Itertools;

use crate::embedding::DistanceMatrix;
use crate::facility::{
    assign_unchecked, facility_score_unchecked, within_score, Labels, MedoidSet,
};
use crate::metrics::nmi_slices;
use crate::par::{argmax_first, map_candidates};
use crate::{Error, Result};

/// Default number of refinement sweeps.
pub const DEFAULT_REFINE_ITERS: usize = 5;

/// Largest number of subsets [`brute_force_inference`] will enumerate.
pub const BRUTE_FORCE_LIMIT: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    pub medoids: MedoidSet,
    /// `g(medoids)`.
    pub assignment: Labels,
    /// `A(medoids)`.
    pub objective: f64,
    /// Objective after every greedy step, or after every refinement sweep.
    pub trace: Vec<f64>,
}

/// Which points may replace the medoid of cluster `k` during refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CandidatePool {
    /// Members of cluster `k` under the assignment at the start of the sweep.
    #[default]
    Cluster,
    /// Any point of the batch that is not already a medoid.
    Batch,
}

/// How a candidate replacement `j` for medoid `k` is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SwapScore {
    /// Facility score of cluster `k` served by `j` alone, plus the margin of
    /// the swapped set.
    #[default]
    ClusterProxy,
    /// The full objective `A` of the swapped set.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PamOptions {
    pub gamma: f64,
    pub max_iters: usize,
    pub pool: CandidatePool,
    pub score: SwapScore,
}

impl PamOptions {
    pub fn new(gamma: f64, max_iters: usize) -> Self {
        Self {
            gamma,
            max_iters,
            pool: CandidatePool::Cluster,
            score: SwapScore::ClusterProxy,
        }
    }
}

#[inline]
fn augment<F: FnOnce() -> f64>(score: f64, gamma: f64, margin: F) -> f64 {
    if gamma == 0.0 {
        score
    } else {
        score + gamma * margin()
    }
}

fn margin_unchecked(y: &[usize], y_star: &Labels) -> f64 {
    // lengths agree and are nonzero by construction
    1.0 - nmi_slices(y, y_star.as_slice()).expect("validated assignment")
}

fn objective_unchecked(d: &DistanceMatrix, s: &[usize], y_star: &Labels, gamma: f64) -> f64 {
    augment(facility_score_unchecked(d, s), gamma, || {
        margin_unchecked(assign_unchecked(d, s).as_slice(), y_star)
    })
}

fn check_problem(d: &DistanceMatrix, y_star: &Labels, gamma: f64) -> Result<usize> {
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "gamma must be finite and nonnegative, got {gamma}"
        )));
    }
    if d.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if y_star.len() != d.len() {
        return Err(Error::InvalidInput(format!(
            "{} labels for a batch of {}",
            y_star.len(),
            d.len()
        )));
    }
    y_star.check_dense()?;
    Ok(y_star.num_classes())
}

/// `A(S) = F(S) + gamma * margin(g(S), y_star)`.
pub fn augmented_objective(
    d: &DistanceMatrix,
    s: &MedoidSet,
    y_star: &Labels,
    gamma: f64,
) -> Result<f64> {
    check_problem(d, y_star, gamma)?;
    s.validate(d.len())?;
    Ok(objective_unchecked(d, s.as_slice(), y_star, gamma))
}

fn finish(
    d: &DistanceMatrix,
    s: Vec<usize>,
    y_star: &Labels,
    gamma: f64,
    trace: Vec<f64>,
) -> InferenceResult {
    let assignment = assign_unchecked(d, &s);
    let objective = objective_unchecked(d, &s, y_star, gamma);
    InferenceResult {
        medoids: MedoidSet::new(s),
        assignment,
        objective,
        trace,
    }
}

/// Greedy selection of `C` medoids: each step adds the point with the largest
/// `A(S + i) - A(S)`, smallest index on ties. The first step maximizes
/// `A({i})` directly.
pub fn greedy_inference(
    d: &DistanceMatrix,
    y_star: &Labels,
    gamma: f64,
) -> Result<InferenceResult> {
    let c = check_problem(d, y_star, gamma)?;
    let m = d.len();
    if c > m {
        return Err(Error::InvalidInput(format!("{c} clusters for {m} points")));
    }

    let mut s: Vec<usize> = Vec::with_capacity(c);
    let mut in_s = vec![false; m];
    // distance to, and position of, the nearest selected medoid
    let mut near_d = vec![f64::INFINITY; m];
    let mut near_k = vec![0usize; m];
    let mut trace = Vec::with_capacity(c);

    for step in 0..c {
        let candidates: Vec<usize> = (0..m).filter(|&i| !in_s[i]).collect();
        let values = map_candidates(&candidates, |i| {
            let mut total = 0.0;
            let mut labels = vec![0usize; m];
            for p in 0..m {
                let dp = d.get(p, i);
                if dp < near_d[p] {
                    total += dp;
                    labels[p] = step;
                } else {
                    total += near_d[p];
                    labels[p] = near_k[p];
                }
            }
            augment(-total, gamma, || margin_unchecked(&labels, y_star))
        });
        let best = argmax_first(&values).expect("c <= m leaves a candidate");
        let chosen = candidates[best];
        s.push(chosen);
        in_s[chosen] = true;
        for p in 0..m {
            let dp = d.get(p, chosen);
            if dp < near_d[p] {
                near_d[p] = dp;
                near_k[p] = step;
            }
        }
        trace.push(values[best]);
    }
    Ok(finish(d, s, y_star, gamma, trace))
}

/// Refinement with the default candidate pool (cluster members) and swap
/// score (within-cluster facility score plus margin).
pub fn pam_refine(
    d: &DistanceMatrix,
    y_star: &Labels,
    s_init: &MedoidSet,
    gamma: f64,
    max_iters: usize,
) -> Result<InferenceResult> {
    pam_refine_with(d, y_star, s_init, &PamOptions::new(gamma, max_iters))
}

/// Medoid-swap refinement.
///
/// Each sweep recomputes the assignment `g(S)`, then visits every cluster
/// position `k` in order and replaces `S[k]` by the best-scoring candidate.
/// The current medoid is kept unless a candidate scores strictly higher;
/// among strictly better candidates the smallest index wins. Stops after
/// `max_iters` sweeps or after a sweep that changes nothing. The trace holds
/// `A(S)` after every sweep.
pub fn pam_refine_with(
    d: &DistanceMatrix,
    y_star: &Labels,
    s_init: &MedoidSet,
    opts: &PamOptions,
) -> Result<InferenceResult> {
    let c = check_problem(d, y_star, opts.gamma)?;
    let m = d.len();
    s_init.validate(m)?;
    if s_init.len() != c {
        return Err(Error::Precondition(format!(
            "initial medoid set has {} entries, expected {c}",
            s_init.len()
        )));
    }
    if opts.max_iters == 0 {
        return Err(Error::InvalidInput(
            "refinement needs at least one iteration".into(),
        ));
    }
    let gamma = opts.gamma;
    let mut s = s_init.as_slice().to_vec();
    let mut trace = Vec::new();

    for _ in 0..opts.max_iters {
        let y_pam = assign_unchecked(d, &s);
        let mut clusters = vec![Vec::new(); c];
        for (i, &k) in y_pam.as_slice().iter().enumerate() {
            clusters[k].push(i);
        }
        let mut changed = false;
        for k in 0..c {
            let current = s[k];
            let candidates: Vec<usize> = match opts.pool {
                CandidatePool::Cluster => clusters[k].clone(),
                CandidatePool::Batch => (0..m).collect(),
            }
            .into_iter()
            .filter(|&j| j == current || !s.contains(&j))
            .collect();
            if candidates.iter().all(|&j| j == current) {
                continue;
            }
            let s_ref = &s;
            let members = &clusters[k];
            let score = |j: usize| -> f64 {
                let mut swapped = s_ref.clone();
                swapped[k] = j;
                match opts.score {
                    SwapScore::ClusterProxy => augment(within_score(d, members, j), gamma, || {
                        margin_unchecked(assign_unchecked(d, &swapped).as_slice(), y_star)
                    }),
                    SwapScore::Full => objective_unchecked(d, &swapped, y_star, gamma),
                }
            };
            let values = map_candidates(&candidates, score);
            let mut best_j = current;
            let mut best = match candidates.iter().position(|&j| j == current) {
                Some(p) => values[p],
                None => score(current),
            };
            for (&j, &v) in candidates.iter().zip(&values) {
                if j != current && v > best {
                    best = v;
                    best_j = j;
                }
            }
            if best_j != current {
                s[k] = best_j;
                changed = true;
            }
        }
        trace.push(objective_unchecked(d, &s, y_star, gamma));
        if !changed {
            break;
        }
    }
    Ok(finish(d, s, y_star, gamma, trace))
}

/// Greedy selection followed by refinement with default options.
pub fn greedy_then_refine(
    d: &DistanceMatrix,
    y_star: &Labels,
    gamma: f64,
    max_iters: usize,
) -> Result<InferenceResult> {
    let greedy = greedy_inference(d, y_star, gamma)?;
    pam_refine(d, y_star, &greedy.medoids, gamma, max_iters)
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u128::MAX / 1024 {
            return u128::MAX;
        }
    }
    acc
}

/// Exact maximizer of `A` over all subsets of size `C`; the
/// lexicographically smallest index sequence wins ties.
pub fn brute_force_inference(
    d: &DistanceMatrix,
    y_star: &Labels,
    gamma: f64,
) -> Result<InferenceResult> {
    let c = check_problem(d, y_star, gamma)?;
    let m = d.len();
    if c > m {
        return Err(Error::InvalidInput(format!("{c} clusters for {m} points")));
    }
    let count = binomial(m, c);
    if count > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge(format!(
            "C({m}, {c}) = {count} subsets exceeds {BRUTE_FORCE_LIMIT}"
        )));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for s in (0..m).combinations(c) {
        let v = objective_unchecked(d, &s, y_star, gamma);
        if best.as_ref().is_none_or(|(b, _)| v > *b) {
            best = Some((v, s));
        }
    }
    let (v, s) = best.expect("at least one subset");
    Ok(finish(d, s, y_star, gamma, vec![v]))
}

/// The best single exchange `S[k] -> j` (with `j` any non-medoid point) and
/// its gain `A(S') - A(S)`. Used to certify local optimality.
pub fn best_single_swap(
    d: &DistanceMatrix,
    y_star: &Labels,
    s: &MedoidSet,
    gamma: f64,
) -> Result<Option<(usize, usize, f64)>> {
    check_problem(d, y_star, gamma)?;
    s.validate(d.len())?;
    let base = objective_unchecked(d, s.as_slice(), y_star, gamma);
    let mut best: Option<(usize, usize, f64)> = None;
    for k in 0..s.len() {
        for j in (0..d.len()).filter(|&j| !s.contains(j)) {
            let gain = objective_unchecked(d, s.with_swap(k, j).as_slice(), y_star, gamma) - base;
            if best.is_none_or(|(_, _, g)| gain > g) {
                best = Some((k, j, gain));
            }
        }
    }
    Ok(best)
}
