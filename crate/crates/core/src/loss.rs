//! The structured facility-location clustering loss
//!
//! ```text
//! loss = [ max_{|S| = C} { F(S) + gamma * (1 - NMI(g(S), y*)) } - F~(y*) ]_+
//! ```
//!
//! and its subgradient with respect to the embeddings. The inner maximum is
//! found approximately by greedy selection plus refinement, so the gradient
//! is exact for the medoid set actually found, not for the true maximizer.

use ndarray::Array2;

use crate::embedding::{pairwise_distances, DistanceMatrix, EmbeddingBatch};
use crate::facility::{nearest, oracle_score, Labels, MedoidSet};
use crate::inference::{brute_force_inference, greedy_then_refine, InferenceResult};
use crate::{Error, Result};

/// How the loss-augmented maximization is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossInference {
    /// Greedy selection refined for at most this many sweeps.
    GreedyRefine(usize),
    /// Exhaustive search; only for small batches.
    BruteForce,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// `max(hinge, 0)`.
    pub value: f64,
    /// `A(S_pam) - F~`, before clipping.
    pub hinge: f64,
    pub active: bool,
    /// `A(S_pam)`.
    pub augmented: f64,
    /// `F~(y*)`.
    pub oracle: f64,
    pub s_pam: MedoidSet,
    pub assignment: Labels,
    pub oracle_medoids: MedoidSet,
    /// d(loss)/d(embeddings); all zeros when the hinge is inactive.
    pub grad_embeddings: Array2<f64>,
}

/// Rejects batches on which the clustering loss is trivial: a single class,
/// or every point in its own class.
pub fn check_batch(y: &Labels) -> Result<()> {
    let members = y.members();
    let classes = members.iter().filter(|c| !c.is_empty()).count();
    if classes < 2 {
        return Err(Error::PathologicalBatch(format!(
            "{classes} distinct label(s); need at least 2"
        )));
    }
    if members.iter().all(|c| c.len() < 2) {
        return Err(Error::PathologicalBatch(
            "every label occurs only once".into(),
        ));
    }
    Ok(())
}

/// Adds `sign * (E_i - E_j) / D_ij` to row `i` and its negation to row `j`.
/// Coincident points contribute nothing (the zero subgradient).
#[inline]
fn pull(e: &EmbeddingBatch, g: &mut Array2<f64>, i: usize, j: usize, dist: f64, sign: f64) {
    if dist == 0.0 {
        return;
    }
    for t in 0..e.dim() {
        let u = (e.data()[[i, t]] - e.data()[[j, t]]) / dist;
        g[[i, t]] += sign * u;
        g[[j, t]] -= sign * u;
    }
}

fn grad_facility_with(e: &EmbeddingBatch, d: &DistanceMatrix, s: &[usize]) -> Array2<f64> {
    let mut g = Array2::zeros((e.len(), e.dim()));
    for i in 0..e.len() {
        let (k, dist) = nearest(d, s, i);
        pull(e, &mut g, i, s[k], dist, -1.0);
    }
    g
}

fn grad_oracle_with(
    e: &EmbeddingBatch,
    d: &DistanceMatrix,
    y_star: &Labels,
    medoids: &[usize],
) -> Array2<f64> {
    let mut g = Array2::zeros((e.len(), e.dim()));
    for i in 0..e.len() {
        let j = medoids[y_star[i]];
        pull(e, &mut g, i, j, d.get(i, j), -1.0);
    }
    g
}

/// Gradient of `F(E, S) = -sum_i |E_i - E_{j*(i)}|` with the nearest-medoid
/// map `j*` held fixed: each point is pulled toward its medoid and the medoid
/// toward the point.
pub fn grad_facility(e: &EmbeddingBatch, s: &MedoidSet) -> Result<Array2<f64>> {
    s.validate(e.len())?;
    let d = pairwise_distances(e)?;
    Ok(grad_facility_with(e, &d, s.as_slice()))
}

/// Gradient of the oracle score with the per-class medoids held fixed.
pub fn grad_oracle(
    e: &EmbeddingBatch,
    y_star: &Labels,
    oracle_medoids: &MedoidSet,
) -> Result<Array2<f64>> {
    if y_star.len() != e.len() {
        return Err(Error::InvalidInput(format!(
            "{} labels for {} embeddings",
            y_star.len(),
            e.len()
        )));
    }
    y_star.check_dense()?;
    oracle_medoids.validate(e.len())?;
    if oracle_medoids.len() != y_star.num_classes() {
        return Err(Error::Precondition(format!(
            "{} oracle medoids for {} classes",
            oracle_medoids.len(),
            y_star.num_classes()
        )));
    }
    let d = pairwise_distances(e)?;
    Ok(grad_oracle_with(e, &d, y_star, oracle_medoids.as_slice()))
}

/// Loss value and subgradient, solving the inner maximization by greedy
/// selection followed by `refine_iters` refinement sweeps.
pub fn clustering_loss(
    e: &EmbeddingBatch,
    y_star: &Labels,
    gamma: f64,
    refine_iters: usize,
) -> Result<LossOutput> {
    clustering_loss_with(e, y_star, gamma, LossInference::GreedyRefine(refine_iters))
}

pub fn clustering_loss_with(
    e: &EmbeddingBatch,
    y_star: &Labels,
    gamma: f64,
    inference: LossInference,
) -> Result<LossOutput> {
    if y_star.len() != e.len() {
        return Err(Error::InvalidInput(format!(
            "{} labels for {} embeddings",
            y_star.len(),
            e.len()
        )));
    }
    y_star.check_dense()?;
    check_batch(y_star)?;
    let d = pairwise_distances(e)?;
    let (oracle, oracle_medoids) = oracle_score(&d, y_star)?;
    let InferenceResult {
        medoids,
        assignment,
        objective,
        ..
    } = match inference {
        LossInference::GreedyRefine(t) => greedy_then_refine(&d, y_star, gamma, t)?,
        LossInference::BruteForce => brute_force_inference(&d, y_star, gamma)?,
    };
    let hinge = objective - oracle;
    let active = hinge > 0.0;
    let grad_embeddings = if active {
        grad_facility_with(e, &d, medoids.as_slice())
            - grad_oracle_with(e, &d, y_star, oracle_medoids.as_slice())
    } else {
        Array2::zeros((e.len(), e.dim()))
    };
    Ok(LossOutput {
        value: hinge.max(0.0),
        hinge,
        active,
        augmented: objective,
        oracle,
        s_pam: medoids,
        assignment,
        oracle_medoids,
        grad_embeddings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facility::facility_score;
    use crate::inference::augmented_objective;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(m: usize, dim: usize, c: usize, seed: u64) -> (EmbeddingBatch, Labels) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = EmbeddingBatch::new(Array2::from_shape_fn((m, dim), |_| {
            rng.random_range(-1.0..1.0)
        }))
        .unwrap();
        (e, (0..m).map(|i| i % c).collect::<Vec<_>>().into())
    }

    /// `-sum_i |E_i - E_{owner(i)}|` for a frozen owner map.
    fn frozen_score(e: &Array2<f64>, owner: &[usize]) -> f64 {
        let mut total = 0.0;
        for (i, &j) in owner.iter().enumerate() {
            let mut s = 0.0;
            for t in 0..e.ncols() {
                s += (e[[i, t]] - e[[j, t]]).powi(2);
            }
            total -= s.sqrt();
        }
        total
    }

    fn fd_grad(e: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(e.raw_dim());
        for idx in 0..e.len() {
            let (r, c) = (idx / e.ncols(), idx % e.ncols());
            let mut p = e.clone();
            p[[r, c]] += h;
            let mut q = e.clone();
            q[[r, c]] -= h;
            g[[r, c]] = (f(&p) - f(&q)) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn zero_distortion_embedding_has_zero_loss() {
        let e = EmbeddingBatch::from_rows(&[
            vec![0.0, 1.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![1.0, 0.0],
        ])
        .unwrap();
        let out = clustering_loss(&e, &vec![0, 0, 1, 1, 1].into(), 0.0, 5).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(!out.active);
        assert!(out.grad_embeddings.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn guard_rejects_pathological_batches() {
        let e = EmbeddingBatch::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        assert!(matches!(
            clustering_loss(&e, &vec![0, 0, 0].into(), 1.0, 5),
            Err(Error::PathologicalBatch(_))
        ));
        assert!(matches!(
            clustering_loss(&e, &vec![0, 1, 2].into(), 1.0, 5),
            Err(Error::PathologicalBatch(_))
        ));
    }

    #[test]
    fn brute_force_hinge_is_nonnegative() {
        for seed in 0..30 {
            let (e, y) = random_batch(9, 2, 3, seed);
            let out = clustering_loss_with(&e, &y, 1.0, LossInference::BruteForce).unwrap();
            assert!(out.hinge >= -1e-9);
        }
    }

    #[test]
    fn value_matches_components() {
        let (e, y) = random_batch(12, 2, 3, 42);
        let out = clustering_loss(&e, &y, 1.0, 5).unwrap();
        let d = pairwise_distances(&e).unwrap();
        let a = augmented_objective(&d, &out.s_pam, &y, 1.0).unwrap();
        let (oracle, _) = oracle_score(&d, &y).unwrap();
        assert!((out.value - (a - oracle).max(0.0)).abs() < 1e-12);
        assert!(out.value > 0.0);
    }

    #[test]
    fn facility_gradient_hand_example() {
        let e = EmbeddingBatch::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let g = grad_facility(&e, &vec![0].into()).unwrap();
        assert_eq!(g, array![[1.0], [-1.0]]);
    }

    #[test]
    fn facility_gradient_zero_when_coincident() {
        let e =
            EmbeddingBatch::from_rows(&[vec![3.0, 1.0], vec![3.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let g = grad_facility(&e, &vec![0, 2].into()).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn facility_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let (e, _) = random_batch(10, 3, 2, 100 + seed);
            let s: MedoidSet = vec![1, 5, 8].into();
            let d = pairwise_distances(&e).unwrap();
            let owner: Vec<usize> = (0..10).map(|i| s[nearest(&d, s.as_slice(), i).0]).collect();
            let g = grad_facility(&e, &s).unwrap();
            let fd = fd_grad(e.data(), |x| frozen_score(x, &owner));
            for (a, b) in g.iter().zip(fd.iter()) {
                assert!(rel_err(*a, *b) <= 1e-5, "{a} vs {b}");
            }
            // frozen owners agree with the live facility score at the base point
            assert!(
                (frozen_score(e.data(), &owner) - facility_score(&d, &s).unwrap()).abs() < 1e-12
            );
        }
    }

    #[test]
    fn oracle_gradient_cases() {
        let e = EmbeddingBatch::from_rows(&[vec![1.0], vec![1.0], vec![4.0], vec![4.0]]).unwrap();
        let y: Labels = vec![0, 0, 1, 1].into();
        assert!(grad_oracle(&e, &y, &vec![0, 2].into())
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));

        let e = EmbeddingBatch::from_rows(&[vec![1.0], vec![4.0]]).unwrap();
        assert!(grad_oracle(&e, &vec![0, 1].into(), &vec![0, 1].into())
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));

        for seed in 0..10 {
            let (e, y) = random_batch(11, 2, 3, 200 + seed);
            let d = pairwise_distances(&e).unwrap();
            let (_, med) = oracle_score(&d, &y).unwrap();
            let owner: Vec<usize> = (0..11).map(|i| med[y[i]]).collect();
            let g = grad_oracle(&e, &y, &med).unwrap();
            let fd = fd_grad(e.data(), |x| frozen_score(x, &owner));
            for (a, b) in g.iter().zip(fd.iter()) {
                assert!(rel_err(*a, *b) <= 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn loss_gradient_rows_sum_to_zero_and_translation_invariant() {
        let (e, y) = random_batch(12, 3, 3, 7);
        let out = clustering_loss(&e, &y, 1.0, 5).unwrap();
        for t in 0..3 {
            assert!(out.grad_embeddings.column(t).sum().abs() < 1e-12);
        }
        let shifted = EmbeddingBatch::new(e.data() + &array![[0.3, -2.0, 5.0]]).unwrap();
        let out2 = clustering_loss(&shifted, &y, 1.0, 5).unwrap();
        assert!((out.value - out2.value).abs() < 1e-9);
    }

    #[test]
    fn loss_gradient_is_difference_of_components() {
        for seed in 0..10 {
            let (e, y) = random_batch(12, 2, 3, 300 + seed);
            let out = clustering_loss(&e, &y, 1.0, 5).unwrap();
            if !out.active {
                continue;
            }
            let want = grad_facility(&e, &out.s_pam).unwrap()
                - grad_oracle(&e, &y, &out.oracle_medoids).unwrap();
            assert_eq!(out.grad_embeddings, want);
        }
    }
}
