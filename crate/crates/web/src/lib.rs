//! WebAssembly bindings for the browser demo.
//!
//! Three operations, each taking and returning JSON strings:
//! * [`inference`]: greedy, refined and (small batches) exhaustive medoids
//!   for clicked 2-D points, with the clustering loss and its gradient.
//! * [`Trainer`]: trains a 2-D embedding on synthetic classes step by step.
//! * [`nmi_table`]: NMI, margin and contingency table for two labelings.
//!
//! The `*_json` functions hold the logic and are callable natively; the
//! `#[wasm_bindgen]` wrappers only convert errors.

use std::collections::BTreeMap;

use facloc::data::{generate_gaussian, sample_batch, split_by_class, Dataset, SplitSpec};
use facloc::embedding::pairwise_distances;
use facloc::facility::oracle_score;
use facloc::inference::{brute_force_inference, greedy_inference, pam_refine, InferenceResult};
use facloc::loss::clustering_loss;
use facloc::metrics::{margin, nmi};
use facloc::model::{backward, forward};
use facloc::optim::{
    batch_loss, evaluate, init_params, rmsprop_step, GammaSchedule, LossKind, RmsState, TrainConfig,
};
use facloc::{EmbeddingBatch, Labels, MlpParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Exhaustive search is offered when there are at most this many subsets.
pub const EXACT_LIMIT: u64 = 50_000;

type Res<T> = std::result::Result<T, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

#[derive(Debug, Serialize)]
pub struct Stage {
    pub medoids: Vec<usize>,
    pub trace: Vec<f64>,
    pub objective: f64,
}

impl From<&InferenceResult> for Stage {
    fn from(r: &InferenceResult) -> Self {
        Self {
            medoids: r.medoids.as_slice().to_vec(),
            trace: r.trace.clone(),
            objective: r.objective,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct LossReport {
    pub value: f64,
    pub hinge: f64,
    /// d(loss)/d(point), one pair per point.
    pub gradient: Vec<[f64; 2]>,
}

#[derive(Debug, Serialize)]
pub struct InferenceReport {
    /// Dense class ids used internally, in input order.
    pub labels: Vec<usize>,
    pub greedy: Stage,
    pub refined: Stage,
    pub assignment: Vec<usize>,
    pub oracle_medoids: Vec<usize>,
    pub oracle: f64,
    pub margin: f64,
    pub exact: Option<Stage>,
    /// Absent when the batch has a single class or only singletons.
    pub loss: Option<LossReport>,
}

fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = acc.saturating_mul(n - i) / (i + 1);
    }
    acc
}

/// Maps arbitrary class ids to `0..C` in increasing id order.
fn dense(labels: &[usize]) -> Vec<usize> {
    let ids: BTreeMap<usize, usize> = labels
        .iter()
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, c)| (c, i))
        .collect();
    labels.iter().map(|c| ids[c]).collect()
}

pub fn inference_json(points: &str, labels: &str, gamma: f64, refine_iters: usize) -> Res<String> {
    let points: Vec<[f64; 2]> = serde_json::from_str(points).map_err(err)?;
    let raw: Vec<usize> = serde_json::from_str(labels).map_err(err)?;
    if points.len() != raw.len() {
        return Err(format!("{} points but {} labels", points.len(), raw.len()));
    }
    if points.is_empty() {
        return Err("no points".into());
    }
    let y = Labels::new(dense(&raw));
    let e = EmbeddingBatch::from_rows(&points.iter().map(|p| p.to_vec()).collect::<Vec<_>>())
        .map_err(err)?;
    let d = pairwise_distances(&e).map_err(err)?;
    let greedy = greedy_inference(&d, &y, gamma).map_err(err)?;
    let refined = pam_refine(&d, &y, &greedy.medoids, gamma, refine_iters.max(1)).map_err(err)?;
    let (oracle, oracle_medoids) = oracle_score(&d, &y).map_err(err)?;
    let c = y.num_classes() as u64;
    let exact = if binomial(points.len() as u64, c) <= EXACT_LIMIT {
        Some(Stage::from(
            &brute_force_inference(&d, &y, gamma).map_err(err)?,
        ))
    } else {
        None
    };
    let loss = clustering_loss(&e, &y, gamma, refine_iters.max(1))
        .ok()
        .map(|out| LossReport {
            value: out.value,
            hinge: out.hinge,
            gradient: out
                .grad_embeddings
                .rows()
                .into_iter()
                .map(|r| [r[0], r[1]])
                .collect(),
        });
    let report = InferenceReport {
        labels: y.as_slice().to_vec(),
        greedy: Stage::from(&greedy),
        refined: Stage::from(&refined),
        assignment: refined.assignment.as_slice().to_vec(),
        oracle_medoids: oracle_medoids.as_slice().to_vec(),
        oracle,
        margin: margin(&refined.assignment, &y).map_err(err)?,
        exact,
        loss,
    };
    serde_json::to_string(&report).map_err(err)
}

#[derive(Debug, Serialize)]
pub struct NmiReport {
    pub nmi: f64,
    pub margin: f64,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    /// `counts[r][c]` for the sorted distinct ids in `rows` and `cols`.
    pub counts: Vec<Vec<usize>>,
}

pub fn nmi_table_json(a: &str, b: &str) -> Res<String> {
    let a: Vec<usize> = serde_json::from_str(a).map_err(err)?;
    let b: Vec<usize> = serde_json::from_str(b).map_err(err)?;
    let (la, lb) = (Labels::new(a.clone()), Labels::new(b.clone()));
    let value = nmi(&la, &lb).map_err(err)?;
    let ids = |v: &[usize]| {
        let mut u = v.to_vec();
        u.sort_unstable();
        u.dedup();
        u
    };
    let (rows, cols) = (ids(&a), ids(&b));
    let mut counts = vec![vec![0; cols.len()]; rows.len()];
    for (x, y) in a.iter().zip(&b) {
        let r = rows.binary_search(x).expect("present");
        let c = cols.binary_search(y).expect("present");
        counts[r][c] += 1;
    }
    serde_json::to_string(&NmiReport {
        nmi: value,
        margin: margin(&la, &lb).map_err(err)?,
        rows,
        cols,
        counts,
    })
    .map_err(err)
}

#[derive(Debug, Serialize)]
pub struct Snapshot {
    pub iteration: usize,
    pub loss: Option<f64>,
    pub gamma: f64,
    pub nmi: f64,
    pub recall_at_1: f64,
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
    pub held_out: Vec<bool>,
}

/// Synthetic classes in 4-D embedded into 2-D by a small network.
pub struct TrainerState {
    config: TrainConfig,
    dataset: Dataset,
    split: SplitSpec,
    params: MlpParams,
    rms: RmsState,
    rng: ChaCha8Rng,
    schedule: GammaSchedule,
    iteration: usize,
    last_loss: Option<f64>,
}

pub const DEMO_CLASSES: usize = 8;
pub const DEMO_PER_CLASS: usize = 20;
pub const DEMO_DIM: usize = 4;

impl TrainerState {
    pub fn new(loss: &str, seed: u64, cluster_std: f64) -> Res<Self> {
        let loss: LossKind = loss.parse().map_err(err)?;
        let dataset = generate_gaussian(
            DEMO_CLASSES,
            DEMO_PER_CLASS,
            DEMO_DIM,
            1.0,
            cluster_std,
            seed,
        )
        .map_err(err)?;
        let config = TrainConfig {
            loss,
            batch_size: 20,
            class_ratio: 0.2,
            hidden: vec![16],
            embedding_dim: 2,
            learning_rate: 3e-3,
            seed,
            ..TrainConfig::default()
        };
        config.validate().map_err(err)?;
        let split = split_by_class(&dataset, config.split_fraction, seed).map_err(err)?;
        let params = init_params(&config, DEMO_DIM).map_err(err)?;
        let train_examples = split.train_classes.len() * DEMO_PER_CLASS;
        Ok(Self {
            schedule: config.schedule(train_examples),
            rms: RmsState::new(&params),
            rng: ChaCha8Rng::seed_from_u64(seed),
            config,
            dataset,
            split,
            params,
            iteration: 0,
            last_loss: None,
        })
    }

    pub fn step(&mut self, n: usize) -> Res<()> {
        for _ in 0..n {
            let gamma = self.schedule.at(self.iteration);
            let (x, y) = sample_batch(
                &self.dataset,
                &self.split.train_classes,
                self.config.batch_size,
                self.config.class_ratio,
                &mut self.rng,
            )
            .map_err(err)?;
            let (e, cache) = forward(&self.params, &x).map_err(err)?;
            let (loss, grad) = batch_loss(&self.config, &e, &y, gamma).map_err(err)?;
            let grads = backward(&self.params, &cache, &grad).map_err(err)?;
            rmsprop_step(
                &mut self.params,
                &grads,
                &mut self.rms,
                self.config.learning_rate,
                self.config.rms_decay,
                self.config.rms_eps,
            )
            .map_err(err)?;
            self.iteration += 1;
            self.last_loss = Some(loss);
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Res<Snapshot> {
        let (x_test, y_test) = self.dataset.subset(&self.split.test_classes);
        let metrics = evaluate(
            &self.params,
            &x_test,
            &y_test,
            &[1],
            self.config.refine_iters,
        )
        .map_err(err)?;
        let (e, _) = forward(&self.params, self.dataset.features()).map_err(err)?;
        Ok(Snapshot {
            iteration: self.iteration,
            loss: self.last_loss,
            gamma: self.schedule.at(self.iteration),
            nmi: metrics.nmi,
            recall_at_1: metrics.recall_at[&1],
            points: e.data().rows().into_iter().map(|r| [r[0], r[1]]).collect(),
            labels: self.dataset.labels().to_vec(),
            held_out: self
                .dataset
                .labels()
                .iter()
                .map(|c| self.split.test_classes.contains(c))
                .collect(),
        })
    }

    pub fn snapshot_json(&self) -> Res<String> {
        serde_json::to_string(&self.snapshot()?).map_err(err)
    }
}

fn js(r: Res<String>) -> std::result::Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

/// Inference report for points `[[x, y], ...]` with class ids `[c, ...]`.
#[wasm_bindgen]
pub fn inference(
    points: &str,
    labels: &str,
    gamma: f64,
    refine_iters: usize,
) -> std::result::Result<String, JsValue> {
    js(inference_json(points, labels, gamma, refine_iters))
}

/// NMI report for two label arrays.
#[wasm_bindgen]
pub fn nmi_table(a: &str, b: &str) -> std::result::Result<String, JsValue> {
    js(nmi_table_json(a, b))
}

#[wasm_bindgen]
pub struct Trainer {
    state: TrainerState,
}

#[wasm_bindgen]
impl Trainer {
    #[wasm_bindgen(constructor)]
    pub fn new(loss: &str, seed: u32, cluster_std: f64) -> std::result::Result<Trainer, JsValue> {
        TrainerState::new(loss, seed.into(), cluster_std)
            .map(|state| Trainer { state })
            .map_err(|e| JsValue::from_str(&e))
    }

    /// Runs `n` iterations and returns a snapshot.
    pub fn step(&mut self, n: u32) -> std::result::Result<String, JsValue> {
        js(self
            .state
            .step(n as usize)
            .and_then(|_| self.state.snapshot_json()))
    }

    pub fn snapshot(&self) -> std::result::Result<String, JsValue> {
        js(self.state.snapshot_json())
    }
}
