//! RMSprop, the staircase decay of the margin multiplier and the training
//! loop (sample batch, embed, loss, backprop, update, evaluate).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::baselines::{lifted_struct_loss, npairs_loss, triplet_semihard_loss};
use crate::data::{sample_batch, split_by_class, Dataset, SplitSpec};
use crate::embedding::pairwise_distances;
use crate::facility::Labels;
use crate::inference::{greedy_then_refine, DEFAULT_REFINE_ITERS};
use crate::loss::clustering_loss;
use crate::metrics::{nmi, recall_at_ks};
use crate::model::{backward, forward, Layer, MlpGrads, MlpParams};
use crate::{Error, Result};

/// Running mean of squared gradients, one entry per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsState {
    pub mean_square: MlpGrads,
    pub step: u64,
}

impl RmsState {
    pub fn new(params: &MlpParams) -> Self {
        Self {
            mean_square: params.zeros_like(),
            step: 0,
        }
    }
}

fn update_slice(p: &mut [f64], g: &[f64], ms: &mut [f64], lr: f64, rho: f64, eps: f64) {
    for ((p, &g), ms) in p.iter_mut().zip(g).zip(ms.iter_mut()) {
        *ms = rho * *ms + (1.0 - rho) * g * g;
        if g != 0.0 {
            *p -= lr * g / (*ms + eps).sqrt();
        }
    }
}

/// One RMSprop update, in place:
/// `ms = rho ms + (1 - rho) g^2; p -= lr g / sqrt(ms + eps)`.
pub fn rmsprop_step(
    params: &mut MlpParams,
    grads: &MlpGrads,
    state: &mut RmsState,
    lr: f64,
    rho: f64,
    eps: f64,
) -> Result<()> {
    let same_shape = |a: &[Layer], b: &[Layer]| {
        a.len() == b.len()
            && a.iter().zip(b).all(|(x, y)| {
                x.weight.raw_dim() == y.weight.raw_dim() && x.bias.len() == y.bias.len()
            })
    };
    if !same_shape(&params.layers, &grads.layers)
        || !same_shape(&params.layers, &state.mean_square.layers)
    {
        return Err(Error::InvalidInput(
            "parameter, gradient and state shapes differ".into(),
        ));
    }
    for ((p, g), ms) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(state.mean_square.layers.iter_mut())
    {
        // arrays built by this crate are in standard layout
        update_slice(
            p.weight.as_slice_mut().expect("contiguous"),
            g.weight.as_slice().expect("contiguous"),
            ms.weight.as_slice_mut().expect("contiguous"),
            lr,
            rho,
            eps,
        );
        update_slice(
            p.bias.as_slice_mut().expect("contiguous"),
            g.bias.as_slice().expect("contiguous"),
            ms.bias.as_slice_mut().expect("contiguous"),
            lr,
            rho,
            eps,
        );
    }
    state.step += 1;
    Ok(())
}

/// `gamma0 * rate^floor(iteration / interval)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaSchedule {
    pub gamma0: f64,
    pub rate: f64,
    pub interval: usize,
}

impl GammaSchedule {
    pub fn at(&self, iteration: usize) -> f64 {
        let steps = (iteration / self.interval.max(1)) as i32;
        self.gamma0 * self.rate.powi(steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Cluster,
    Triplet,
    Lifted,
    Npairs,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Cluster,
        LossKind::Triplet,
        LossKind::Lifted,
        LossKind::Npairs,
    ];

    /// Cluster and triplet losses see unit-norm embeddings; lifted and
    /// N-pairs see the raw network output.
    pub fn normalizes(self) -> bool {
        matches!(self, LossKind::Cluster | LossKind::Triplet)
    }

    pub fn default_alpha(self) -> f64 {
        match self {
            LossKind::Lifted => 1.0,
            _ => 0.2,
        }
    }

    /// Row label used in comparison tables.
    pub fn display_name(self) -> &'static str {
        match self {
            LossKind::Cluster => "Clustering",
            LossKind::Triplet => "Triplet semihard",
            LossKind::Lifted => "Lifted struct",
            LossKind::Npairs => "Npairs",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Cluster => "cluster",
            LossKind::Triplet => "triplet",
            LossKind::Lifted => "lifted",
            LossKind::Npairs => "npairs",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cluster" => Ok(LossKind::Cluster),
            "triplet" => Ok(LossKind::Triplet),
            "lifted" => Ok(LossKind::Lifted),
            "npairs" => Ok(LossKind::Npairs),
            other => Err(Error::InvalidInput(format!("unknown loss {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub batch_size: usize,
    pub class_ratio: f64,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub learning_rate: f64,
    pub rms_decay: f64,
    pub rms_eps: f64,
    pub gamma0: f64,
    pub gamma_decay_rate: f64,
    /// Iterations per decay step; `None` means one pass over the training
    /// examples.
    pub gamma_decay_interval: Option<usize>,
    pub refine_iters: usize,
    /// Margin for triplet / lifted; `None` picks the per-loss default.
    pub alpha: Option<f64>,
    pub lambda: f64,
    pub max_iterations: usize,
    /// Evaluate every this many iterations (and always at the last one);
    /// 0 evaluates only at the end.
    pub eval_interval: usize,
    pub eval_ks: Vec<usize>,
    pub split_fraction: f64,
    pub seed: u64,
    /// Worker threads for inference scans; `None` uses the global pool.
    pub threads: Option<usize>,
    pub record_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Cluster,
            batch_size: 128,
            class_ratio: 0.25,
            hidden: vec![32, 32],
            embedding_dim: 16,
            learning_rate: 1e-3,
            rms_decay: 0.9,
            rms_eps: 1e-8,
            gamma0: 1.0,
            gamma_decay_rate: 0.94,
            gamma_decay_interval: None,
            refine_iters: DEFAULT_REFINE_ITERS,
            alpha: None,
            lambda: 0.002,
            max_iterations: 1000,
            eval_interval: 100,
            eval_ks: vec![1, 2, 4, 8],
            split_fraction: 0.5,
            seed: 0,
            threads: None,
            record_wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return bad(format!("learning rate {} must be >= 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.rms_decay) {
            return bad(format!("rms decay {} not in [0, 1)", self.rms_decay));
        }
        if self.rms_eps.is_nan() || self.rms_eps < 0.0 {
            return bad(format!("rms eps {} must be >= 0", self.rms_eps));
        }
        if self.gamma0 < 0.0 || !self.gamma0.is_finite() {
            return bad(format!("gamma0 {} must be >= 0", self.gamma0));
        }
        if !(self.gamma_decay_rate > 0.0 && self.gamma_decay_rate <= 1.0) {
            return bad(format!(
                "gamma decay rate {} not in (0, 1]",
                self.gamma_decay_rate
            ));
        }
        if self.gamma_decay_interval == Some(0) {
            return bad("gamma decay interval must be positive".into());
        }
        if !(self.class_ratio > 0.0 && self.class_ratio <= 1.0) {
            return bad(format!("class ratio {} not in (0, 1]", self.class_ratio));
        }
        if self.class_ratio * (self.batch_size as f64) < 2.0 {
            return bad(format!(
                "class ratio {} times batch size {} must be at least 2",
                self.class_ratio, self.batch_size
            ));
        }
        if self.refine_iters == 0 || self.embedding_dim == 0 || self.hidden.contains(&0) {
            return bad("refine iterations and layer widths must be positive".into());
        }
        if self.alpha.is_some_and(|a| a.is_nan() || a <= 0.0)
            || self.lambda.is_nan()
            || self.lambda < 0.0
        {
            return bad("alpha must be positive and lambda nonnegative".into());
        }
        if self.eval_ks.contains(&0) {
            return bad("recall K values must be positive".into());
        }
        if self.threads == Some(0) {
            return bad("thread count must be positive".into());
        }
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or_else(|| self.loss.default_alpha())
    }

    /// Layer widths, input first.
    pub fn dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden);
        dims.push(self.embedding_dim);
        dims
    }

    pub fn schedule(&self, train_examples: usize) -> GammaSchedule {
        let epoch = train_examples.div_ceil(self.batch_size.max(1)).max(1);
        GammaSchedule {
            gamma0: self.gamma0,
            rate: self.gamma_decay_rate,
            interval: self.gamma_decay_interval.unwrap_or(epoch),
        }
    }

    /// Every setting as `key = value` pairs, in a fixed order.
    pub fn key_values(&self) -> Vec<(&'static str, String)> {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("loss", self.loss.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("class_ratio", format!("{:?}", self.class_ratio)),
            ("hidden", list(&self.hidden)),
            ("embedding_dim", self.embedding_dim.to_string()),
            ("learning_rate", format!("{:?}", self.learning_rate)),
            ("rms_decay", format!("{:?}", self.rms_decay)),
            ("rms_eps", format!("{:?}", self.rms_eps)),
            ("gamma0", format!("{:?}", self.gamma0)),
            ("gamma_decay_rate", format!("{:?}", self.gamma_decay_rate)),
            (
                "gamma_decay_interval",
                self.gamma_decay_interval
                    .map_or("epoch".into(), |v| v.to_string()),
            ),
            ("refine_iters", self.refine_iters.to_string()),
            ("alpha", format!("{:?}", self.alpha())),
            ("lambda", format!("{:?}", self.lambda)),
            ("max_iterations", self.max_iterations.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
            ("eval_ks", list(&self.eval_ks)),
            ("split_fraction", format!("{:?}", self.split_fraction)),
            ("seed", self.seed.to_string()),
            (
                "threads",
                self.threads.map_or("default".into(), |v| v.to_string()),
            ),
            ("record_wall_clock", self.record_wall_clock.to_string()),
        ]
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub loss: f64,
    pub gamma: f64,
    pub nmi: Option<f64>,
    pub recall_at: Option<BTreeMap<usize, f64>>,
    pub elapsed_ms: Option<f64>,
}

impl TrainRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Held-out clustering and retrieval quality.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub nmi: f64,
    pub recall_at: BTreeMap<usize, f64>,
}

/// Embeds `x`, clusters it with margin-free inference (`C` = number of
/// classes in `y`) and scores NMI against `y`, plus Recall@K for each `K`
/// that is smaller than the number of points.
pub fn evaluate(
    params: &MlpParams,
    x: &Array2<f64>,
    y: &Labels,
    ks: &[usize],
    refine_iters: usize,
) -> Result<EvalMetrics> {
    let (e, _) = forward(params, x)?;
    let d = pairwise_distances(&e)?;
    let clustering = greedy_then_refine(&d, y, 0.0, refine_iters.max(1))?;
    let nmi = nmi(&clustering.assignment, y)?;
    let usable: Vec<usize> = ks.iter().copied().filter(|&k| k < e.len()).collect();
    let recalls = recall_at_ks(&e, y, &usable)?;
    Ok(EvalMetrics {
        nmi,
        recall_at: usable.into_iter().zip(recalls).collect(),
    })
}

/// Independent seed for a named purpose, derived from the run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

const STREAM_INIT: u64 = 1;
const STREAM_SAMPLER: u64 = 2;

/// Training result.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub initial: MlpParams,
    pub params: MlpParams,
    pub records: Vec<TrainRecord>,
    pub split: SplitSpec,
}

/// Deterministic split for a config (class-disjoint, seeded by `config.seed`).
pub fn split_for(config: &TrainConfig, dataset: &Dataset) -> Result<SplitSpec> {
    split_by_class(dataset, config.split_fraction, config.seed)
}

/// Initial network for a config.
pub fn init_params(config: &TrainConfig, input_dim: usize) -> Result<MlpParams> {
    MlpParams::init(
        &config.dims(input_dim),
        config.loss.normalizes(),
        derive_seed(config.seed, STREAM_INIT),
    )
}

/// Batch loss and d(loss)/d(embeddings) for the configured loss.
pub fn batch_loss(
    config: &TrainConfig,
    e: &crate::EmbeddingBatch,
    y: &Labels,
    gamma: f64,
) -> Result<(f64, Array2<f64>)> {
    match config.loss {
        LossKind::Cluster => {
            let out = clustering_loss(e, y, gamma, config.refine_iters)?;
            Ok((out.value, out.grad_embeddings))
        }
        LossKind::Triplet => triplet_semihard_loss(e, y, config.alpha()),
        LossKind::Lifted => lifted_struct_loss(e, y, config.alpha()),
        LossKind::Npairs => npairs_loss(e, y, config.lambda),
    }
}

pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    train_with(config, dataset, |_| Ok(()))
}

/// Runs the training loop, handing every record to `on_record` as soon as it
/// is produced.
pub fn train_with<F>(config: &TrainConfig, dataset: &Dataset, on_record: F) -> Result<TrainOutcome>
where
    F: FnMut(&TrainRecord) -> Result<()> + Send,
{
    config.validate()?;
    #[cfg(feature = "parallel")]
    if let Some(n) = config.threads {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        return pool.install(|| train_inner(config, dataset, on_record));
    }
    train_inner(config, dataset, on_record)
}

fn train_inner<F>(config: &TrainConfig, dataset: &Dataset, mut on_record: F) -> Result<TrainOutcome>
where
    F: FnMut(&TrainRecord) -> Result<()>,
{
    if dataset.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let split = split_for(config, dataset)?;
    let initial = init_params(config, dataset.input_dim())?;
    let mut params = initial.clone();
    let mut records = Vec::new();
    if config.max_iterations == 0 {
        return Ok(TrainOutcome {
            initial,
            params,
            records,
            split,
        });
    }

    let train_examples: usize = split
        .train_classes
        .iter()
        .map(|&c| dataset.members(c).len())
        .sum();
    let schedule = config.schedule(train_examples);
    let (test_x, test_y) = dataset.subset(&split.test_classes);
    let mut state = RmsState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(STREAM_SAMPLER);
    let clock = config.record_wall_clock.then(std::time::Instant::now);

    for t in 0..config.max_iterations {
        let iteration = t + 1;
        let gamma = schedule.at(t);
        let (x, y) = sample_batch(
            dataset,
            &split.train_classes,
            config.batch_size,
            config.class_ratio,
            &mut rng,
        )?;
        let (e, cache) = forward(&params, &x)?;
        let (loss, grad) = batch_loss(config, &e, &y, gamma)?;
        if !loss.is_finite() {
            return Err(Error::InvalidInput(format!(
                "non-finite loss at iteration {iteration}"
            )));
        }
        let grads = backward(&params, &cache, &grad)?;
        rmsprop_step(
            &mut params,
            &grads,
            &mut state,
            config.learning_rate,
            config.rms_decay,
            config.rms_eps,
        )?;

        let eval_now = iteration == config.max_iterations
            || (config.eval_interval > 0 && iteration % config.eval_interval == 0);
        let metrics = if eval_now {
            Some(evaluate(
                &params,
                &test_x,
                &test_y,
                &config.eval_ks,
                config.refine_iters,
            )?)
        } else {
            None
        };
        let record = TrainRecord {
            iteration,
            loss,
            gamma,
            nmi: metrics.as_ref().map(|m| m.nmi),
            recall_at: metrics.map(|m| m.recall_at),
            elapsed_ms: clock.map(|c| c.elapsed().as_secs_f64() * 1e3),
        };
        on_record(&record)?;
        records.push(record);
    }
    Ok(TrainOutcome {
        initial,
        params,
        records,
        split,
    })
}
