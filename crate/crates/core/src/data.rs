//! Datasets: synthetic Gaussian classes, CSV I/O, class-disjoint splits and
//! the class-ratio batch sampler.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::facility::Labels;
use crate::loss::check_batch;
use crate::{Error, Result};

/// How many times [`sample_batch`] redraws before giving up.
pub const SAMPLER_RETRIES: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    class_index: BTreeMap<usize, Vec<usize>>,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature".into()));
        }
        let mut class_index: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &c) in labels.iter().enumerate() {
            class_index.entry(c).or_default().push(i);
        }
        Ok(Self {
            features,
            labels,
            class_index,
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Class ids present, ascending.
    pub fn classes(&self) -> Vec<usize> {
        self.class_index.keys().copied().collect()
    }

    pub fn members(&self, class: usize) -> &[usize] {
        self.class_index.get(&class).map_or(&[], Vec::as_slice)
    }

    /// Rows of the given classes, in dataset order, with labels remapped to
    /// `0..classes.len()` in the order the classes are listed.
    pub fn subset(&self, classes: &[usize]) -> (Array2<f64>, Labels) {
        let pos: BTreeMap<usize, usize> =
            classes.iter().enumerate().map(|(p, &c)| (c, p)).collect();
        let rows: Vec<usize> = (0..self.len())
            .filter(|&i| pos.contains_key(&self.labels[i]))
            .collect();
        let x = self.features.select(ndarray::Axis(0), &rows);
        let y = rows
            .iter()
            .map(|&i| pos[&self.labels[i]])
            .collect::<Vec<_>>();
        (x, y.into())
    }

    /// Writes `label,f0,...,f{D-1}` CSV with shortest round-trip decimals.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label");
        for k in 0..self.input_dim() {
            write!(s, ",f{k}").unwrap();
        }
        s.push('\n');
        for (row, &c) in self.features.rows().into_iter().zip(&self.labels) {
            write!(s, "{c}").unwrap();
            for v in row {
                write!(s, ",{v:?}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse { line, msg };
        let mut lines = text.lines().enumerate().map(|(n, l)| (n + 1, l));
        let (_, header) = lines
            .next()
            .ok_or_else(|| perr(1, "missing header".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.first() != Some(&"label") {
            return Err(perr(
                1,
                format!("header must start with \"label\", found {header:?}"),
            ));
        }
        for (k, c) in cols[1..].iter().enumerate() {
            if *c != format!("f{k}") {
                return Err(perr(1, format!("expected column f{k}, found {c:?}")));
            }
        }
        let dim = cols.len() - 1;
        let mut flat = Vec::new();
        let mut labels = Vec::new();
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 1 {
                return Err(perr(
                    n,
                    format!("expected {} fields, found {}", dim + 1, fields.len()),
                ));
            }
            labels.push(
                fields[0]
                    .parse::<usize>()
                    .map_err(|e| perr(n, format!("bad label {:?}: {e}", fields[0])))?,
            );
            for f in &fields[1..] {
                let v: f64 = f
                    .parse()
                    .map_err(|e| perr(n, format!("bad feature {f:?}: {e}")))?;
                if !v.is_finite() {
                    return Err(perr(n, format!("non-finite feature {f:?}")));
                }
                flat.push(v);
            }
        }
        let features = Array2::from_shape_vec((labels.len(), dim), flat)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        Self::new(features, labels)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Isotropic Gaussian classes: centers uniform in `[-center_scale, center_scale]^dim`,
/// points `center + N(0, cluster_std^2 I)`. Rows are grouped by class.
pub fn generate_gaussian(
    num_classes: usize,
    points_per_class: usize,
    input_dim: usize,
    center_scale: f64,
    cluster_std: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || points_per_class == 0 || input_dim == 0 {
        return Err(Error::InvalidInput(
            "class count, size and dimension must be positive".into(),
        ));
    }
    if !(center_scale.is_finite()
        && center_scale >= 0.0
        && cluster_std.is_finite()
        && cluster_std >= 0.0)
    {
        return Err(Error::InvalidInput(
            "scales must be finite and nonnegative".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cluster_std).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let n = num_classes * points_per_class;
    let mut features = Array2::zeros((n, input_dim));
    let mut labels = Vec::with_capacity(n);
    for c in 0..num_classes {
        let center: Vec<f64> = (0..input_dim)
            .map(|_| {
                if center_scale > 0.0 {
                    rng.random_range(-center_scale..=center_scale)
                } else {
                    0.0
                }
            })
            .collect();
        for p in 0..points_per_class {
            let row = c * points_per_class + p;
            for (k, &mu) in center.iter().enumerate() {
                features[[row, k]] = mu + noise.sample(&mut rng);
            }
            labels.push(c);
        }
    }
    Dataset::new(features, labels)
}

/// Disjoint train / test class sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub train_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
}

/// Shuffles the class ids with `seed` and sends the first
/// `ceil(fraction * C)` to training (clamped so both sides are nonempty).
pub fn split_by_class(dataset: &Dataset, fraction: f64, seed: u64) -> Result<SplitSpec> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "split fraction {fraction} not in (0, 1)"
        )));
    }
    let mut classes = dataset.classes();
    if classes.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 classes to split, found {}",
            classes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    classes.shuffle(&mut rng);
    let n_train = ((fraction * classes.len() as f64).ceil() as usize).clamp(1, classes.len() - 1);
    let test_classes = classes.split_off(n_train);
    Ok(SplitSpec {
        train_classes: classes,
        test_classes,
    })
}

/// Number of distinct classes in a batch of `m` at the given class ratio.
pub fn classes_per_batch(m: usize, class_ratio: f64) -> usize {
    (class_ratio * m as f64).round() as usize
}

/// Draws `round(class_ratio * m)` distinct training classes, then `m` rows
/// spread over them as evenly as possible (the leftover rows go to randomly
/// chosen classes). Labels are remapped to `0..C_b`. Rows within a class are
/// drawn without replacement while the class has enough members.
pub fn sample_batch<R: Rng>(
    dataset: &Dataset,
    train_classes: &[usize],
    m: usize,
    class_ratio: f64,
    rng: &mut R,
) -> Result<(Array2<f64>, Labels)> {
    if !(class_ratio > 0.0 && class_ratio <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "class ratio {class_ratio} not in (0, 1]"
        )));
    }
    let cb = classes_per_batch(m, class_ratio);
    if cb < 2 || cb >= m {
        return Err(Error::InvalidInput(format!(
            "batch of {m} with ratio {class_ratio} has {cb} classes; need 2 <= classes < batch size"
        )));
    }
    let available: Vec<usize> = train_classes
        .iter()
        .copied()
        .filter(|&c| !dataset.members(c).is_empty())
        .collect();
    if available.len() < cb {
        return Err(Error::InvalidInput(format!(
            "batch needs {cb} classes but only {} training classes exist",
            available.len()
        )));
    }
    for _ in 0..SAMPLER_RETRIES {
        let chosen: Vec<usize> = available.choose_multiple(rng, cb).copied().collect();
        let mut counts = vec![m / cb; cb];
        let mut order: Vec<usize> = (0..cb).collect();
        order.shuffle(rng);
        for &k in order.iter().take(m % cb) {
            counts[k] += 1;
        }
        let mut rows = Vec::with_capacity(m);
        for (k, (&c, &n)) in chosen.iter().zip(&counts).enumerate() {
            let members = dataset.members(c);
            let mut pool: Vec<usize> = members.to_vec();
            pool.shuffle(rng);
            for t in 0..n {
                if t > 0 && t % pool.len() == 0 {
                    pool.shuffle(rng);
                }
                rows.push((pool[t % pool.len()], k));
            }
        }
        rows.shuffle(rng);
        let labels: Labels = rows.iter().map(|r| r.1).collect::<Vec<_>>().into();
        if check_batch(&labels).is_err() {
            continue;
        }
        let idx: Vec<usize> = rows.iter().map(|r| r.0).collect();
        return Ok((dataset.features.select(ndarray::Axis(0), &idx), labels));
    }
    Err(Error::Sampler {
        attempts: SAMPLER_RETRIES,
    })
}
