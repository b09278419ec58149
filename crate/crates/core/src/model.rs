//! A small fully connected embedding network with hand-written backprop.
//!
//! Hidden layers are `affine -> ReLU`; the last layer is affine, optionally
//! followed by row-wise l2 normalization.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::{l2_normalize_backward, l2_normalize_rows, EmbeddingBatch};
use crate::{Error, Result};

const CHECKPOINT_HEADER: &str = "mlp-checkpoint v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `d_out x d_in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn d_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub final_normalize: bool,
}

/// Gradients with the same shapes as [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Layer>,
}

/// Activations retained by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to every layer (`inputs[0]` is the batch itself).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of every layer; the last one is the raw output.
    pre: Vec<Array2<f64>>,
}

impl MlpParams {
    /// Uniform `[-a, a]` init with `a = sqrt(6 / (d_in + d_out))`, zero biases.
    /// `dims` lists every width, input first.
    pub fn init(dims: &[usize], final_normalize: bool, seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidInput(format!("bad layer widths {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (d_in, d_out) = (w[0], w[1]);
                let a = (6.0 / (d_in + d_out) as f64).sqrt();
                Layer {
                    weight: Array2::from_shape_fn((d_out, d_in), |_| rng.random_range(-a..=a)),
                    bias: Array1::zeros(d_out),
                }
            })
            .collect();
        Ok(Self {
            layers,
            final_normalize,
        })
    }

    /// Builds params from explicit layers, checking that widths chain.
    pub fn from_layers(layers: Vec<Layer>, final_normalize: bool) -> Result<Self> {
        let p = Self {
            layers,
            final_normalize,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidInput("network has no layers".into()));
        }
        for (n, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.d_out() {
                return Err(Error::InvalidInput(format!(
                    "layer {n}: bias/weight mismatch"
                )));
            }
            if n > 0 && self.layers[n - 1].d_out() != l.d_in() {
                return Err(Error::InvalidInput(format!(
                    "layer {n}: width does not chain"
                )));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "layer {n}: non-finite parameter"
                )));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::d_out)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn zeros_like(&self) -> MlpGrads {
        MlpGrads {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    /// Serializes in the text checkpoint format. Values use the shortest
    /// representation that parses back to the same `f64`.
    pub fn to_checkpoint(&self) -> String {
        let mut s = String::new();
        s.push_str(CHECKPOINT_HEADER);
        s.push('\n');
        for l in &self.layers {
            writeln!(s, "layer {} {}", l.d_out(), l.d_in()).unwrap();
            for (row, b) in l.weight.rows().into_iter().zip(l.bias.iter()) {
                let mut first = true;
                for v in row.iter().chain(std::iter::once(b)) {
                    if !first {
                        s.push(' ');
                    }
                    first = false;
                    write!(s, "{v:?}").unwrap();
                }
                s.push('\n');
            }
        }
        writeln!(s, "normalize {}", u8::from(self.final_normalize)).unwrap();
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(n, l)| (n + 1, l));
        let perr = |line: usize, msg: String| Error::Parse { line, msg };
        match lines.next() {
            Some((_, h)) if h.trim_end() == CHECKPOINT_HEADER => {}
            Some((n, h)) => {
                return Err(perr(
                    n,
                    format!("expected header {CHECKPOINT_HEADER:?}, found {h:?}"),
                ))
            }
            None => return Err(perr(1, "empty checkpoint".into())),
        }
        let mut layers = Vec::new();
        loop {
            let (n, line) = lines
                .next()
                .ok_or_else(|| perr(0, "unexpected end of checkpoint".into()))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                ["layer", d_out, d_in] => {
                    let parse = |s: &str| {
                        s.parse::<usize>()
                            .map_err(|e| perr(n, format!("bad layer size {s:?}: {e}")))
                    };
                    let (d_out, d_in) = (parse(d_out)?, parse(d_in)?);
                    let mut weight = Array2::zeros((d_out, d_in));
                    let mut bias = Array1::zeros(d_out);
                    for r in 0..d_out {
                        let (n, row) = lines
                            .next()
                            .ok_or_else(|| perr(n, "layer is missing rows".into()))?;
                        let vals: Vec<&str> = row.split_whitespace().collect();
                        if vals.len() != d_in + 1 {
                            return Err(perr(
                                n,
                                format!("expected {} values, found {}", d_in + 1, vals.len()),
                            ));
                        }
                        for (c, v) in vals.iter().enumerate() {
                            let x: f64 = v
                                .parse()
                                .map_err(|e| perr(n, format!("bad number {v:?}: {e}")))?;
                            if c < d_in {
                                weight[[r, c]] = x;
                            } else {
                                bias[r] = x;
                            }
                        }
                    }
                    layers.push(Layer { weight, bias });
                }
                ["normalize", flag] => {
                    let final_normalize = match *flag {
                        "0" => false,
                        "1" => true,
                        other => return Err(perr(n, format!("bad normalize flag {other:?}"))),
                    };
                    if let Some((n, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
                        return Err(perr(n, format!("trailing content {extra:?}")));
                    }
                    return Self::from_layers(layers, final_normalize);
                }
                _ => return Err(perr(n, format!("unexpected line {line:?}"))),
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&std::fs::read_to_string(path)?)
    }
}

impl MlpGrads {
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }
}

/// Embeds a batch `x` (`m x d_in`).
pub fn forward(params: &MlpParams, x: &Array2<f64>) -> Result<(EmbeddingBatch, ForwardCache)> {
    if x.ncols() != params.input_dim() {
        return Err(Error::InvalidInput(format!(
            "input width {} does not match network input {}",
            x.ncols(),
            params.input_dim()
        )));
    }
    let last = params.layers.len() - 1;
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut h = x.clone();
    for (n, l) in params.layers.iter().enumerate() {
        let z = h.dot(&l.weight.t()) + &l.bias;
        inputs.push(h);
        h = if n < last {
            z.mapv(|v| v.max(0.0))
        } else {
            z.clone()
        };
        pre.push(z);
    }
    let raw = EmbeddingBatch::new(h)?;
    let out = if params.final_normalize {
        l2_normalize_rows(&raw)?
    } else {
        raw
    };
    Ok((out, ForwardCache { inputs, pre }))
}

/// Parameter gradients given `d_out` = d(loss)/d(embeddings).
pub fn backward(params: &MlpParams, cache: &ForwardCache, d_out: &Array2<f64>) -> Result<MlpGrads> {
    let nl = params.layers.len();
    if cache.pre.len() != nl || cache.inputs.len() != nl {
        return Err(Error::InvalidInput(
            "cache does not match network depth".into(),
        ));
    }
    let raw = &cache.pre[nl - 1];
    if d_out.raw_dim() != raw.raw_dim() {
        return Err(Error::InvalidInput(format!(
            "upstream gradient shape {:?} does not match output {:?}",
            d_out.shape(),
            raw.shape()
        )));
    }
    let mut dz = if params.final_normalize {
        let mut g = Array2::zeros(raw.raw_dim());
        for (i, mut row) in g.rows_mut().into_iter().enumerate() {
            let back = l2_normalize_backward(raw.row(i), d_out.row(i)).map_err(|e| match e {
                Error::DegenerateRow { norm, .. } => Error::DegenerateRow { row: i, norm },
                other => other,
            })?;
            row.assign(&back);
        }
        g
    } else {
        d_out.clone()
    };
    let mut grads = Vec::with_capacity(nl);
    for n in (0..nl).rev() {
        let l = &params.layers[n];
        let input = &cache.inputs[n];
        if input.ncols() != l.d_in() || cache.pre[n].ncols() != l.d_out() {
            return Err(Error::InvalidInput(format!(
                "cache shape mismatch at layer {n}"
            )));
        }
        let weight = dz.t().dot(input);
        let bias = dz.sum_axis(Axis(0));
        if n > 0 {
            let mut dh = dz.dot(&l.weight);
            dh.zip_mut_with(&cache.pre[n - 1], |g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
            dz = dh;
        }
        grads.push(Layer { weight, bias });
    }
    grads.reverse();
    Ok(MlpGrads { layers: grads })
}
