//! The parameterized models: 2-layer GCNs for both the classifier and the
//! cluster head, plus the Adam optimizer and the parameter checkpoint
//! format.
//!
//! Forward pass: `h = relu(Â·X·W1 + b1)`, `probs = softmax(Â·h·W2 + b2)`
//! row-wise, where `Â` is the self-loop-normalized adjacency. The feature
//! matrix multiplies as a constant CSR operand so bag-of-words inputs
//! don't pay dense-gemm cost.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Value};
use crate::error::{Error, Result};
use crate::graphstore::NormalizedOperator;
use crate::linalg::{seeded_stream, Csr};

const CKPT_MAGIC: &[u8; 8] = b"SRNCCKPT";

/// Architecture and optimizer hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers: usize,
    pub dropout_rate: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 256,
            layers: 2,
            dropout_rate: 0.0,
            learning_rate: 0.01,
            weight_decay: 5e-4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers != 2 {
            return Err(Error::config(format!(
                "only 2-layer GCNs are supported, got {}",
                self.layers
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate must be in [0, 1)".to_string()));
        }
        if self.hidden == 0 || self.learning_rate <= 0.0 {
            return Err(Error::config("hidden and learning_rate must be positive".to_string()));
        }
        Ok(())
    }
}

/// Weights of one 2-layer GCN.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

impl GcnParams {
    pub fn in_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w2.ncols()
    }

    fn tensors(&self) -> [(&'static str, &Array2<f64>); 4] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Array2<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Glorot-uniform weights (bound `sqrt(6/(fan_in+fan_out))`), zero
/// biases; bitwise deterministic under the config seed.
pub fn init_params(cfg: &ModelConfig, in_dim: usize, out_dim: usize) -> Result<GcnParams> {
    let mut rng = seeded_stream(cfg.seed, 0);
    init_params_with_rng(cfg, in_dim, out_dim, &mut rng)
}

/// As [`init_params`] but drawing from a caller-owned stream, so several
/// models can share one master seed without sharing randomness.
pub fn init_params_with_rng(
    cfg: &ModelConfig,
    in_dim: usize,
    out_dim: usize,
    rng: &mut impl Rng,
) -> Result<GcnParams> {
    cfg.validate()?;
    if in_dim == 0 || out_dim == 0 {
        return Err(Error::config("zero model dimension".to_string()));
    }
    let h = cfg.hidden;
    let glorot = |rng: &mut dyn rand::RngCore, rows: usize, cols: usize| {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let mut m = Array2::zeros((rows, cols));
        for v in m.iter_mut() {
            *v = rng.random_range(-bound..bound);
        }
        m
    };
    Ok(GcnParams {
        w1: glorot(rng, in_dim, h),
        b1: Array2::zeros((1, h)),
        w2: glorot(rng, h, out_dim),
        b2: Array2::zeros((1, out_dim)),
    })
}

/// Tape handles of one model's parameters.
#[derive(Debug, Clone, Copy)]
pub struct GcnValues {
    pub w1: Value,
    pub b1: Value,
    pub w2: Value,
    pub b2: Value,
}

/// Puts parameters on a tape, as differentiable leaves or constants.
pub fn params_on_tape(tape: &mut Tape, params: &GcnParams, trainable: bool) -> GcnValues {
    let mut put = |m: &Array2<f64>| {
        if trainable {
            tape.leaf(m.clone())
        } else {
            tape.constant(m.clone())
        }
    };
    GcnValues {
        w1: put(&params.w1),
        b1: put(&params.b1),
        w2: put(&params.w2),
        b2: put(&params.b2),
    }
}

/// Optional inverted-dropout mask source for the hidden layer.
pub struct Dropout<'a, R: Rng> {
    pub rate: f64,
    pub rng: &'a mut R,
}

/// Two GCN layers over a normalized operator and a constant feature
/// matrix. Returns the hidden representation (for export) and the
/// row-stochastic class probabilities.
pub fn gcn_forward<R: Rng>(
    tape: &mut Tape,
    params: &GcnValues,
    op: &NormalizedOperator,
    features: &Arc<Csr>,
    dropout: Option<Dropout<'_, R>>,
) -> Result<(Value, Value)> {
    let xw = tape.spmm(Arc::clone(features), params.w1)?;
    let axw = tape.spmm(Arc::clone(op.matrix()), xw)?;
    let pre = tape.add_bias(axw, params.b1)?;
    let mut hidden = tape.relu(pre);
    if let Some(Dropout { rate, rng }) = dropout {
        if rate > 0.0 {
            let keep = 1.0 - rate;
            let dim = tape.data(hidden).dim();
            let mask = Array2::from_shape_fn(dim, |_| {
                if rng.random_range(0.0..1.0) < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            hidden = tape.mul_mask(hidden, Arc::new(mask))?;
        }
    }
    let hw = tape.dense_matmul(hidden, params.w2)?;
    let ahw = tape.spmm(Arc::clone(op.matrix()), hw)?;
    let logits = tape.add_bias(ahw, params.b2)?;
    let probs = tape.row_softmax(logits);
    Ok((hidden, probs))
}

/// Inference convenience: forward on a throwaway tape, no gradients.
pub fn gcn_infer(
    params: &GcnParams,
    op: &NormalizedOperator,
    features: &Arc<Csr>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut tape = Tape::new();
    let values = params_on_tape(&mut tape, params, false);
    let (hidden, probs) =
        gcn_forward::<rand_chacha::ChaCha12Rng>(&mut tape, &values, op, features, None)?;
    Ok((tape.data(hidden).clone(), tape.data(probs).clone()))
}

/// Gradients read back off a tape after `backward`, in parameter order.
#[derive(Debug, Clone)]
pub struct GcnGrads {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

/// Collects parameter gradients; absent gradients read as zero.
pub fn grads_from_tape(tape: &Tape, values: &GcnValues) -> GcnGrads {
    let pull = |v: Value| {
        tape.grad(v)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(tape.data(v).dim()))
    };
    GcnGrads {
        w1: pull(values.w1),
        b1: pull(values.b1),
        w2: pull(values.w2),
        b2: pull(values.b2),
    }
}

/// Adam moment buffers for one [`GcnParams`].
#[derive(Debug, Clone)]
pub struct AdamState {
    moments: Vec<(Array2<f64>, Array2<f64>)>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(params: &GcnParams) -> Self {
        let moments = params
            .tensors()
            .iter()
            .map(|(_, t)| (Array2::zeros(t.dim()), Array2::zeros(t.dim())))
            .collect();
        AdamState {
            moments,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with classical L2 weight decay folded into the
/// gradient (`g += wd·p`) before the moment update. Errors on non-finite
/// gradients.
pub fn adam_step(
    params: &mut GcnParams,
    grads: &GcnGrads,
    state: &mut AdamState,
    cfg: &ModelConfig,
) -> Result<()> {
    let gs = [&grads.w1, &grads.b1, &grads.w2, &grads.b2];
    for g in &gs {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::divergence("non-finite gradient in adam_step".to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let lr = cfg.learning_rate;
    let wd = cfg.weight_decay;
    for ((p, g), mv) in params
        .tensors_mut()
        .into_iter()
        .zip(gs)
        .zip(state.moments.iter_mut())
    {
        let (m, v) = mv;
        let ps = p.as_slice_mut().expect("row-major");
        let gs = g.as_slice().expect("row-major");
        let ms = m.as_slice_mut().expect("row-major");
        let vs = v.as_slice_mut().expect("row-major");
        for i in 0..ps.len() {
            let g = gs[i] + wd * ps[i];
            ms[i] = b1 * ms[i] + (1.0 - b1) * g;
            vs[i] = b2 * vs[i] + (1.0 - b2) * g * g;
            let mhat = ms[i] / bc1;
            let vhat = vs[i] / bc2;
            ps[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Writes named tensors in the checkpoint layout: magic, little-endian
/// u64 tensor count, then per tensor a u64 name length, UTF-8 name, u64
/// rows, u64 cols, f64 row-major data.
pub fn write_checkpoint(path: &Path, tensors: &[(String, &Array2<f64>)]) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(CKPT_MAGIC)?;
    f.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in tensors {
        f.write_all(&(name.len() as u64).to_le_bytes())?;
        f.write_all(name.as_bytes())?;
        f.write_all(&(t.nrows() as u64).to_le_bytes())?;
        f.write_all(&(t.ncols() as u64).to_le_bytes())?;
        for &v in t.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Array2<f64>)>> {
    let mut f = BufReader::new(
        fs::File::open(path)
            .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?,
    );
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::data(format!("{}: bad magic", path.display())));
    }
    let mut u64buf = [0u8; 8];
    f.read_exact(&mut u64buf)?;
    let count = u64::from_le_bytes(u64buf) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        f.read_exact(&mut u64buf)?;
        let name_len = u64::from_le_bytes(u64buf) as usize;
        let mut name = vec![0u8; name_len];
        f.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::data("checkpoint: non-utf8 tensor name".to_string()))?;
        f.read_exact(&mut u64buf)?;
        let rows = u64::from_le_bytes(u64buf) as usize;
        f.read_exact(&mut u64buf)?;
        let cols = u64::from_le_bytes(u64buf) as usize;
        let mut data = vec![0u8; rows * cols * 8];
        f.read_exact(&mut data)?;
        let mut t = Array2::zeros((rows, cols));
        for (i, chunk) in data.chunks_exact(8).enumerate() {
            t[[i / cols.max(1), i % cols.max(1)]] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        out.push((name, t));
    }
    Ok(out)
}

/// Saves a model's four tensors under `{prefix}.w1` etc.
pub fn save_params(path: &Path, prefix: &str, params: &GcnParams) -> Result<()> {
    let named: Vec<(String, &Array2<f64>)> = params
        .tensors()
        .iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), *t))
        .collect();
    write_checkpoint(path, &named)
}

/// Loads a model saved by [`save_params`].
pub fn load_params(path: &Path, prefix: &str) -> Result<GcnParams> {
    let tensors = read_checkpoint(path)?;
    let find = |suffix: &str| {
        let want = format!("{prefix}.{suffix}");
        tensors
            .iter()
            .find(|(n, _)| *n == want)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::data(format!("checkpoint missing tensor {want}")))
    };
    Ok(GcnParams {
        w1: find("w1")?,
        b1: find("b1")?,
        w2: find("w2")?,
        b2: find("b2")?,
    })
}
