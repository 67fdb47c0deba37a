//! Small MLP classifier with a hand-derived backward pass and two
//! optimizers (SGD with momentum, Adam). The head has one logit slot per
//! class, known classes first, novel slots after them.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

const CHECKPOINT_MAGIC: &[u8; 8] = b"DPLACKP1";

/// Layer widths: `input -> hidden (ReLU) -> embed (linear) -> out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub input: usize,
    pub hidden: usize,
    pub embed: usize,
    pub out: usize,
}

impl LayerDims {
    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.hidden == 0 || self.embed == 0 || self.out == 0 {
            return Err(Error::invalid("all layer dims must be >= 1"));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.input * self.hidden
            + self.hidden
            + self.hidden * self.embed
            + self.embed
            + self.embed * self.out
            + self.out
    }
}

/// Three-layer perceptron. Weights are stored `(fan_in, fan_out)` so the
/// forward pass is plain `x . W + b` on row-major batches.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: LayerDims,
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
    w3: Matrix,
    b3: Vec<f64>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub hidden_pre: Matrix,
    pub hidden: Matrix,
    pub embeddings: Matrix,
    pub logits: Matrix,
}

/// Parameter gradients, same shapes as the corresponding weights.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub w3: Matrix,
    pub b3: Vec<f64>,
}

impl Gradients {
    pub fn zeros(dims: &LayerDims) -> Gradients {
        Gradients {
            w1: Matrix::zeros(dims.input, dims.hidden),
            b1: vec![0.0; dims.hidden],
            w2: Matrix::zeros(dims.hidden, dims.embed),
            b2: vec![0.0; dims.embed],
            w3: Matrix::zeros(dims.embed, dims.out),
            b3: vec![0.0; dims.out],
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        self.w1.add_assign(&other.w1);
        self.w2.add_assign(&other.w2);
        self.w3.add_assign(&other.w3);
        for (a, b) in self.b1.iter_mut().zip(&other.b1) {
            *a += b;
        }
        for (a, b) in self.b2.iter_mut().zip(&other.b2) {
            *a += b;
        }
        for (a, b) in self.b3.iter_mut().zip(&other.b3) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.w1.scale(s);
        self.w2.scale(s);
        self.w3.scale(s);
        for v in self
            .b1
            .iter_mut()
            .chain(self.b2.iter_mut())
            .chain(self.b3.iter_mut())
        {
            *v *= s;
        }
    }

    /// Flatten in the fixed parameter order `w1, b1, w2, b2, w3, b3`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.w1.data());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.data());
        out.extend_from_slice(&self.b2);
        out.extend_from_slice(self.w3.data());
        out.extend_from_slice(&self.b3);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.w1.is_finite()
            && self.w2.is_finite()
            && self.w3.is_finite()
            && self.b1.iter().all(|v| v.is_finite())
            && self.b2.iter().all(|v| v.is_finite())
            && self.b3.iter().all(|v| v.is_finite())
    }
}

fn init_weight(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).unwrap();
    let data: Vec<f64> = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    Matrix::new(fan_in, fan_out, data).unwrap()
}

impl Mlp {
    /// Seeded init: weights `Normal(0, 1/sqrt(fan_in))`, biases zero.
    pub fn init(dims: LayerDims, seed: u64) -> Result<Mlp> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Mlp {
            dims,
            w1: init_weight(&mut rng, dims.input, dims.hidden),
            b1: vec![0.0; dims.hidden],
            w2: init_weight(&mut rng, dims.hidden, dims.embed),
            b2: vec![0.0; dims.embed],
            w3: init_weight(&mut rng, dims.embed, dims.out),
            b3: vec![0.0; dims.out],
        })
    }

    pub fn dims(&self) -> LayerDims {
        self.dims
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardCache> {
        if x.cols() != self.dims.input {
            return Err(Error::invalid(format!(
                "input has {} columns, model expects {}",
                x.cols(),
                self.dims.input
            )));
        }
        let mut hidden_pre = x.matmul(&self.w1)?;
        add_bias(&mut hidden_pre, &self.b1);
        let mut hidden = hidden_pre.clone();
        for v in 0..hidden.rows() {
            for u in hidden.row_mut(v) {
                if *u < 0.0 {
                    *u = 0.0;
                }
            }
        }
        let mut embeddings = hidden.matmul(&self.w2)?;
        add_bias(&mut embeddings, &self.b2);
        let mut logits = embeddings.matmul(&self.w3)?;
        add_bias(&mut logits, &self.b3);
        if !logits.is_finite() {
            return Err(Error::NonFinite("forward pass produced non-finite logits".into()));
        }
        Ok(ForwardCache {
            hidden_pre,
            hidden,
            embeddings,
            logits,
        })
    }

    /// Backpropagate a gradient on the logits to parameter gradients.
    /// `grad_logits` carries any loss normalization already applied, so
    /// the result is exactly `dLoss/dParam` for that batch.
    pub fn backward(
        &self,
        x: &Matrix,
        cache: &ForwardCache,
        grad_logits: &Matrix,
    ) -> Result<Gradients> {
        if grad_logits.rows() != x.rows() || grad_logits.cols() != self.dims.out {
            return Err(Error::invalid("grad_logits shape mismatch"));
        }
        let w3 = cache.embeddings.transpose_matmul(grad_logits)?;
        let b3 = grad_logits.column_sums();
        let grad_embed = grad_logits.matmul_transpose(&self.w3)?;

        let w2 = cache.hidden.transpose_matmul(&grad_embed)?;
        let b2 = grad_embed.column_sums();
        let mut grad_hidden = grad_embed.matmul_transpose(&self.w2)?;
        for r in 0..grad_hidden.rows() {
            for c in 0..grad_hidden.cols() {
                if cache.hidden_pre.get(r, c) <= 0.0 {
                    grad_hidden.set(r, c, 0.0);
                }
            }
        }

        let w1 = x.transpose_matmul(&grad_hidden)?;
        let b1 = grad_hidden.column_sums();
        Ok(Gradients {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
        })
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dims.num_params());
        out.extend_from_slice(self.w1.data());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.data());
        out.extend_from_slice(&self.b2);
        out.extend_from_slice(self.w3.data());
        out.extend_from_slice(&self.b3);
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.dims.num_params() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.dims.num_params(),
                params.len()
            )));
        }
        let d = self.dims;
        let mut pos = 0;
        let mut take = |n: usize| {
            let s = &params[pos..pos + n];
            pos += n;
            s.to_vec()
        };
        self.w1 = Matrix::new(d.input, d.hidden, take(d.input * d.hidden))?;
        self.b1 = take(d.hidden);
        self.w2 = Matrix::new(d.hidden, d.embed, take(d.hidden * d.embed))?;
        self.b2 = take(d.embed);
        self.w3 = Matrix::new(d.embed, d.out, take(d.embed * d.out))?;
        self.b3 = take(d.out);
        Ok(())
    }

    /// Binary checkpoint: magic, four u32 LE dims, then the flattened
    /// parameters as little-endian doubles. Round trips bit-exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for d in [
            self.dims.input,
            self.dims.hidden,
            self.dims.embed,
            self.dims.out,
        ] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for p in self.params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Mlp> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 24 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad checkpoint header".into(),
            });
        }
        let d = |i: usize| {
            u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize
        };
        let dims = LayerDims {
            input: d(0),
            hidden: d(1),
            embed: d(2),
            out: d(3),
        };
        dims.validate()?;
        let body = &bytes[24..];
        if body.len() != dims.num_params() * 8 {
            return Err(Error::Format {
                offset: 24,
                message: format!(
                    "checkpoint body holds {} bytes, dims imply {}",
                    body.len(),
                    dims.num_params() * 8
                ),
            });
        }
        let params: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut model = Mlp::init(dims, 0)?;
        model.set_params(&params)?;
        Ok(model)
    }
}

fn add_bias(m: &mut Matrix, bias: &[f64]) {
    for r in 0..m.rows() {
        for (v, b) in m.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Optimizer selection with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd {
        lr: f64,
        momentum: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerKind {
    pub fn sgd(lr: f64, momentum: f64) -> OptimizerKind {
        OptimizerKind::Sgd { lr, momentum }
    }

    pub fn adam(lr: f64) -> OptimizerKind {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            OptimizerKind::Sgd { lr, momentum } => {
                if !(lr >= 0.0) || !(0.0..1.0).contains(&momentum) {
                    return Err(Error::invalid("sgd needs lr >= 0 and momentum in [0, 1)"));
                }
            }
            OptimizerKind::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                if !(lr >= 0.0)
                    || !(0.0..1.0).contains(&beta1)
                    || !(0.0..1.0).contains(&beta2)
                    || !(eps > 0.0)
                {
                    return Err(Error::invalid(
                        "adam needs lr >= 0, betas in [0, 1), eps > 0",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Optimizer with its per-parameter state, operating on the flattened
/// parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    velocity: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, num_params: usize) -> Result<Optimizer> {
        kind.validate()?;
        let second = match kind {
            OptimizerKind::Sgd { .. } => Vec::new(),
            OptimizerKind::Adam { .. } => vec![0.0; num_params],
        };
        Ok(Optimizer {
            kind,
            velocity: vec![0.0; num_params],
            second,
            steps: 0,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step(&mut self, model: &mut Mlp, grads: &Gradients) -> Result<()> {
        let mut params = model.params();
        let flat = grads.flatten();
        if flat.len() != params.len() {
            return Err(Error::invalid("gradient/parameter length mismatch"));
        }
        if !flat.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite("non-finite gradient in optimizer step".into()));
        }
        match self.kind {
            OptimizerKind::Sgd { lr, momentum } => {
                for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(&flat) {
                    *v = momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            OptimizerKind::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                self.steps += 1;
                let t = self.steps as f64;
                let c1 = 1.0 - beta1.powf(t);
                let c2 = 1.0 - beta2.powf(t);
                for ((p, (m, v)), g) in params
                    .iter_mut()
                    .zip(self.velocity.iter_mut().zip(&mut self.second))
                    .zip(&flat)
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        model.set_params(&params)
    }
}
