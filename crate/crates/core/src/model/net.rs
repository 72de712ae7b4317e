//! Multi-layer descriptor network with manual forward and backward passes.
//!
//! Hidden layers use tanh; the final layer is linear followed by L2
//! normalization, so every embedding the network emits is unit-norm. The
//! backward pass includes the Jacobian of that final normalization,
//! (I - v̂v̂ᵀ)/‖v‖.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math::{EmbeddingBatch, Matrix};

/// Global count of rows pushed through `forward`, for cost accounting of
/// the supervising network.
static FORWARD_ROWS: AtomicU64 = AtomicU64::new(0);

pub fn forward_rows_embedded() -> u64 {
    FORWARD_ROWS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
}

impl Activation {
    pub fn id(self) -> u32 {
        match self {
            Activation::Tanh => 0,
        }
    }

    pub fn from_id(id: u32) -> Result<Self> {
        match id {
            0 => Ok(Activation::Tanh),
            other => Err(Error::Format(format!("unknown activation id {other}"))),
        }
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed in terms of the activation output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DescriptorNet {
    layer_sizes: Vec<usize>,
    /// Per layer, out x in.
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
    /// Bumped on every parameter mutation; forward caches record it so a
    /// stale cache is rejected by `backward`.
    version: u64,
}

/// Parameter gradients (or any parameter-shaped value), laid out as
/// w0, b0, w1, b1, ... with weights flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        assert_eq!(self.tensors.len(), other.tensors.len());
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0f64, |m, x| m.max(x.abs()))
    }
}

/// Activation cache produced by `forward` and consumed by `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    net_version: u64,
    rows: usize,
    /// acts[0] is the input batch; acts[l] the post-activation output of
    /// hidden layer l-1.
    acts: Vec<Matrix>,
    /// Final linear output before normalization.
    prenorm: Matrix,
    norms: Vec<f64>,
}

impl DescriptorNet {
    /// Xavier-uniform initialization in ±sqrt(6/(fan_in+fan_out)), biases
    /// zero, fully determined by `seed`.
    pub fn new_seeded(layer_sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config(
                "network needs at least an input and an output size".into(),
            ));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config("zero-sized layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            weights.push(Matrix {
                rows: fan_out,
                cols: fan_in,
                data,
            });
            biases.push(vec![0.0; fan_out]);
        }
        Ok(DescriptorNet {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            activation,
            version: 0,
        })
    }

    /// Build a network from explicit parameter tensors (tests, checkpoints).
    pub fn from_parts(
        layer_sizes: Vec<usize>,
        weights: Vec<Matrix>,
        biases: Vec<Vec<f64>>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.len() != layer_sizes.len() - 1 || biases.len() != weights.len() {
            return Err(Error::Shape("parameter count vs layer sizes".into()));
        }
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.rows != layer_sizes[l + 1] || w.cols != layer_sizes[l] || b.len() != w.rows {
                return Err(Error::Shape(format!("layer {l} parameter shape")));
            }
        }
        Ok(DescriptorNet {
            layer_sizes,
            weights,
            biases,
            activation,
            version: 0,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn zero_gradients(&self) -> Gradients {
        let mut tensors = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            tensors.push(vec![0.0; w.data.len()]);
            tensors.push(vec![0.0; b.len()]);
        }
        Gradients { tensors }
    }

    /// Flat view of all parameters in gradient layout, for perturbation in
    /// finite-difference checks.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(&w.data);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut off = 0;
        for l in 0..self.weights.len() {
            let wlen = self.weights[l].data.len();
            self.weights[l].data.copy_from_slice(&flat[off..off + wlen]);
            off += wlen;
            let blen = self.biases[l].len();
            self.biases[l].copy_from_slice(&flat[off..off + blen]);
            off += blen;
        }
        self.version += 1;
        Ok(())
    }

    /// Apply a parameter update in gradient layout. Bumps the version so
    /// outstanding caches become stale.
    pub(crate) fn apply_update(&mut self, f: impl Fn(usize, usize, f64) -> f64) {
        let mut t = 0;
        for l in 0..self.weights.len() {
            for (i, p) in self.weights[l].data.iter_mut().enumerate() {
                *p = f(t, i, *p);
            }
            t += 1;
            for (i, p) in self.biases[l].iter_mut().enumerate() {
                *p = f(t, i, *p);
            }
            t += 1;
        }
        self.version += 1;
    }

    /// Forward pass: unit-norm embeddings plus the cache for `backward`.
    pub fn forward(&self, inputs: &Matrix) -> Result<(EmbeddingBatch, ForwardCache)> {
        if inputs.cols != self.input_dim() {
            return Err(Error::Shape(format!(
                "forward: input dim {} vs network input {}",
                inputs.cols,
                self.input_dim()
            )));
        }
        FORWARD_ROWS.fetch_add(inputs.rows as u64, Ordering::Relaxed);
        let rows = inputs.rows;
        let last = self.num_layers() - 1;
        let mut acts: Vec<Matrix> = vec![inputs.clone()];
        for l in 0..last {
            let out_dim = self.layer_sizes[l + 1];
            let mut next = Matrix::zeros(rows, out_dim);
            for r in 0..rows {
                let x = acts[l].row(r);
                let y = next.row_mut(r);
                for o in 0..out_dim {
                    let wrow = self.weights[l].row(o);
                    let mut z = self.biases[l][o];
                    for (xi, wi) in x.iter().zip(wrow) {
                        z += xi * wi;
                    }
                    y[o] = self.activation.apply(z);
                }
            }
            acts.push(next);
        }
        // final linear layer, no activation
        let out_dim = self.output_dim();
        let mut prenorm = Matrix::zeros(rows, out_dim);
        for r in 0..rows {
            let x = acts[last].row(r);
            let y = prenorm.row_mut(r);
            for o in 0..out_dim {
                let wrow = self.weights[last].row(o);
                let mut z = self.biases[last][o];
                for (xi, wi) in x.iter().zip(wrow) {
                    z += xi * wi;
                }
                y[o] = z;
            }
        }
        let mut normalized = Matrix::zeros(rows, out_dim);
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let v = prenorm.row(r);
            let n = crate::math::l2_norm(v);
            if n < 1e-12 {
                return Err(Error::Numeric(format!(
                    "embedding row {r} collapsed to zero before normalization"
                )));
            }
            for (o, x) in v.iter().enumerate() {
                normalized.row_mut(r)[o] = x / n;
            }
            norms.push(n);
        }
        let cache = ForwardCache {
            net_version: self.version,
            rows,
            acts,
            prenorm,
            norms,
        };
        Ok((EmbeddingBatch::from_unit_rows(normalized)?, cache))
    }

    /// Backward pass from gradients w.r.t. the unit-norm embeddings to
    /// gradients for every parameter.
    pub fn backward(&self, cache: &ForwardCache, grad_embeddings: &Matrix) -> Result<Gradients> {
        if cache.net_version != self.version {
            return Err(Error::Cache(format!(
                "cache built at parameter version {}, network is at {}",
                cache.net_version, self.version
            )));
        }
        if grad_embeddings.rows != cache.rows || grad_embeddings.cols != self.output_dim() {
            return Err(Error::Shape(format!(
                "backward: upstream gradient {}x{}, expected {}x{}",
                grad_embeddings.rows,
                grad_embeddings.cols,
                cache.rows,
                self.output_dim()
            )));
        }
        let rows = cache.rows;
        let last = self.num_layers() - 1;
        let out_dim = self.output_dim();
        let mut grads = self.zero_gradients();

        // gradient w.r.t. the pre-normalization output:
        // g = (G - y (y . G)) / ||v||  with y = v/||v||
        let mut g = Matrix::zeros(rows, out_dim);
        for r in 0..rows {
            let v = cache.prenorm.row(r);
            let n = cache.norms[r];
            let up = grad_embeddings.row(r);
            let ydotg: f64 = v.iter().zip(up).map(|(vi, gi)| (vi / n) * gi).sum();
            for o in 0..out_dim {
                g.row_mut(r)[o] = (up[o] - (v[o] / n) * ydotg) / n;
            }
        }

        // walk layers back to front
        let mut upstream = g;
        for l in (0..=last).rev() {
            let in_dim = self.layer_sizes[l];
            let od = self.layer_sizes[l + 1];
            let (wslot, bslot) = (2 * l, 2 * l + 1);
            let mut downstream = Matrix::zeros(rows, in_dim);
            for r in 0..rows {
                let x = cache.acts[l].row(r);
                let gz = upstream.row(r);
                for o in 0..od {
                    let go = gz[o];
                    grads.tensors[bslot][o] += go;
                    let wrow_off = o * in_dim;
                    for i in 0..in_dim {
                        grads.tensors[wslot][wrow_off + i] += go * x[i];
                        downstream.row_mut(r)[i] += go * self.weights[l].data[wrow_off + i];
                    }
                }
            }
            if l > 0 {
                // through the activation of the previous hidden layer
                for r in 0..rows {
                    let a = cache.acts[l].row(r);
                    let d = downstream.row_mut(r);
                    for i in 0..in_dim {
                        d[i] *= self.activation.derivative_from_output(a[i]);
                    }
                }
            }
            upstream = downstream;
        }
        Ok(grads)
    }
}
