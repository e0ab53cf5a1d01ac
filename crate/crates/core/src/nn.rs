//! Small fully connected networks with hand-written backpropagation.
//!
//! Hidden layers use a rectifier, the output layer is linear. Everything is
//! `f64` and batched through `ndarray` matrix products.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::primitives::RngStream;

const CHECKPOINT_MAGIC: &[u8; 8] = b"HYPENET1";

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone)]
struct Layer {
    /// Shape `(fan_in, fan_out)`.
    w: Array2<f64>,
    b: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct FeedforwardNet {
    layer_sizes: Vec<usize>,
    layers: Vec<Layer>,
    /// Changes on every parameter update; forward caches remember it.
    version: u64,
}

impl PartialEq for FeedforwardNet {
    fn eq(&self, other: &Self) -> bool {
        self.layer_sizes == other.layer_sizes
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.w == b.w && a.b == b.b)
    }
}

/// Activations saved by [`FeedforwardNet::forward_cached`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

/// Parameter gradients, one `(weights, biases)` block per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    /// Layer-by-layer weights (row-major) then biases, matching
    /// [`FeedforwardNet::flat_parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn scale(&mut self, factor: f64) {
        self.weights.iter_mut().for_each(|w| *w *= factor);
        self.biases.iter_mut().for_each(|b| *b *= factor);
    }
}

impl FeedforwardNet {
    /// Seeded uniform initialization in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn new(layer_sizes: &[usize], stream: RngStream) -> Result<Self> {
        let mut rng = stream.generator();
        Self::build(layer_sizes, |fan_in, fan_out| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Array2::from_shape_simple_fn((fan_in, fan_out), || rng.gen_range(-limit..limit))
        })
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        Self::build(layer_sizes, |i, o| Array2::zeros((i, o)))
    }

    fn build(layer_sizes: &[usize], mut init: impl FnMut(usize, usize) -> Array2<f64>) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::invalid(format!("bad layer sizes {layer_sizes:?}")));
        }
        let layers = layer_sizes
            .windows(2)
            .map(|p| Layer {
                w: init(p[0], p[1]),
                b: Array1::zeros(p[1]),
            })
            .collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            layers,
            version: fresh_version(),
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("at least two layers")
    }

    pub fn n_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Weights of layer `i` with shape `(fan_in, fan_out)`.
    pub fn weights(&self, i: usize) -> &Array2<f64> {
        &self.layers[i].w
    }

    pub fn biases(&self, i: usize) -> &Array1<f64> {
        &self.layers[i].b
    }

    /// Replace layer `i`'s parameters.
    pub fn set_layer(&mut self, i: usize, w: Array2<f64>, b: Array1<f64>) -> Result<()> {
        let l = self
            .layers
            .get_mut(i)
            .ok_or_else(|| Error::invalid(format!("no layer {i}")))?;
        if w.dim() != l.w.dim() || b.len() != l.b.len() {
            return Err(Error::DimensionMismatch {
                expected: l.w.len() + l.b.len(),
                got: w.len() + b.len(),
            });
        }
        l.w = w;
        l.b = b;
        self.version = fresh_version();
        Ok(())
    }

    pub fn flat_parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_parameters());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_flat_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_parameters() {
            return Err(Error::DimensionMismatch {
                expected: self.n_parameters(),
                got: params.len(),
            });
        }
        let mut it = params.iter();
        for l in &mut self.layers {
            l.w.iter_mut().for_each(|x| *x = *it.next().expect("length checked"));
            l.b.iter_mut().for_each(|x| *x = *it.next().expect("length checked"));
        }
        self.version = fresh_version();
        Ok(())
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: cols,
            });
        }
        Ok(())
    }

    fn affine(layer: &Layer, x: &Array2<f64>) -> Array2<f64> {
        let mut z = x.dot(&layer.w);
        z += &layer.b;
        z
    }

    /// Forward pass for a batch laid out one example per row.
    pub fn forward_batch(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let mut a = Self::affine(&self.layers[0], x);
        for layer in &self.layers[1..] {
            a.mapv_inplace(relu);
            a = Self::affine(layer, &a);
        }
        Ok(a)
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input.len())?;
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("shape matches");
        Ok(self.forward_batch(&x)?.into_raw_vec_and_offset().0)
    }

    /// Forward pass that keeps what [`backward`](Self::backward) needs.
    pub fn forward_cached(&self, x: &Array2<f64>) -> Result<ForwardCache> {
        self.check_input(x.ncols())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Self::affine(layer, &a);
            if i + 1 < self.layers.len() {
                z.mapv_inplace(relu);
            }
            inputs.push(a);
            a = z;
        }
        Ok(ForwardCache {
            version: self.version,
            inputs,
            output: a,
        })
    }

    /// Gradients of `sum(loss_grad ⊙ output)` with respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache, loss_grad: &Array2<f64>) -> Result<Gradients> {
        if cache.version != self.version {
            return Err(Error::StaleCache {
                cached: cache.version,
                current: self.version,
            });
        }
        if loss_grad.dim() != cache.output.dim() {
            return Err(Error::DimensionMismatch {
                expected: cache.output.len(),
                got: loss_grad.len(),
            });
        }
        let n = self.layers.len();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut delta = loss_grad.clone();
        for i in (0..n).rev() {
            let a = &cache.inputs[i];
            weights.push(a.t().dot(&delta));
            biases.push(delta.sum_axis(Axis(0)));
            if i > 0 {
                let mut prev = delta.dot(&self.layers[i].w.t());
                Zip::from(&mut prev).and(a).for_each(|g, &act| {
                    if act <= 0.0 {
                        *g = 0.0;
                    }
                });
                delta = prev;
            }
        }
        weights.reverse();
        biases.reverse();
        Ok(Gradients { weights, biases })
    }

    /// Binary checkpoint: magic, layer count, layer sizes, then each layer's
    /// weights (row-major) and biases, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * (self.layer_sizes.len() + self.n_parameters()));
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.layer_sizes.len() as u64).to_le_bytes());
        for s in &self.layer_sizes {
            out.extend_from_slice(&(*s as u64).to_le_bytes());
        }
        for p in self.flat_parameters() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut words = bytes.get(8..).unwrap_or_default().chunks_exact(8);
        if bytes.get(..8) != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(Error::Checkpoint("missing network checkpoint header".into()));
        }
        let mut next = || -> Result<[u8; 8]> {
            words
                .next()
                .map(|w| w.try_into().expect("chunk of 8"))
                .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))
        };
        let n_sizes = u64::from_le_bytes(next()?) as usize;
        if !(2..=64).contains(&n_sizes) {
            return Err(Error::Checkpoint(format!("implausible layer count {n_sizes}")));
        }
        let sizes = (0..n_sizes)
            .map(|_| Ok(u64::from_le_bytes(next()?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut net = Self::zeros(&sizes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let params = (0..net.n_parameters())
            .map(|_| Ok(f64::from_le_bytes(next()?)))
            .collect::<Result<Vec<_>>>()?;
        if next().is_ok() {
            return Err(Error::Checkpoint("trailing bytes after parameters".into()));
        }
        net.set_flat_parameters(&params)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    learning_rate: f64,
    first_moment: Option<Gradients>,
    second_moment: Option<Gradients>,
    step_count: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {learning_rate}")));
        }
        Ok(Self {
            kind,
            learning_rate,
            first_moment: None,
            second_moment: None,
            step_count: 0,
        })
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update to `net`. Nothing is changed if any gradient is non-finite.
    pub fn step(&mut self, net: &mut FeedforwardNet, grads: &Gradients) -> Result<()> {
        if grads.weights.len() != net.layers.len() {
            return Err(Error::DimensionMismatch {
                expected: net.layers.len(),
                got: grads.weights.len(),
            });
        }
        for (i, (l, (gw, gb))) in net.layers.iter().zip(grads.weights.iter().zip(&grads.biases)).enumerate() {
            if gw.dim() != l.w.dim() || gb.len() != l.b.len() {
                return Err(Error::DimensionMismatch {
                    expected: l.w.len() + l.b.len(),
                    got: gw.len() + gb.len(),
                });
            }
            if gw.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of layer {i} weights")));
            }
            if gb.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of layer {i} biases")));
            }
        }
        self.step_count += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (l, (gw, gb)) in net.layers.iter_mut().zip(grads.weights.iter().zip(&grads.biases)) {
                    l.w.scaled_add(-lr, gw);
                    l.b.scaled_add(-lr, gb);
                }
            }
            OptimizerKind::Adam => {
                let zeros = || Gradients {
                    weights: grads.weights.iter().map(|g| Array2::zeros(g.dim())).collect(),
                    biases: grads.biases.iter().map(|g| Array1::zeros(g.len())).collect(),
                };
                let m = self.first_moment.get_or_insert_with(zeros);
                let v = self.second_moment.get_or_insert_with(zeros);
                let t = self.step_count as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
                };
                for (i, l) in net.layers.iter_mut().enumerate() {
                    Zip::from(&mut l.w)
                        .and(&mut m.weights[i])
                        .and(&mut v.weights[i])
                        .and(&grads.weights[i])
                        .for_each(|p, m, v, &g| update(p, m, v, g));
                    Zip::from(&mut l.b)
                        .and(&mut m.biases[i])
                        .and(&mut v.biases[i])
                        .and(&grads.biases[i])
                        .for_each(|p, m, v, &g| update(p, m, v, g));
                }
            }
        }
        if net.layers.iter().any(|l| l.w.iter().chain(l.b.iter()).any(|p| !p.is_finite())) {
            return Err(Error::NonFinite("network parameters after update".into()));
        }
        net.version = fresh_version();
        Ok(())
    }
}
