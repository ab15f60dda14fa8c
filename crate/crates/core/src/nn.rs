//! Dense feedforward networks with exact reverse-mode gradients.
//!
//! Layers are affine maps followed by ReLU on every hidden layer and the
//! identity on the output layer. Weight matrix `k` has shape
//! `(layer_sizes[k + 1], layer_sizes[k])` and is stored row-major, so a batch
//! of row-vector inputs `X` maps to `X · Wᵀ + b`.
//!
//! Initialization is Glorot-uniform: every weight is drawn from
//! `U(-√(6/(fan_in+fan_out)), +√(6/(fan_in+fan_out)))` and biases start at
//! zero.
//!
//! The optimizer is Adam with bias correction (β1 = 0.9, β2 = 0.999,
//! ε = 1e-8 by default).

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use crate::rng::seeded;

static NEXT_NETWORK_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NETWORK_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug)]
pub struct DenseNetwork {
    layer_sizes: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    // (instance id, parameter revision); used to reject stale caches
    id: u64,
    revision: u64,
}

impl Clone for DenseNetwork {
    fn clone(&self) -> Self {
        Self {
            layer_sizes: self.layer_sizes.clone(),
            weights: self.weights.clone(),
            biases: self.biases.clone(),
            id: fresh_id(),
            revision: 0,
        }
    }
}

impl PartialEq for DenseNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.layer_sizes == other.layer_sizes
            && self.weights == other.weights
            && self.biases == other.biases
    }
}

/// Activations recorded by [`DenseNetwork::forward_batch`].
///
/// `inputs[k]` is the input to layer `k` (post-ReLU for hidden layers).
#[derive(Debug, Clone)]
pub struct ForwardCache {
    network_id: u64,
    revision: u64,
    inputs: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }
}

/// Parameter-shaped container for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNetwork) -> Self {
        Self {
            weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            w.mapv_inplace(|x| x * factor);
        }
        for b in &mut self.biases {
            b.mapv_inplace(|x| x * factor);
        }
    }

    /// Flattened in the same order as [`DenseNetwork::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
            .fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    fn first_non_finite_layer(&self) -> Option<usize> {
        (0..self.weights.len()).find(|&k| {
            self.weights[k].iter().any(|x| !x.is_finite())
                || self.biases[k].iter().any(|x| !x.is_finite())
        })
    }

    fn same_shape(&self, net: &DenseNetwork) -> bool {
        self.weights.len() == net.weights.len()
            && self.biases.len() == net.biases.len()
            && self.weights.iter().zip(&net.weights).all(|(a, b)| a.dim() == b.dim())
            && self.biases.iter().zip(&net.biases).all(|(a, b)| a.dim() == b.dim())
    }
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::Config(format!(
            "a network needs at least an input and an output layer, got sizes {layer_sizes:?}"
        )));
    }
    if layer_sizes.iter().any(|&n| n == 0) {
        return Err(Error::Config(format!(
            "layer sizes must be positive, got {layer_sizes:?}"
        )));
    }
    Ok(())
}

impl DenseNetwork {
    /// Glorot-uniform initialization from `seed`.
    pub fn new(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut rng = seeded(seed);
        let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
        let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Array2::from_shape_simple_fn((fan_out, fan_in), || {
                rng.random_range(-limit..limit)
            });
            weights.push(w);
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            id: fresh_id(),
            revision: 0,
        })
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let weights = layer_sizes
            .windows(2)
            .map(|p| Array2::zeros((p[1], p[0])))
            .collect();
        let biases = layer_sizes[1..].iter().map(|&n| Array1::zeros(n)).collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            id: fresh_id(),
            revision: 0,
        })
    }

    pub fn from_parts(
        layer_sizes: Vec<usize>,
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
    ) -> Result<Self> {
        validate_sizes(&layer_sizes)?;
        let n_layers = layer_sizes.len() - 1;
        if weights.len() != n_layers || biases.len() != n_layers {
            return Err(Error::Shape(format!(
                "expected {n_layers} weight matrices and bias vectors, got {} and {}",
                weights.len(),
                biases.len()
            )));
        }
        for k in 0..n_layers {
            let expect = (layer_sizes[k + 1], layer_sizes[k]);
            if weights[k].dim() != expect || biases[k].len() != layer_sizes[k + 1] {
                return Err(Error::Shape(format!(
                    "layer {k}: weights {:?} / bias {} do not match sizes {:?}",
                    weights[k].dim(),
                    biases[k].len(),
                    expect
                )));
            }
        }
        Ok(Self {
            layer_sizes,
            weights,
            biases,
            id: fresh_id(),
            revision: 0,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
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

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Mutable access to layer `k` parameters. Invalidates outstanding caches.
    pub fn layer_mut(&mut self, k: usize) -> (&mut Array2<f64>, &mut Array1<f64>) {
        self.revision += 1;
        (&mut self.weights[k], &mut self.biases[k])
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut it = params.iter().copied();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.iter_mut().for_each(|x| *x = it.next().unwrap());
            b.iter_mut().for_each(|x| *x = it.next().unwrap());
        }
        self.revision += 1;
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let (out, cache) = self.forward_batch(x)?;
        Ok((out.into_raw_vec_and_offset().0, cache))
    }

    /// Forward pass over a batch of row vectors, recording activations.
    pub fn forward_batch(&self, inputs: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(inputs)?;
        let mut cache = Vec::with_capacity(self.weights.len());
        let mut a = inputs.to_owned();
        let last = self.weights.len() - 1;
        for k in 0..self.weights.len() {
            let mut z = a.dot(&self.weights[k].t());
            z += &self.biases[k];
            if k < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            cache.push(a);
            a = z;
        }
        Ok((
            a,
            ForwardCache {
                network_id: self.id,
                revision: self.revision,
                inputs: cache,
            },
        ))
    }

    /// Forward pass without recording activations.
    pub fn predict_batch(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(inputs)?;
        let last = self.weights.len() - 1;
        let mut a = self.affine(0, inputs);
        if last > 0 {
            a.mapv_inplace(|v| v.max(0.0));
        }
        for k in 1..self.weights.len() {
            a = self.affine(k, a.view());
            if k < last {
                a.mapv_inplace(|v| v.max(0.0));
            }
        }
        Ok(a)
    }

    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.predict_batch(x)?.into_raw_vec_and_offset().0)
    }

    fn affine(&self, k: usize, a: ArrayView2<f64>) -> Array2<f64> {
        let mut z = a.dot(&self.weights[k].t());
        z += &self.biases[k];
        z
    }

    fn check_input(&self, inputs: ArrayView2<f64>) -> Result<()> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "network expects inputs of length {}, got {}",
                self.input_dim(),
                inputs.ncols()
            )));
        }
        Ok(())
    }

    /// Reverse-mode gradients of `Σ_rows output_grad · output` with respect to
    /// every parameter.
    pub fn backward(&self, cache: &ForwardCache, output_grad: ArrayView2<f64>) -> Result<Gradients> {
        if cache.network_id != self.id || cache.revision != self.revision {
            return Err(Error::Usage(
                "forward cache was produced by a different network or before a parameter update"
                    .into(),
            ));
        }
        let batch = cache.batch_size();
        if output_grad.dim() != (batch, self.output_dim()) {
            return Err(Error::Shape(format!(
                "output gradient has shape {:?}, expected ({batch}, {})",
                output_grad.dim(),
                self.output_dim()
            )));
        }
        let n = self.weights.len();
        let mut gw = Vec::with_capacity(n);
        let mut gb = Vec::with_capacity(n);
        let mut delta = output_grad.to_owned();
        for k in (0..n).rev() {
            let a = &cache.inputs[k];
            gw.push(delta.t().dot(a));
            gb.push(delta.sum_axis(Axis(0)));
            if k > 0 {
                let mut next = delta.dot(&self.weights[k]);
                // ReLU derivative: the recorded input is post-activation, so
                // a zero entry marks a unit that was inactive.
                Zip::from(&mut next).and(a).for_each(|d, &act| {
                    if act <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = next;
            }
        }
        gw.reverse();
        gb.reverse();
        Ok(Gradients { weights: gw, biases: gb })
    }

    fn same_architecture(&self, other: &DenseNetwork) -> bool {
        self.layer_sizes == other.layer_sizes
    }

    pub fn copy_weights_from(&mut self, source: &DenseNetwork) -> Result<()> {
        if !self.same_architecture(source) {
            return Err(Error::Shape(format!(
                "cannot copy weights from {:?} into {:?}",
                source.layer_sizes, self.layer_sizes
            )));
        }
        for (dst, src) in self.weights.iter_mut().zip(&source.weights) {
            dst.assign(src);
        }
        for (dst, src) in self.biases.iter_mut().zip(&source.biases) {
            dst.assign(src);
        }
        self.revision += 1;
        Ok(())
    }

    pub fn to_checkpoint(&self) -> NetworkCheckpoint {
        NetworkCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            layer_sizes: self.layer_sizes.clone(),
            weights: self
                .weights
                .iter()
                .map(|w| w.as_standard_layout().iter().copied().collect())
                .collect(),
            biases: self.biases.iter().map(|b| b.to_vec()).collect(),
        }
    }

    pub fn from_checkpoint(ckpt: NetworkCheckpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported network checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        validate_sizes(&ckpt.layer_sizes)?;
        let sizes = ckpt.layer_sizes;
        if ckpt.weights.len() != sizes.len() - 1 {
            return Err(Error::Shape("checkpoint layer count mismatch".into()));
        }
        let weights = ckpt
            .weights
            .into_iter()
            .enumerate()
            .map(|(k, flat)| {
                Array2::from_shape_vec((sizes[k + 1], sizes[k]), flat)
                    .map_err(|e| Error::Shape(format!("layer {k}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let biases = ckpt.biases.into_iter().map(Array1::from_vec).collect();
        Self::from_parts(sizes, weights, biases)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_checkpoint())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_checkpoint(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::io_util::read_artifact(path)?;
        Self::from_json(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }
}

pub const CHECKPOINT_FORMAT: &str = "confdqn-network";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk network layout: row-major weight matrices of shape
/// `(layer_sizes[k+1], layer_sizes[k])` and one bias vector per layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkCheckpoint {
    pub format: String,
    pub version: u32,
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

pub fn copy_weights(source: &DenseNetwork, target: &mut DenseNetwork) -> Result<()> {
    target.copy_weights_from(source)
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Gradients,
    pub v: Gradients,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(net: &DenseNetwork) -> Self {
        Self::with_constants(net, 0.9, 0.999, 1e-8)
    }

    pub fn with_constants(net: &DenseNetwork, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients before
/// touching any state.
pub fn adam_step(
    net: &mut DenseNetwork,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !grads.same_shape(net) || !state.m.same_shape(net) || !state.v.same_shape(net) {
        return Err(Error::Shape(
            "gradient or optimizer state does not match network parameters".into(),
        ));
    }
    if let Some(layer) = grads.first_non_finite_layer() {
        return Err(Error::NonFinite {
            layer,
            detail: "gradient".into(),
        });
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };
    for k in 0..net.weights.len() {
        Zip::from(&mut net.weights[k])
            .and(&mut state.m.weights[k])
            .and(&mut state.v.weights[k])
            .and(&grads.weights[k])
            .for_each(|p, m, v, &g| update(p, m, v, g));
        Zip::from(&mut net.biases[k])
            .and(&mut state.m.biases[k])
            .and(&mut state.v.biases[k])
            .and(&grads.biases[k])
            .for_each(|p, m, v, &g| update(p, m, v, g));
    }
    net.revision += 1;
    Ok(())
}

fn check_finite(values: &[f64]) -> Result<()> {
    if let Some(i) = values.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logit at index {i}")));
    }
    if values.is_empty() {
        return Err(Error::Empty("logit vector".into()));
    }
    Ok(())
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_finite(logits)?;
    Ok(softmax_unchecked(ArrayView1::from(logits)).to_vec())
}

pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_finite(logits)?;
    let lse = logsumexp_unchecked(ArrayView1::from(logits));
    Ok(logits.iter().map(|x| x - lse).collect())
}

pub fn logsumexp(values: &[f64]) -> Result<f64> {
    check_finite(values)?;
    Ok(logsumexp_unchecked(ArrayView1::from(values)))
}

pub(crate) fn logsumexp_unchecked(row: ArrayView1<f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_unchecked(row: ArrayView1<f64>) -> Array1<f64> {
    let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut e = row.mapv(|x| (x - max).exp());
    let s = e.sum();
    e /= s;
    e
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Result<Array2<f64>> {
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let mut out = Array2::zeros(logits.raw_dim());
    for (mut dst, src) in out.rows_mut().into_iter().zip(logits.rows()) {
        dst.assign(&softmax_unchecked(src));
    }
    Ok(out)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn argmax_row(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for i in 1..row.len() {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}
