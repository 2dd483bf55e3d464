//! Feed-forward embedding network with hand-written backpropagation.
//!
//! The network is a stack of affine layers with ReLU on every hidden layer
//! and identity on the output layer, followed by [`norm_clip`]. All
//! parameters live in one flat `Vec<f64>` so that snapshots, the projection
//! regularizer and the optimizer work on plain slices. Layer `l` stores its
//! weights row-major (`out × in`) followed by its biases.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

/// Identity inside the closed unit ball, radial projection outside.
pub fn norm_clip(v: &[f64]) -> Vec<f64> {
    let n = crate::dot(v, v).sqrt();
    if n <= 1.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

pub fn norm_clip_in_place(v: &mut [f64]) {
    let n = crate::dot(v, v).sqrt();
    if n > 1.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Vector-Jacobian product of [`norm_clip`] at `v` with upstream `g`.
///
/// On the unit sphere the identity branch is used.
pub fn norm_clip_backward(v: &[f64], g: &[f64]) -> Vec<f64> {
    let n = crate::dot(v, v).sqrt();
    if n <= 1.0 {
        return g.to_vec();
    }
    // d(v/|v|) = (I - u u^T) / |v|,  u = v/|v|
    let ug = crate::dot(v, g) / n;
    v.iter()
        .zip(g)
        .map(|(vi, gi)| (gi - ug * vi / n) / n)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingNetwork {
    layer_dims: Vec<usize>,
    params: Vec<f64>,
    /// Start offset of each layer's weight block in `params`.
    offsets: Vec<usize>,
}

/// Activations kept from a batched forward pass for [`EmbeddingNetwork::backward_cached`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    inputs: Vec<f64>,
    /// Post-activation output of every layer; the last entry is the raw
    /// (pre-clip) network output.
    activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Pre-clip outputs, `B × D`.
    pub fn raw_outputs(&self) -> &[f64] {
        self.activations.last().expect("network has at least one layer")
    }
}

impl EmbeddingNetwork {
    /// All-zero network with the given layer widths.
    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidArgument(
                "network needs an input and an output dimension".into(),
            ));
        }
        if layer_dims.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        let mut offsets = Vec::with_capacity(layer_dims.len() - 1);
        let mut total = 0;
        for w in layer_dims.windows(2) {
            offsets.push(total);
            total += w[0] * w[1] + w[1];
        }
        Ok(EmbeddingNetwork {
            layer_dims: layer_dims.to_vec(),
            params: vec![0.0; total],
            offsets,
        })
    }

    /// He-normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(layer_dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(layer_dims)?;
        for l in 0..net.num_layers() {
            let fan_in = net.layer_dims[l] as f64;
            let std = if l + 1 < net.num_layers() {
                (2.0 / fan_in).sqrt()
            } else {
                (1.0 / fan_in).sqrt()
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            for w in net.weights_mut(l) {
                *w = normal.sample(rng);
            }
        }
        Ok(net)
    }

    /// Build from explicit per-layer `(weights row-major, biases)`.
    pub fn from_layers(layer_dims: &[usize], layers: &[(Vec<f64>, Vec<f64>)]) -> Result<Self> {
        let mut net = Self::zeros(layer_dims)?;
        if layers.len() != net.num_layers() {
            return Err(Error::shape("layer count", net.num_layers(), layers.len()));
        }
        for (l, (w, b)) in layers.iter().enumerate() {
            let (rows, cols) = net.layer_shape(l);
            if w.len() != rows * cols {
                return Err(Error::shape("layer weights", rows * cols, w.len()));
            }
            if b.len() != rows {
                return Err(Error::shape("layer biases", rows, b.len()));
            }
            net.weights_mut(l).copy_from_slice(w);
            net.biases_mut(l).copy_from_slice(b);
        }
        net.check_finite()?;
        Ok(net)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// `(out, in)` of layer `l`.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.layer_dims[l + 1], self.layer_dims[l])
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::shape("parameter vector", self.params.len(), params.len()));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn weights(&self, l: usize) -> &[f64] {
        let (o, i) = self.layer_shape(l);
        &self.params[self.offsets[l]..self.offsets[l] + o * i]
    }

    pub fn weights_mut(&mut self, l: usize) -> &mut [f64] {
        let (o, i) = self.layer_shape(l);
        let s = self.offsets[l];
        &mut self.params[s..s + o * i]
    }

    pub fn biases(&self, l: usize) -> &[f64] {
        let (o, i) = self.layer_shape(l);
        let s = self.offsets[l] + o * i;
        &self.params[s..s + o]
    }

    pub fn biases_mut(&mut self, l: usize) -> &mut [f64] {
        let (o, i) = self.layer_shape(l);
        let s = self.offsets[l] + o * i;
        &mut self.params[s..s + o]
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.params.iter().position(|p| !p.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!("parameter {i} is not finite"))),
        }
    }

    /// Embedding of a single input, norm-clipped.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(norm_clip(&self.forward_raw(x)?))
    }

    /// Output of the affine/ReLU stack without the final norm clip.
    pub fn forward_raw(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::shape("network input", self.input_dim(), x.len()));
        }
        let mut cur = x.to_vec();
        for l in 0..self.num_layers() {
            let mut next = self.affine(l, &cur);
            if l + 1 < self.num_layers() {
                relu_in_place(&mut next);
            }
            cur = next;
        }
        Ok(cur)
    }

    fn affine(&self, l: usize, x: &[f64]) -> Vec<f64> {
        let (rows, cols) = self.layer_shape(l);
        let w = self.weights(l);
        let b = self.biases(l);
        (0..rows)
            .map(|r| crate::dot(&w[r * cols..(r + 1) * cols], x) + b[r])
            .collect()
    }

    /// Norm-clipped embeddings of a row-major batch of inputs.
    pub fn embed_batch(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        let (out, _) = self.forward_batch(inputs)?;
        Ok(out)
    }

    /// Batched forward pass returning clipped outputs (`B × D`) and the cache
    /// needed for the backward pass.
    pub fn forward_batch(&self, inputs: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        let d0 = self.input_dim();
        if inputs.len() % d0 != 0 {
            return Err(Error::shape("batch input", d0, inputs.len() % d0));
        }
        let batch = inputs.len() / d0;
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(self.num_layers());
        for l in 0..self.num_layers() {
            let (rows, cols) = self.layer_shape(l);
            let src: &[f64] = if l == 0 { inputs } else { &activations[l - 1] };
            let w = self.weights(l);
            let b = self.biases(l);
            let hidden = l + 1 < self.num_layers();
            let mut out = vec![0.0; batch * rows];
            for s in 0..batch {
                let x = &src[s * cols..(s + 1) * cols];
                for r in 0..rows {
                    let mut z = crate::dot(&w[r * cols..(r + 1) * cols], x) + b[r];
                    if hidden && z < 0.0 {
                        z = 0.0;
                    }
                    out[s * rows + r] = z;
                }
            }
            activations.push(out);
        }
        let d = self.output_dim();
        let raw = activations.last().unwrap();
        let mut clipped = Vec::with_capacity(raw.len());
        for s in 0..batch {
            clipped.extend(norm_clip(&raw[s * d..(s + 1) * d]));
        }
        let cache = ForwardCache {
            batch,
            inputs: inputs.to_vec(),
            activations,
        };
        Ok((clipped, cache))
    }

    /// Parameter gradient `(1/B) Σ_s J_s^T g_s` where `g_s` is the upstream
    /// gradient with respect to the clipped output of sample `s`.
    pub fn backward(&self, inputs: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let (_, cache) = self.forward_batch(inputs)?;
        self.backward_cached(&cache, upstream)
    }

    pub fn backward_cached(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<Vec<f64>> {
        let d = self.output_dim();
        let batch = cache.batch;
        if upstream.len() != batch * d {
            return Err(Error::shape("upstream gradient", batch * d, upstream.len()));
        }
        let mut grads = vec![0.0; self.params.len()];
        if batch == 0 {
            return Ok(grads);
        }
        let raw = cache.raw_outputs();
        let mut delta = Vec::with_capacity(batch * d);
        for s in 0..batch {
            delta.extend(norm_clip_backward(
                &raw[s * d..(s + 1) * d],
                &upstream[s * d..(s + 1) * d],
            ));
        }
        for l in (0..self.num_layers()).rev() {
            let (rows, cols) = self.layer_shape(l);
            let src: &[f64] = if l == 0 {
                &cache.inputs
            } else {
                &cache.activations[l - 1]
            };
            let w_off = self.offsets[l];
            let b_off = w_off + rows * cols;
            for s in 0..batch {
                let x = &src[s * cols..(s + 1) * cols];
                let g = &delta[s * rows..(s + 1) * rows];
                for r in 0..rows {
                    if g[r] == 0.0 {
                        continue;
                    }
                    let gw = &mut grads[w_off + r * cols..w_off + (r + 1) * cols];
                    for (acc, xi) in gw.iter_mut().zip(x) {
                        *acc += g[r] * xi;
                    }
                    grads[b_off + r] += g[r];
                }
            }
            if l > 0 {
                let w = self.weights(l);
                let mut next = vec![0.0; batch * cols];
                for s in 0..batch {
                    let g = &delta[s * rows..(s + 1) * rows];
                    let a = &src[s * cols..(s + 1) * cols];
                    let out = &mut next[s * cols..(s + 1) * cols];
                    for r in 0..rows {
                        if g[r] == 0.0 {
                            continue;
                        }
                        let wr = &w[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            out[c] += wr[c] * g[r];
                        }
                    }
                    // ReLU mask; the stored activation is zero exactly when inactive.
                    for c in 0..cols {
                        if a[c] <= 0.0 {
                            out[c] = 0.0;
                        }
                    }
                }
                delta = next;
            }
        }
        let inv = 1.0 / batch as f64;
        grads.iter_mut().for_each(|g| *g *= inv);
        Ok(grads)
    }

    /// Maximum absolute weight sum per neuron over all layers.
    ///
    /// Both the fan-in sum (per output neuron) and the fan-out sum (per input
    /// neuron) are taken into account, so `omega()^L` bounds the product of
    /// layer spectral norms and is a valid Lipschitz constant of the
    /// pre-clip network.
    pub fn omega(&self) -> f64 {
        let mut best: f64 = 0.0;
        for l in 0..self.num_layers() {
            let (rows, cols) = self.layer_shape(l);
            let w = self.weights(l);
            for r in 0..rows {
                let s: f64 = w[r * cols..(r + 1) * cols].iter().map(|x| x.abs()).sum();
                best = best.max(s);
            }
            for c in 0..cols {
                let s: f64 = (0..rows).map(|r| w[r * cols + c].abs()).sum();
                best = best.max(s);
            }
        }
        best
    }

    /// `√2 · ω^L`: Lipschitz constant of the generalized contrastive loss in
    /// the stacked input pair, for the network without output clipping.
    pub fn pair_loss_lipschitz_bound(&self) -> f64 {
        std::f64::consts::SQRT_2 * self.omega().powi(self.num_layers() as i32)
    }

    /// Write a checkpoint file.
    ///
    /// Layout, all integers and floats little-endian:
    ///
    /// ```text
    /// magic        8 bytes  "CCPDMLNT"
    /// version      u32      1
    /// n_dims       u32      number of entries in layer_dims
    /// layer_dims   n_dims × u64
    /// per layer l: weights (out × in, row-major) then biases (out), f64 each
    /// ```
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let bytes = self.checkpoint_bytes();
        crate::runner::write_atomic(path, &bytes)
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * (self.layer_dims.len() + self.params.len()));
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layer_dims.len() as u32).to_le_bytes());
        for d in &self.layer_dims {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::file(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let chunk = bytes
                .get(pos..pos + n)
                .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
            pos += n;
            Ok(chunk)
        };
        if take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n_dims = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut dims = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            dims.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let mut net = Self::zeros(&dims)?;
        for p in net.params.iter_mut() {
            *p = f64::from_le_bytes(take(8)?.try_into().unwrap());
        }
        if pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        net.check_finite()?;
        Ok(net)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CCPDMLNT";
const CHECKPOINT_VERSION: u32 = 1;

fn relu_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| {
        if *x < 0.0 {
            *x = 0.0
        }
    });
}

/// Optimizer settings shared by [`AdamState`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
}

impl AdamState {
    pub fn new(num_params: usize, config: AdamConfig) -> Self {
        AdamState {
            config,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update of `params` in place. A non-finite gradient rejects the
    /// whole update and leaves both `params` and the state untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(Error::shape("adam parameters", self.first_moment.len(), params.len()));
        }
        if grads.len() != params.len() {
            return Err(Error::shape("adam gradients", params.len(), grads.len()));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("gradient entry {i} is not finite")));
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            if weight_decay != 0.0 {
                *p -= lr * weight_decay * *p;
            }
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Adam update of a network's parameters.
pub fn adam_step(net: &mut EmbeddingNetwork, grads: &[f64], state: &mut AdamState) -> Result<()> {
    state.step(net.params_mut(), grads)
}

/// Write `bytes` through a [`Write`] sink, used by the checkpoint tests.
#[doc(hidden)]
pub fn write_checkpoint_to<W: Write>(net: &EmbeddingNetwork, mut w: W) -> Result<()> {
    w.write_all(&net.checkpoint_bytes())?;
    Ok(())
}
