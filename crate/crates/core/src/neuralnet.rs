//! Small fully connected networks with hand-written backpropagation, and Adam.
//!
//! Parameters live in one flat `Vec<f64>`: for each layer the weight matrix
//! (row-major, `out x in`) followed by the bias vector. Gradients and Adam
//! moments use the same layout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation value `a = f(z)`.
    #[inline]
    fn slope(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    hidden_act: Activation,
    out_act: Activation,
    params: Vec<f64>,
    offsets: Vec<usize>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    /// `acts[0]` is the input; `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
    /// Pre-activation of the output layer.
    logits: Vec<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }
}

/// Gradients of a scalar loss with respect to parameters and input.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

fn layer_offsets(dims: &[usize]) -> (Vec<usize>, usize) {
    let mut offsets = Vec::with_capacity(dims.len() - 1);
    let mut at = 0;
    for w in dims.windows(2) {
        offsets.push(at);
        at += w[0] * w[1] + w[1];
    }
    (offsets, at)
}

impl Mlp {
    /// Network with weights uniform in `±scale / sqrt(fan_in)` and zero
    /// biases, deterministic in `seed`.
    pub fn init(
        dims: &[usize],
        hidden_act: Activation,
        out_act: Activation,
        seed: u64,
        scale: f64,
    ) -> Result<Self> {
        let mut net = Self::zeros(dims, hidden_act, out_act)?;
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(Error::invalid(
                "scale",
                format!("must be finite and >= 0, got {scale}"),
            ));
        }
        let mut rng = rng_for(seed, &[0x6d6c70]);
        for (l, &fan_in) in dims[..dims.len() - 1].iter().enumerate() {
            let bound = scale / (fan_in as f64).sqrt();
            let (w, _) = net.layer_mut(l);
            for v in w.iter_mut() {
                *v = bound * (2.0 * rng.random::<f64>() - 1.0);
            }
        }
        Ok(net)
    }

    pub fn zeros(dims: &[usize], hidden_act: Activation, out_act: Activation) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid(
                "dims",
                format!("need >= 2 non-zero layer sizes, got {dims:?}"),
            ));
        }
        let (offsets, total) = layer_offsets(dims);
        Ok(Self {
            dims: dims.to_vec(),
            hidden_act,
            out_act,
            params: vec![0.0; total],
            offsets,
        })
    }

    /// Builds a network from per-layer weight matrices (`out x in`, row-major
    /// nesting) and bias vectors.
    pub fn from_layers(
        dims: &[usize],
        hidden_act: Activation,
        out_act: Activation,
        weights: &[Vec<Vec<f64>>],
        biases: &[Vec<f64>],
    ) -> Result<Self> {
        let mut net = Self::zeros(dims, hidden_act, out_act)?;
        let layers = net.n_layers();
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::Dimension {
                expected: layers,
                got: weights.len().min(biases.len()),
            });
        }
        for l in 0..layers {
            let (n_in, n_out) = (dims[l], dims[l + 1]);
            let (w, b) = net.layer_mut(l);
            if weights[l].len() != n_out || biases[l].len() != n_out {
                return Err(Error::Dimension {
                    expected: n_out,
                    got: weights[l].len(),
                });
            }
            for (o, row) in weights[l].iter().enumerate() {
                if row.len() != n_in {
                    return Err(Error::Dimension {
                        expected: n_in,
                        got: row.len(),
                    });
                }
                w[o * n_in..(o + 1) * n_in].copy_from_slice(row);
            }
            b.copy_from_slice(&biases[l]);
        }
        net.check_finite()?;
        Ok(net)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("at least two layers")
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_act
    }

    pub fn output_activation(&self) -> Activation {
        self.out_act
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Weights and biases of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
        let start = self.offsets[l];
        let w = &self.params[start..start + n_in * n_out];
        let b = &self.params[start + n_in * n_out..start + n_in * n_out + n_out];
        (w, b)
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
        let start = self.offsets[l];
        let (w, rest) = self.params[start..].split_at_mut(n_in * n_out);
        (w, &mut rest[..n_out])
    }

    /// Weight matrix of layer `l` as nested rows.
    pub fn weight_rows(&self, l: usize) -> Vec<Vec<f64>> {
        let n_in = self.dims[l];
        self.layer(l).0.chunks(n_in).map(<[f64]>::to_vec).collect()
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.params.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("network parameter {i}")));
        }
        Ok(())
    }

    fn act(&self, l: usize) -> Activation {
        if l + 1 == self.n_layers() {
            self.out_act
        } else {
            self.hidden_act
        }
    }

    pub fn new_cache(&self) -> ForwardCache {
        ForwardCache {
            acts: self.dims.iter().map(|&d| vec![0.0; d]).collect(),
            logits: vec![0.0; self.output_dim()],
        }
    }

    /// Forward pass reusing `cache`. Returns the network output.
    pub fn forward_into<'c>(&self, x: &[f64], cache: &'c mut ForwardCache) -> Result<&'c [f64]> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        if cache.acts.len() != self.dims.len() {
            *cache = self.new_cache();
        }
        cache.acts[0].copy_from_slice(x);
        let last = self.n_layers() - 1;
        for l in 0..self.n_layers() {
            let (w, b) = self.layer(l);
            let n_in = self.dims[l];
            let act = self.act(l);
            let (before, after) = cache.acts.split_at_mut(l + 1);
            let input = &before[l];
            let out = &mut after[0];
            for (o, z_out) in out.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                let z = b[o] + dot(row, input);
                if l == last {
                    cache.logits[o] = z;
                }
                *z_out = act.apply(z);
            }
        }
        Ok(cache.acts.last().expect("output layer"))
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        let mut cache = self.new_cache();
        let out = self.forward_into(x, &mut cache)?.to_vec();
        Ok((out, cache))
    }

    /// Gradients of `sum(grad_output * output)` through the network.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &[f64]) -> Result<Gradients> {
        if grad_output.len() != self.output_dim() || cache.acts.len() != self.dims.len() {
            return Err(Error::Dimension {
                expected: self.output_dim(),
                got: grad_output.len(),
            });
        }
        let out = cache.output();
        let grad_logits: Vec<f64> = grad_output
            .iter()
            .zip(out)
            .map(|(g, &a)| g * self.out_act.slope(a))
            .collect();
        let mut params = vec![0.0; self.n_params()];
        let mut input = vec![0.0; self.input_dim()];
        self.backward_logits(cache, &grad_logits, &mut params, Some(&mut input));
        Ok(Gradients { params, input })
    }

    /// Accumulates into `grads` the parameter gradient of
    /// `sum(grad_logits * logits)`, where logits are the output pre-activations.
    pub fn accumulate_logit_grad(
        &self,
        cache: &ForwardCache,
        grad_logits: &[f64],
        grads: &mut [f64],
    ) {
        debug_assert_eq!(grads.len(), self.n_params());
        self.backward_logits(cache, grad_logits, grads, None);
    }

    fn backward_logits(
        &self,
        cache: &ForwardCache,
        grad_logits: &[f64],
        grads: &mut [f64],
        input_grad: Option<&mut [f64]>,
    ) {
        let mut delta = grad_logits.to_vec();
        let mut prev = Vec::new();
        for l in (0..self.n_layers()).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let a_in = &cache.acts[l];
            let start = self.offsets[l];
            let (gw, rest) = grads[start..].split_at_mut(n_in * n_out);
            let gb = &mut rest[..n_out];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                for (g, &a) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(a_in) {
                    *g += d * a;
                }
            }
            if l == 0 && input_grad.is_none() {
                break;
            }
            let (w, _) = self.layer(l);
            prev.clear();
            prev.resize(n_in, 0.0);
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (p, &wv) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *p += d * wv;
                }
            }
            if l > 0 {
                let act = self.hidden_act;
                for (p, &a) in prev.iter_mut().zip(a_in) {
                    *p *= act.slope(a);
                }
            }
            std::mem::swap(&mut delta, &mut prev);
        }
        if let Some(ig) = input_grad {
            ig.copy_from_slice(&delta);
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorise without reassociation.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for k in 0..4 {
            acc[k] += a[4 * c + k] * b[4 * c + k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..a.len() {
        s += a[k] * b[k];
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Ascent,
    Descent,
}

/// Adam optimiser state for one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n_params: usize, eps: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients before
/// touching any state.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    direction: Direction,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(Error::Dimension {
            expected: params.len(),
            got: grads.len(),
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient component {i}")));
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let sign = match direction {
        Direction::Ascent => 1.0,
        Direction::Descent => -1.0,
    };
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p += sign * lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}
