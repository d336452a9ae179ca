//! Dense feed-forward networks with exact reverse-mode gradients.
//!
//! Parameters are stored as a flat list of named tensors: for layer `k`,
//! `layer{k}.weight` (shape `[out, in]`, row-major) followed by
//! `layer{k}.bias` (shape `[out]`). Forward and backward passes work on
//! row-major batches (`batch x width`).

mod checkpoint;
mod optim;
mod store;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use optim::{clip_by_norm, OptimizerConfig, RmsPropState};
pub use store::{ModelGradients, ModelParams, ParameterStore, Snapshot};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - post * post,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputHead {
    Softmax,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_width: usize,
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
    pub output_width: usize,
    pub output_head: OutputHead,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0
            || self.output_width == 0
            || self.hidden_layers.iter().any(|&w| w == 0)
        {
            return Err(Error::Shape(format!("layer widths must be >= 1: {self:?}")));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width];
        w.extend_from_slice(&self.hidden_layers);
        w.push(self.output_width);
        w
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_layers.len() + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            name: name.into(),
            shape,
            data: vec![0.0; n],
        }
    }
}

/// Gradients mirroring an [`Mlp`]'s parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub tensors: Vec<Tensor>,
}

impl GradientSet {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        GradientSet {
            tensors: params
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|g| *g *= s);
        }
    }

    pub fn add_scaled(&mut self, other: &GradientSet, s: f64) -> Result<()> {
        check_shapes(&self.tensors, &other.tensors)?;
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += s * y);
        }
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        for t in &self.tensors {
            if t.data.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient {}", t.name)));
            }
        }
        Ok(())
    }
}

pub(crate) fn check_shapes(a: &[Tensor], b: &[Tensor]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} tensors vs {}", a.len(), b.len())));
    }
    for (x, y) in a.iter().zip(b) {
        if x.shape != y.shape {
            return Err(Error::Shape(format!(
                "{} {:?} vs {} {:?}",
                x.name, x.shape, y.name, y.shape
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: Vec<Tensor>,
}

/// Activations retained from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub batch: usize,
    input: Vec<f64>,
    /// Per layer: pre-activation values.
    pre: Vec<Vec<f64>>,
    /// Per layer: activation outputs (the last entry is the head output).
    post: Vec<Vec<f64>>,
}

impl ForwardCache {
    /// Head output, `batch x output_width`.
    pub fn output(&self) -> &[f64] {
        self.post.last().expect("at least one layer")
    }

    /// Final-layer values before the head.
    pub fn logits(&self) -> &[f64] {
        self.pre.last().expect("at least one layer")
    }

    pub fn row(&self, b: usize) -> &[f64] {
        let out = self.output();
        let w = out.len() / self.batch;
        &out[b * w..(b + 1) * w]
    }
}

impl Mlp {
    /// Zero-initialized network.
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let widths = spec.widths();
        let mut params = Vec::with_capacity(2 * spec.num_layers());
        for k in 0..spec.num_layers() {
            params.push(Tensor::zeros(format!("layer{k}.weight"), vec![widths[k + 1], widths[k]]));
            params.push(Tensor::zeros(format!("layer{k}.bias"), vec![widths[k + 1]]));
        }
        Ok(Mlp { spec, params })
    }

    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        for k in 0..net.spec.num_layers() {
            let w = &mut net.params[2 * k];
            let (fan_out, fan_in) = (w.shape[0], w.shape[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for x in &mut w.data {
                *x = rng.random_range(-limit..limit);
            }
        }
        Ok(net)
    }

    pub fn input_width(&self) -> usize {
        self.spec.input_width
    }

    pub fn output_width(&self) -> usize {
        self.spec.output_width
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|t| t.data.len()).sum()
    }

    pub fn weight(&self, k: usize) -> &Tensor {
        &self.params[2 * k]
    }

    pub fn bias(&self, k: usize) -> &Tensor {
        &self.params[2 * k + 1]
    }

    pub fn bias_mut(&mut self, k: usize) -> &mut Tensor {
        &mut self.params[2 * k + 1]
    }

    pub fn forward(&self, input: &[f64], batch: usize) -> Result<ForwardCache> {
        let in_w = self.spec.input_width;
        if batch == 0 || input.len() != batch * in_w {
            return Err(Error::WidthMismatch {
                expected: batch * in_w,
                got: input.len(),
            });
        }
        let layers = self.spec.num_layers();
        let mut pre = Vec::with_capacity(layers);
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(layers);
        for k in 0..layers {
            let x: &[f64] = if k == 0 { input } else { &post[k - 1] };
            let (w, b) = (self.weight(k), self.bias(k));
            let (out_w, in_w) = (w.shape[0], w.shape[1]);
            let mut z = Vec::with_capacity(batch * out_w);
            for _ in 0..batch {
                z.extend_from_slice(&b.data);
            }
            // z += x * W^T
            unsafe {
                matrixmultiply::dgemm(
                    batch,
                    in_w,
                    out_w,
                    1.0,
                    x.as_ptr(),
                    in_w as isize,
                    1,
                    w.data.as_ptr(),
                    1,
                    in_w as isize,
                    1.0,
                    z.as_mut_ptr(),
                    out_w as isize,
                    1,
                );
            }
            let a = if k + 1 < layers {
                z.iter().map(|&v| self.spec.activation.apply(v)).collect()
            } else {
                match self.spec.output_head {
                    OutputHead::Linear => z.clone(),
                    OutputHead::Softmax => softmax_rows(&z, out_w),
                }
            };
            pre.push(z);
            post.push(a);
        }
        Ok(ForwardCache {
            batch,
            input: input.to_vec(),
            pre,
            post,
        })
    }

    /// Single-sample convenience wrapper returning the head output.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(input, 1)?.output().to_vec())
    }

    /// Backpropagates a gradient with respect to the head output.
    pub fn backward(&self, cache: &ForwardCache, d_output: &[f64]) -> Result<GradientSet> {
        let out_w = self.spec.output_width;
        if d_output.len() != cache.batch * out_w {
            return Err(Error::WidthMismatch {
                expected: cache.batch * out_w,
                got: d_output.len(),
            });
        }
        match self.spec.output_head {
            OutputHead::Linear => self.backward_from_logits(cache, d_output),
            OutputHead::Softmax => {
                let p = cache.output();
                let mut d = vec![0.0; d_output.len()];
                for b in 0..cache.batch {
                    let r = b * out_w..(b + 1) * out_w;
                    let (pr, gr) = (&p[r.clone()], &d_output[r.clone()]);
                    let dot: f64 = pr.iter().zip(gr).map(|(a, c)| a * c).sum();
                    for (j, dj) in d[r].iter_mut().enumerate() {
                        *dj = pr[j] * (gr[j] - dot);
                    }
                }
                self.backward_from_logits(cache, &d)
            }
        }
    }

    /// Backpropagates a gradient with respect to the final pre-head values.
    pub fn backward_from_logits(&self, cache: &ForwardCache, d_logits: &[f64]) -> Result<GradientSet> {
        let batch = cache.batch;
        let layers = self.spec.num_layers();
        if d_logits.len() != batch * self.spec.output_width {
            return Err(Error::WidthMismatch {
                expected: batch * self.spec.output_width,
                got: d_logits.len(),
            });
        }
        let mut grads = GradientSet::zeros_like(&self.params);
        let mut dz = d_logits.to_vec();
        for k in (0..layers).rev() {
            let w = self.weight(k);
            let (out_w, in_w) = (w.shape[0], w.shape[1]);
            let x: &[f64] = if k == 0 { &cache.input } else { &cache.post[k - 1] };
            {
                let (gw, rest) = grads.tensors.split_at_mut(2 * k + 1);
                let gw = &mut gw[2 * k];
                let gb = &mut rest[0];
                // dW = dZ^T X
                unsafe {
                    matrixmultiply::dgemm(
                        out_w,
                        batch,
                        in_w,
                        1.0,
                        dz.as_ptr(),
                        1,
                        out_w as isize,
                        x.as_ptr(),
                        in_w as isize,
                        1,
                        0.0,
                        gw.data.as_mut_ptr(),
                        in_w as isize,
                        1,
                    );
                }
                for row in dz.chunks_exact(out_w) {
                    gb.data.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                }
                if gw.data.iter().chain(&gb.data).any(|g| !g.is_finite()) {
                    return Err(Error::NonFinite(format!("layer{k} gradient")));
                }
            }
            if k == 0 {
                break;
            }
            // dX = dZ W, then through the hidden activation
            let mut dx = vec![0.0; batch * in_w];
            unsafe {
                matrixmultiply::dgemm(
                    batch,
                    out_w,
                    in_w,
                    1.0,
                    dz.as_ptr(),
                    out_w as isize,
                    1,
                    w.data.as_ptr(),
                    in_w as isize,
                    1,
                    0.0,
                    dx.as_mut_ptr(),
                    in_w as isize,
                    1,
                );
            }
            let (pre, post) = (&cache.pre[k - 1], &cache.post[k - 1]);
            for ((d, &p), &a) in dx.iter_mut().zip(pre).zip(post) {
                *d *= self.spec.activation.derivative(p, a);
            }
            if dx.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("layer{} activation gradient", k - 1)));
            }
            dz = dx;
        }
        Ok(grads)
    }
}

pub fn softmax_rows(z: &[f64], width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(z.len());
    for row in z.chunks_exact(width) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

/// Actor and critic network shapes for a given observation layout.
pub fn actor_spec(input_width: usize, hidden: &[usize], activation: Activation, num_actions: usize) -> MlpSpec {
    MlpSpec {
        input_width,
        hidden_layers: hidden.to_vec(),
        activation,
        output_width: num_actions,
        output_head: OutputHead::Softmax,
    }
}

/// The critic's last output is the state-value head; the first
/// `num_actions` outputs are the per-action values.
pub fn critic_spec(aug_width: usize, hidden: &[usize], activation: Activation, num_actions: usize) -> MlpSpec {
    MlpSpec {
        input_width: aug_width + crate::netmodel::NUM_SLOTS * num_actions,
        hidden_layers: hidden.to_vec(),
        activation,
        output_width: num_actions + 1,
        output_head: OutputHead::Linear,
    }
}

pub fn actor_forward(actor: &Mlp, z_aug: &[f64]) -> Result<Vec<f64>> {
    if actor.spec.output_head != OutputHead::Softmax {
        return Err(Error::Shape("actor requires a softmax head".into()));
    }
    actor.predict(z_aug)
}

/// Per-own-action values given the augmented observation and the
/// one-hot-encoded neighbor actions.
pub fn critic_forward(critic: &Mlp, z_aug: &[f64], neighbor_actions_onehot: &[f64]) -> Result<Vec<f64>> {
    let num_actions = critic.spec.output_width - 1;
    let mut input = Vec::with_capacity(z_aug.len() + neighbor_actions_onehot.len());
    input.extend_from_slice(z_aug);
    input.extend_from_slice(neighbor_actions_onehot);
    let mut out = critic.predict(&input)?;
    out.truncate(num_actions);
    Ok(out)
}

/// Largest relative error between analytic gradients and central finite
/// differences of `L = sum(upstream * output)`, over every parameter.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)`; the floor keeps
/// round-off in near-zero gradients from dominating.
pub fn gradient_check(net: &Mlp, input: &[f64], batch: usize, upstream: &[f64], eps: f64, floor: f64) -> Result<f64> {
    let loss = |m: &Mlp| -> Result<f64> {
        let c = m.forward(input, batch)?;
        Ok(c.output().iter().zip(upstream).map(|(o, u)| o * u).sum())
    };
    let cache = net.forward(input, batch)?;
    let analytic = net.backward(&cache, upstream)?;
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for (ti, g) in analytic.tensors.iter().enumerate() {
        for (j, &a) in g.data.iter().enumerate() {
            let orig = probe.params[ti].data[j];
            probe.params[ti].data[j] = orig + eps;
            let up = loss(&probe)?;
            probe.params[ti].data[j] = orig - eps;
            let down = loss(&probe)?;
            probe.params[ti].data[j] = orig;
            let n = (up - down) / (2.0 * eps);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
