//! Siamese dense encoder and difference head with analytic gradients.
//!
//! The encoder maps a flattened latent through dense layers with ReLU between
//! them (none after the last) to a feature vector. The head maps `|u - v|`
//! through one hidden ReLU layer to a single logit; the same-identity
//! probability is its sigmoid.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Error, Result};
use crate::linalg::{gemm, Op};
use crate::rng::{self, tag};
use crate::world::LatentSample;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub input: usize,
    pub encoder_hidden: Vec<usize>,
    pub feature: usize,
    pub head_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims { input: 256, encoder_hidden: vec![256, 128], feature: 64, head_hidden: 32 }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.feature == 0 || self.head_hidden == 0 || self.encoder_hidden.contains(&0) {
            return Err(config_err!("model dimensions must be positive: {self:?}"));
        }
        Ok(())
    }

    /// `(inputs, outputs)` of every encoder layer.
    pub fn encoder_layers(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input];
        widths.extend_from_slice(&self.encoder_hidden);
        widths.push(self.feature);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn head_layers(&self) -> [(usize, usize); 2] {
        [(self.feature, self.head_hidden), (self.head_hidden, 1)]
    }
}

/// A dense layer `y = W x + b` with `W` row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub grad_weight: Vec<f64>,
    pub grad_bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            grad_weight: vec![0.0; inputs * outputs],
            grad_bias: vec![0.0; outputs],
        }
    }

    /// He-uniform weights (std `sqrt(2 / fan_in)`), zero bias.
    fn he_uniform(inputs: usize, outputs: usize, rng: &mut rng::Rng) -> Self {
        let mut layer = Dense::zeros(inputs, outputs);
        let limit = libm::sqrt(6.0 / inputs as f64);
        for w in layer.weight.iter_mut() {
            *w = rng.gen_range(-limit..limit);
        }
        layer
    }

    /// `out = x W^T + b` for `rows` input rows.
    fn forward(&self, x: &[f64], rows: usize, out: &mut Vec<f64>) {
        out.clear();
        out.reserve(rows * self.outputs);
        for _ in 0..rows {
            out.extend_from_slice(&self.bias);
        }
        gemm(rows, self.inputs, self.outputs, 1.0, x, Op::N, &self.weight, Op::T, 1.0, out);
    }

    /// Accumulates parameter gradients for upstream `dy` and returns `dx`.
    fn backward(&mut self, x: &[f64], dy: &[f64], rows: usize, want_dx: bool) -> Vec<f64> {
        gemm(self.outputs, rows, self.inputs, 1.0, dy, Op::T, x, Op::N, 1.0, &mut self.grad_weight);
        for r in 0..rows {
            for (g, d) in self.grad_bias.iter_mut().zip(&dy[r * self.outputs..(r + 1) * self.outputs]) {
                *g += d;
            }
        }
        if !want_dx {
            return Vec::new();
        }
        let mut dx = vec![0.0; rows * self.inputs];
        gemm(rows, self.outputs, self.inputs, 1.0, dy, Op::N, &self.weight, Op::N, 0.0, &mut dx);
        dx
    }
}

/// A feature vector `u = S(z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Encoder + head weights with gradient buffers of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub encoder: Vec<Dense>,
    pub head: [Dense; 2],
}

/// Cached activations of one encoder pass over a batch of rows.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    rows: usize,
    /// `acts[0]` is the input; `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
}

impl EncoderTrace {
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Row-major `rows x feature` output.
    pub fn features(&self) -> &[f64] {
        self.acts.last().expect("trace has at least input and output")
    }
}

/// Cached activations of the head over `rows` pairs.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    rows: usize,
    diff: Vec<f64>,
    sign: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

impl HeadTrace {
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

/// Forward state of a pair batch: one encoder pass over `[left; right]`
/// (2B rows) and the head over the B pairs `(i, B + i)`.
#[derive(Debug, Clone)]
pub struct SiameseTrace {
    pub encoder: EncoderTrace,
    pub head: HeadTrace,
}

impl SiameseTrace {
    pub fn pairs(&self) -> usize {
        self.head.rows
    }
}

/// Upstream gradients for [`ModelParams::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    /// `dL/du` for every encoder row, row-major `2B x feature`.
    pub features: Vec<f64>,
    /// `dL/dlogit` per pair.
    pub logits: Vec<f64>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

impl ModelParams {
    pub fn init(seed: u64, dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let mut rng = rng::stream(seed, tag::INIT);
        let encoder = dims.encoder_layers().into_iter().map(|(i, o)| Dense::he_uniform(i, o, &mut rng)).collect();
        let [h0, h1] = dims.head_layers();
        let head = [Dense::he_uniform(h0.0, h0.1, &mut rng), Dense::he_uniform(h1.0, h1.1, &mut rng)];
        Ok(ModelParams { dims, encoder, head })
    }

    /// All-zero weights and biases.
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let encoder = dims.encoder_layers().into_iter().map(|(i, o)| Dense::zeros(i, o)).collect();
        let [h0, h1] = dims.head_layers();
        Ok(ModelParams { dims, encoder, head: [Dense::zeros(h0.0, h0.1), Dense::zeros(h1.0, h1.1)] })
    }

    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.encoder.iter().chain(self.head.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.encoder.iter_mut().chain(self.head.iter_mut())
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for l in self.layers_mut() {
            l.grad_weight.fill(0.0);
            l.grad_bias.fill(0.0);
        }
    }

    /// Calls `f(values, grads)` for every parameter tensor in a fixed order.
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&mut [f64], &[f64])) {
        for l in self.layers_mut() {
            f(&mut l.weight, &l.grad_weight);
            f(&mut l.bias, &l.grad_bias);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers().all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Encoder pass over `rows` flattened inputs.
    pub fn encode_rows(&self, inputs: &[f64], rows: usize) -> Result<EncoderTrace> {
        if inputs.len() != rows * self.dims.input {
            return Err(input_err!("expected {} x {} encoder inputs, got {} values", rows, self.dims.input, inputs.len()));
        }
        let mut acts = Vec::with_capacity(self.encoder.len() + 1);
        acts.push(inputs.to_vec());
        let last = self.encoder.len() - 1;
        for (i, layer) in self.encoder.iter().enumerate() {
            let mut out = Vec::new();
            layer.forward(acts.last().unwrap(), rows, &mut out);
            if i != last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(out);
        }
        Ok(EncoderTrace { rows, acts })
    }

    pub fn encoder_forward(&self, z: &LatentSample) -> Result<FeatureVector> {
        let trace = self.encode_rows(&z.values, 1)?;
        Ok(FeatureVector(trace.features().to_vec()))
    }

    /// Head pass over `rows` pairs of feature rows.
    pub fn head_rows(&self, u: &[f64], v: &[f64], rows: usize) -> Result<HeadTrace> {
        let d = self.dims.feature;
        if u.len() != rows * d || v.len() != rows * d {
            return Err(input_err!("head expects {rows} x {d} features on both sides"));
        }
        let mut diff = Vec::with_capacity(rows * d);
        let mut sign = Vec::with_capacity(rows * d);
        for (a, b) in u.iter().zip(v) {
            let delta = a - b;
            diff.push(delta.abs());
            sign.push(if delta > 0.0 {
                1.0
            } else if delta < 0.0 {
                -1.0
            } else {
                0.0
            });
        }
        let mut hidden = Vec::new();
        self.head[0].forward(&diff, rows, &mut hidden);
        hidden.iter_mut().for_each(|h| *h = h.max(0.0));
        let mut logits = Vec::new();
        self.head[1].forward(&hidden, rows, &mut logits);
        Ok(HeadTrace { rows, diff, sign, hidden, logits })
    }

    /// Same-identity probability `sigmoid(head(|u - v|))`.
    pub fn head_forward(&self, u: &FeatureVector, v: &FeatureVector) -> Result<f64> {
        if u.dim() != self.dims.feature || v.dim() != self.dims.feature {
            return Err(input_err!(
                "feature dimensions {} and {} do not match model dimension {}",
                u.dim(),
                v.dim(),
                self.dims.feature
            ));
        }
        Ok(sigmoid(self.head_logit(&u.0, &v.0)))
    }

    /// Single-pair head logit without allocation of a trace.
    pub fn head_logit(&self, u: &[f64], v: &[f64]) -> f64 {
        let [h0, h1] = &self.head;
        let mut logit = h1.bias[0];
        for j in 0..h0.outputs {
            let w = &h0.weight[j * h0.inputs..(j + 1) * h0.inputs];
            let mut acc = h0.bias[j];
            for k in 0..h0.inputs {
                acc += w[k] * (u[k] - v[k]).abs();
            }
            logit += h1.weight[j] * acc.max(0.0);
        }
        logit
    }

    /// Forward pass of a pair batch with `left` and `right` flattened latents.
    pub fn siamese_forward(&self, left: &[f64], right: &[f64], pairs: usize) -> Result<SiameseTrace> {
        let mut stacked = Vec::with_capacity(left.len() + right.len());
        stacked.extend_from_slice(left);
        stacked.extend_from_slice(right);
        let encoder = self.encode_rows(&stacked, 2 * pairs)?;
        let d = self.dims.feature;
        let feats = encoder.features();
        let head = self.head_rows(&feats[..pairs * d], &feats[pairs * d..], pairs)?;
        Ok(SiameseTrace { encoder, head })
    }

    /// Accumulates parameter gradients for one forward trace. Both branches
    /// share the encoder, so its gradient receives contributions from all
    /// `2B` rows.
    pub fn backward(&mut self, trace: &SiameseTrace, grads: &LossGradients) -> Result<()> {
        let pairs = trace.head.rows;
        let d = self.dims.feature;
        if trace.encoder.rows != 2 * pairs
            || grads.logits.len() != pairs
            || grads.features.len() != 2 * pairs * d
            || trace.encoder.acts.len() != self.encoder.len() + 1
        {
            return Err(Error::State(alloc::format!(
                "backward gradients ({} logits, {} feature values) do not match the forward trace ({} pairs)",
                grads.logits.len(),
                grads.features.len(),
                pairs
            )));
        }

        // Head output layer.
        let [h0, h1] = &mut self.head;
        let mut dhidden = h1.backward(&trace.head.hidden, &grads.logits, pairs, true);
        for (g, &h) in dhidden.iter_mut().zip(&trace.head.hidden) {
            if h <= 0.0 {
                *g = 0.0;
            }
        }
        let ddiff = h0.backward(&trace.head.diff, &dhidden, pairs, true);

        let mut dfeat = grads.features.clone();
        for i in 0..pairs * d {
            let g = ddiff[i] * trace.head.sign[i];
            dfeat[i] += g;
            dfeat[pairs * d + i] -= g;
        }
        self.encoder_backward(&trace.encoder, dfeat)
    }

    /// Backpropagates `dfeat` (`rows x feature`) through the encoder.
    pub fn encoder_backward(&mut self, trace: &EncoderTrace, mut upstream: Vec<f64>) -> Result<()> {
        if upstream.len() != trace.rows * self.dims.feature || trace.acts.len() != self.encoder.len() + 1 {
            return Err(Error::State("encoder gradient does not match the forward trace".into()));
        }
        let n = self.encoder.len();
        for l in (0..n).rev() {
            if l != n - 1 {
                for (g, &a) in upstream.iter_mut().zip(&trace.acts[l + 1]) {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            upstream = self.encoder[l].backward(&trace.acts[l], &upstream, trace.rows, l > 0);
        }
        Ok(())
    }
}
