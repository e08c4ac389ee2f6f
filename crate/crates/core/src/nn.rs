//! Dense networks with hand-written backward passes and an Adam optimizer.
//!
//! Weights are stored `inputs × outputs` and every pass is batched: rows of the
//! input matrix are samples. The last layer may apply different activations to
//! contiguous output segments, which is how the actor realizes the
//! phase / power / displacement decoding of the environment.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IsacError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
    /// Softmax over the whole segment it is applied to.
    Softmax,
}

/// Contiguous output slice with its own activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerActivation {
    Uniform(Activation),
    Segmented(Vec<Segment>),
}

impl LayerActivation {
    fn segments(&self, width: usize) -> Vec<Segment> {
        match self {
            LayerActivation::Uniform(a) => vec![Segment {
                start: 0,
                len: width,
                activation: *a,
            }],
            LayerActivation::Segmented(v) => v.clone(),
        }
    }

    fn validate(&self, width: usize) -> Result<()> {
        if let LayerActivation::Segmented(segments) = self {
            let mut cursor = 0;
            for seg in segments {
                if seg.start != cursor || seg.len == 0 {
                    return Err(IsacError::Config(format!(
                        "output segments must tile the layer contiguously (segment at {} expected at {cursor})",
                        seg.start
                    )));
                }
                cursor += seg.len;
            }
            if cursor != width {
                return Err(IsacError::Dimension {
                    what: "segment map width",
                    expected: width,
                    got: cursor,
                });
            }
        }
        Ok(())
    }

    /// Applies the activation to a batch of pre-activations.
    pub fn apply(&self, z: &Array2<f64>) -> Array2<f64> {
        let mut y = z.clone();
        for seg in self.segments(z.ncols()) {
            let mut block = y.slice_mut(s![.., seg.start..seg.start + seg.len]);
            match seg.activation {
                Activation::Identity => {}
                Activation::Relu => block.mapv_inplace(|v| v.max(0.0)),
                Activation::Tanh => block.mapv_inplace(f64::tanh),
                Activation::Sigmoid => block.mapv_inplace(sigmoid),
                Activation::Softmax => {
                    for mut row in block.axis_iter_mut(Axis(0)) {
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        row.mapv_inplace(|v| (v - max).exp());
                        let sum = row.sum();
                        row.mapv_inplace(|v| v / sum);
                    }
                }
            }
        }
        y
    }

    /// Maps `∂L/∂y` to `∂L/∂z` given the cached pre-activation and output.
    fn backward(&self, z: &Array2<f64>, y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        let mut dz = dy.clone();
        for seg in self.segments(z.ncols()) {
            let cols = s![.., seg.start..seg.start + seg.len];
            let mut block = dz.slice_mut(cols);
            let zb = z.slice(cols);
            let yb = y.slice(cols);
            match seg.activation {
                Activation::Identity => {}
                Activation::Relu => Zip::from(&mut block).and(&zb).for_each(|d, &zv| {
                    if zv <= 0.0 {
                        *d = 0.0;
                    }
                }),
                Activation::Tanh => Zip::from(&mut block).and(&yb).for_each(|d, &yv| *d *= 1.0 - yv * yv),
                Activation::Sigmoid => Zip::from(&mut block).and(&yb).for_each(|d, &yv| *d *= yv * (1.0 - yv)),
                Activation::Softmax => {
                    for (mut drow, yrow) in block.axis_iter_mut(Axis(0)).zip(yb.axis_iter(Axis(0))) {
                        let inner: f64 = drow.iter().zip(yrow.iter()).map(|(d, y)| d * y).sum();
                        Zip::from(&mut drow).and(&yrow).for_each(|d, &yv| *d = yv * (*d - inner));
                    }
                }
            }
        }
        dz
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `inputs × outputs`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: LayerActivation,
}

impl DenseLayer {
    pub fn inputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weights.ncols()
    }

    fn pre_activation(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weights);
        z += &self.bias;
        z
    }
}

/// Gradient of a scalar loss with respect to one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<LayerGrad>);

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.0
            .iter()
            .all(|g| g.weights.iter().all(|v| v.is_finite()) && g.bias.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|g| g.weights.iter().chain(g.bias.iter()))
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    /// Pre-activation of the last layer.
    pub fn logits(&self) -> &Array2<f64> {
        self.pre.last().expect("network has at least one layer")
    }
}

/// Feed-forward network of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNetwork {
    layers: Vec<DenseLayer>,
}

impl DenseNetwork {
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(IsacError::Config("network needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.outputs() {
                return Err(IsacError::Dimension {
                    what: "layer bias",
                    expected: layer.outputs(),
                    got: layer.bias.len(),
                });
            }
            if i > 0 && layers[i - 1].outputs() != layer.inputs() {
                return Err(IsacError::Dimension {
                    what: "layer chaining",
                    expected: layers[i - 1].outputs(),
                    got: layer.inputs(),
                });
            }
            layer.activation.validate(layer.outputs())?;
        }
        Ok(Self { layers })
    }

    /// Multi-layer perceptron with `hidden` activations between layers and
    /// `output` on the last one.
    ///
    /// Weights start uniform in `±1/sqrt(fan_in)`; the last layer uses
    /// `±final_scale` when given.
    pub fn mlp<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: LayerActivation,
        final_scale: Option<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(IsacError::Config("an MLP needs input and output sizes".into()));
        }
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let bound = match (i == last, final_scale) {
                    (true, Some(s)) => s,
                    _ => 1.0 / (w[0] as f64).sqrt(),
                };
                DenseLayer {
                    weights: Array2::from_shape_fn((w[0], w[1]), |_| rng.random_range(-bound..bound)),
                    bias: Array1::from_shape_fn(w[1], |_| rng.random_range(-bound..bound)),
                    activation: if i == last {
                        output.clone()
                    } else {
                        LayerActivation::Uniform(hidden)
                    },
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().outputs()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn output_activation(&self) -> &LayerActivation {
        &self.layers.last().unwrap().activation
    }

    fn check_input(&self, width: usize) -> Result<()> {
        if width != self.input_dim() {
            return Err(IsacError::Dimension {
                what: "network input",
                expected: self.input_dim(),
                got: width,
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let batch = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        Ok(self.forward_batch(batch)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let logits = self.logits_batch(x)?;
        Ok(self.output_activation().apply(&logits))
    }

    /// Last-layer pre-activations, before the output activation runs.
    pub fn logits_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let (last, hidden) = self.layers.split_last().unwrap();
        let mut h = x.to_owned();
        for layer in hidden {
            h = layer.activation.apply(&layer.pre_activation(h.view()));
        }
        Ok(last.pre_activation(h.view()))
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let batch = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        Ok(self.logits_batch(batch)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_cached(&self, x: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        self.check_input(x.ncols())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for layer in &self.layers {
            let z = layer.pre_activation(h.view());
            let y = layer.activation.apply(&z);
            inputs.push(h);
            pre.push(z);
            h = y;
        }
        Ok(ForwardCache { inputs, pre, output: h })
    }

    /// Back-propagates `upstream = ∂L/∂output` (batch × outputs).
    ///
    /// Returns parameter gradients summed over the batch and `∂L/∂input`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Array2<f64>) -> (Gradients, Array2<f64>) {
        self.backward_with_logit_grad(cache, upstream, None)
    }

    /// As [`backward`](Self::backward), with `logit_grad` added to the gradient of the final pre-activation.
    pub fn backward_with_logit_grad(
        &self,
        cache: &ForwardCache,
        upstream: &Array2<f64>,
        logit_grad: Option<&Array2<f64>>,
    ) -> (Gradients, Array2<f64>) {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut dy = upstream.clone();
        let count = self.layers.len();
        for i in (0..count).rev() {
            let layer = &self.layers[i];
            let y = if i + 1 == count { &cache.output } else { &cache.inputs[i + 1] };
            let mut dz = layer.activation.backward(&cache.pre[i], y, &dy);
            if i + 1 == count {
                if let Some(extra) = logit_grad {
                    dz += extra;
                }
            }
            grads.push(LayerGrad {
                weights: cache.inputs[i].t().dot(&dz),
                bias: dz.sum_axis(Axis(0)),
            });
            dy = dz.dot(&layer.weights.t());
        }
        grads.reverse();
        (Gradients(grads), dy)
    }

    /// `θ' ← τ θ + (1 - τ) θ'` towards `online`.
    pub fn soft_update_from(&mut self, online: &DenseNetwork, tau: f64) {
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            Zip::from(&mut t.weights).and(&o.weights).for_each(|t, &o| *t = tau * o + (1.0 - tau) * *t);
            Zip::from(&mut t.bias).and(&o.bias).for_each(|t, &o| *t = tau * o + (1.0 - tau) * *t);
        }
    }

    /// Euclidean distance between the parameter vectors of two equally shaped networks.
    pub fn parameter_distance(&self, other: &DenseNetwork) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| {
                let w: f64 = a.weights.iter().zip(b.weights.iter()).map(|(x, y)| (x - y).powi(2)).sum();
                let bb: f64 = a.bias.iter().zip(b.bias.iter()).map(|(x, y)| (x - y).powi(2)).sum();
                w + bb
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Adam moment estimates for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<LayerGrad>,
    second: Vec<LayerGrad>,
}

impl Adam {
    pub fn new(net: &DenseNetwork, lr: f64) -> Self {
        let zeros = || {
            net.layers()
                .iter()
                .map(|l| LayerGrad {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect::<Vec<_>>()
        };
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Applies one bias-corrected Adam update (descent on `grads`).
    pub fn apply(&mut self, net: &mut DenseNetwork, grads: &Gradients) -> Result<()> {
        if !grads.is_finite() {
            return Err(IsacError::Divergence(format!(
                "non-finite gradient at optimizer step {} (max |g| = {})",
                self.step + 1,
                grads.max_abs()
            )));
        }
        if grads.0.len() != net.layers.len() {
            return Err(IsacError::Dimension {
                what: "gradient layers",
                expected: net.layers.len(),
                got: grads.0.len(),
            });
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (lr, eps) = (self.lr, self.eps);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for (((layer, g), m), v) in net
            .layers
            .iter_mut()
            .zip(&grads.0)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            Zip::from(&mut layer.weights)
                .and(&mut m.weights)
                .and(&mut v.weights)
                .and(&g.weights)
                .for_each(|p, m, v, &g| update(p, m, v, g));
            Zip::from(&mut layer.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .and(&g.bias)
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
        Ok(())
    }
}

/// Flat, shape-tagged form of a network used in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkRecord {
    pub layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `inputs × outputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: LayerActivation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamRecord {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: NetworkMoments,
    pub second: NetworkMoments,
}

/// Moment tensors laid out like the layer parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkMoments(pub Vec<(Vec<f64>, Vec<f64>)>);

fn row_major(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

impl From<&DenseNetwork> for NetworkRecord {
    fn from(net: &DenseNetwork) -> Self {
        NetworkRecord {
            layers: net
                .layers
                .iter()
                .map(|l| LayerRecord {
                    inputs: l.inputs(),
                    outputs: l.outputs(),
                    weights: row_major(&l.weights),
                    bias: l.bias.to_vec(),
                    activation: l.activation.clone(),
                })
                .collect(),
        }
    }
}

impl TryFrom<NetworkRecord> for DenseNetwork {
    type Error = IsacError;

    fn try_from(rec: NetworkRecord) -> Result<Self> {
        let layers = rec
            .layers
            .into_iter()
            .map(|l| {
                let weights = Array2::from_shape_vec((l.inputs, l.outputs), l.weights)
                    .map_err(|e| IsacError::Serde(format!("layer weights: {e}")))?;
                Ok(DenseLayer {
                    weights,
                    bias: Array1::from(l.bias),
                    activation: l.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        DenseNetwork::from_layers(layers)
    }
}

impl Adam {
    pub fn to_record(&self) -> AdamRecord {
        let moments = |v: &[LayerGrad]| {
            NetworkMoments(v.iter().map(|g| (row_major(&g.weights), g.bias.to_vec())).collect())
        };
        AdamRecord {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            step: self.step,
            first: moments(&self.first),
            second: moments(&self.second),
        }
    }

    /// Restores optimizer state for `net`, checking that the shapes agree.
    pub fn from_record(rec: AdamRecord, net: &DenseNetwork) -> Result<Self> {
        let restore = |m: NetworkMoments| -> Result<Vec<LayerGrad>> {
            if m.0.len() != net.layers.len() {
                return Err(IsacError::Dimension {
                    what: "optimizer moments",
                    expected: net.layers.len(),
                    got: m.0.len(),
                });
            }
            m.0.into_iter()
                .zip(net.layers())
                .map(|((w, b), l)| {
                    Ok(LayerGrad {
                        weights: Array2::from_shape_vec(l.weights.raw_dim(), w)
                            .map_err(|e| IsacError::Serde(format!("optimizer moments: {e}")))?,
                        bias: Array1::from(b),
                    })
                })
                .collect()
        };
        Ok(Self {
            lr: rec.lr,
            beta1: rec.beta1,
            beta2: rec.beta2,
            eps: rec.eps,
            step: rec.step,
            first: restore(rec.first)?,
            second: restore(rec.second)?,
        })
    }
}
