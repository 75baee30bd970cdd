use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::nn::ops::{sigmoid, softplus};
use crate::nn::rng::{normal, Prng};

/// Dense affine layer. `weights` is row-major `[outputs][inputs]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.inputs)
                .zip(&self.bias)
                .map(|(row, &b)| b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()),
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Softplus,
}

/// Multi-layer perceptron with ReLU on every hidden layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
    output_activation: OutputActivation,
}

/// Per-layer activations recorded by [`Mlp::forward_trace`]; `acts[0]` is
/// the input and `acts[l + 1]` the post-activation output of layer `l`.
#[derive(Clone, Debug)]
pub struct Trace {
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace always holds the input")
    }
}

/// Parameter gradients with the same layout as the network.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrad {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl MlpGrad {
    pub fn zeros_like(m: &Mlp) -> Self {
        Self {
            layers: m
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrad) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.iter_mut().zip(ow).for_each(|(a, o)| *a += o);
            b.iter_mut().zip(ob).for_each(|(a, o)| *a += o);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (w, b) in &mut self.layers {
            w.iter_mut().chain(b.iter_mut()).for_each(|v| *v *= factor);
        }
    }

    /// Weight then bias slice for each layer, matching [`Mlp::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }
}

impl Mlp {
    /// All-zero network with the given layer widths (`dims[0]` is the input).
    pub fn zeros(dims: &[usize], output_activation: OutputActivation) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid(format!("invalid layer dims {dims:?}")));
        }
        let layers = dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Ok(Self {
            layers,
            output_activation,
        })
    }

    /// He-normal weights, zero biases. The last layer is scaled by `last_gain`.
    pub fn init_he(
        dims: &[usize],
        output_activation: OutputActivation,
        last_gain: f64,
        rng: &mut Prng,
    ) -> Result<Self> {
        let mut m = Self::zeros(dims, output_activation)?;
        let n_layers = m.layers.len();
        for (i, layer) in m.layers.iter_mut().enumerate() {
            let mut std = (2.0 / layer.inputs as f64).sqrt();
            if i + 1 == n_layers {
                std *= last_gain;
            }
            for w in &mut layer.weights {
                *w = std * normal(rng);
            }
        }
        Ok(m)
    }

    pub fn from_layers(layers: Vec<Layer>, output_activation: OutputActivation) -> Result<Self> {
        let m = Self {
            layers,
            output_activation,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("mlp has no layers"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.inputs == 0 || l.outputs == 0 {
                return Err(Error::invalid(format!("layer {i} has a zero dimension")));
            }
            check_dim(l.inputs * l.outputs, l.weights.len())?;
            check_dim(l.outputs, l.bias.len())?;
            if i > 0 {
                check_dim(self.layers[i - 1].outputs, l.inputs)?;
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "layer {i} has non-finite parameters"
                )));
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output_activation
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.affine(&cur, &mut next);
            if i < last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            } else if self.output_activation == OutputActivation::Softplus {
                next.iter_mut().for_each(|v| *v = softplus(*v));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        check_dim(self.input_dim(), x.len())?;
        Ok(self.forward_trace_unchecked(x))
    }

    pub(crate) fn forward_trace_unchecked(&self, x: &[f64]) -> Trace {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.outputs);
            layer.affine(&acts[i], &mut z);
            let a = if i < last {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                match self.output_activation {
                    OutputActivation::Identity => z.clone(),
                    OutputActivation::Softplus => z.iter().map(|&v| softplus(v)).collect(),
                }
            };
            pre.push(z);
            acts.push(a);
        }
        Trace { acts, pre }
    }

    /// Accumulates parameter gradients of `upstream · output` into `grad`
    /// and returns the gradient with respect to the input.
    pub fn backward_trace(&self, trace: &Trace, upstream: &[f64], grad: &mut MlpGrad) -> Vec<f64> {
        debug_assert_eq!(upstream.len(), self.output_dim());
        let last = self.layers.len() - 1;
        let mut delta: Vec<f64> = match self.output_activation {
            OutputActivation::Identity => upstream.to_vec(),
            OutputActivation::Softplus => upstream
                .iter()
                .zip(&trace.pre[last])
                .map(|(u, &z)| u * sigmoid(z))
                .collect(),
        };
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &trace.acts[l];
            let (gw, gb) = &mut grad.layers[l];
            let mut dx = vec![0.0; layer.inputs];
            for (o, &dl) in delta.iter().enumerate() {
                if dl == 0.0 {
                    continue;
                }
                gb[o] += dl;
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                let grow = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                for i in 0..layer.inputs {
                    grow[i] += dl * input[i];
                    dx[i] += dl * row[i];
                }
            }
            if l > 0 {
                for (d, &z) in dx.iter_mut().zip(&trace.pre[l - 1]) {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            delta = dx;
        }
        delta
    }

    /// Parameter and input gradients of `upstream · forward(x)`.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(MlpGrad, Vec<f64>)> {
        check_dim(self.output_dim(), upstream.len())?;
        let trace = self.forward_trace(x)?;
        let mut grad = MlpGrad::zeros_like(self);
        let dx = self.backward_trace(&trace, upstream, &mut grad);
        Ok((grad, dx))
    }
}
