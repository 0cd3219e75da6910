use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use super::layers::{
    conv2d_backward, conv2d_backward_params, conv2d_forward, conv_out_len, flatten, linear_backward, linear_forward, relu_backward,
    relu_forward, sigmoid_backward, sigmoid_forward, ConvCache, LinearCache,
};
use super::{NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Linear {
        input: usize,
        output: usize,
    },
    Relu,
    Sigmoid,
    Flatten,
}

impl LayerSpec {
    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => {
                if input.len() != 3 || input[0] != in_ch {
                    return Err(NnError::Shape(format!(
                        "conv {in_ch}→{out_ch} cannot take {input:?}"
                    )));
                }
                match (conv_out_len(input[1], kernel, stride, pad), conv_out_len(input[2], kernel, stride, pad)) {
                    (Some(h), Some(w)) => Ok(vec![out_ch, h, w]),
                    _ => Err(NnError::Shape(format!("conv k={kernel} empties {input:?}"))),
                }
            }
            LayerSpec::Linear { input: i, output } => {
                if input != [i] {
                    return Err(NnError::Shape(format!("linear {i}→{output} cannot take {input:?}")));
                }
                Ok(vec![output])
            }
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>, usize)> {
        match *self {
            LayerSpec::Conv2d {
                in_ch, out_ch, kernel, ..
            } => Some((vec![out_ch, in_ch, kernel, kernel], vec![out_ch], in_ch * kernel * kernel)),
            LayerSpec::Linear { input, output } => Some((vec![output, input], vec![output], input)),
            _ => None,
        }
    }
}

/// Check that `layers` compose from `input` and return the final per-sample shape.
pub fn infer_shapes(layers: &[LayerSpec], input: &[usize]) -> Result<Vec<usize>, NnError> {
    layers.iter().try_fold(input.to_vec(), |shape, l| l.output_shape(&shape))
}

/// A named trainable tensor with its AdamW moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub m: Tensor,
    pub v: Tensor,
}

/// Ordered trainable tensors plus the shared optimizer step count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    pub entries: Vec<ParamEntry>,
    pub step: u64,
}

impl ModelParams {
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            m,
            v,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ParamEntry> {
        self.entries.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.value)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Drop optimizer moments and step count.
    pub fn reset_moments(&mut self) {
        for e in &mut self.entries {
            e.m = Tensor::zeros(e.value.shape());
            e.v = Tensor::zeros(e.value.shape());
        }
        self.step = 0;
    }
}

enum Cache {
    Conv(ConvCache),
    Linear(LinearCache),
    Relu(Tensor),
    Sigmoid(Tensor),
    Flatten(Vec<usize>),
}

/// A feed-forward stack of [`LayerSpec`]s with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    layers: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    params: ModelParams,
    seed: u64,
}

impl Sequential {
    /// Kaiming-uniform weights (ReLU gain, bound `√(6/fan_in)`), zero biases.
    pub fn new(layers: Vec<LayerSpec>, input_shape: Vec<usize>, seed: u64) -> Result<Self, NnError> {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        Self::build(layers, input_shape, seed, |shape, fan_in| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect()).unwrap()
        })
    }

    /// All parameters zero.
    pub fn zeros(layers: Vec<LayerSpec>, input_shape: Vec<usize>) -> Result<Self, NnError> {
        Self::build(layers, input_shape, 0, |shape, _| Tensor::zeros(shape))
    }

    fn build(
        layers: Vec<LayerSpec>,
        input_shape: Vec<usize>,
        seed: u64,
        mut init: impl FnMut(&[usize], usize) -> Tensor,
    ) -> Result<Self, NnError> {
        infer_shapes(&layers, &input_shape)?;
        let mut params = ModelParams::default();
        for (i, l) in layers.iter().enumerate() {
            if let Some((w, b, fan_in)) = l.param_shapes() {
                params.push(format!("layer{i}.weight"), init(&w, fan_in));
                params.push(format!("layer{i}.bias"), Tensor::zeros(&b));
            }
        }
        Ok(Self {
            layers,
            input_shape,
            params,
            seed,
        })
    }

    /// Assemble from stored parameters, checking names and shapes.
    pub fn from_parts(
        layers: Vec<LayerSpec>,
        input_shape: Vec<usize>,
        params: ModelParams,
        seed: u64,
    ) -> Result<Self, NnError> {
        let template = Self::zeros(layers, input_shape)?;
        if template.params.len() != params.len() {
            return Err(NnError::Shape(format!(
                "architecture has {} parameter tensors, got {}",
                template.params.len(),
                params.len()
            )));
        }
        for (t, p) in template.params.iter().zip(params.iter()) {
            if t.name != p.name || t.value.shape() != p.value.shape() {
                return Err(NnError::Shape(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    p.name,
                    p.value.shape(),
                    t.name,
                    t.value.shape()
                )));
            }
            p.value.check_finite(&p.name)?;
        }
        Ok(Self {
            params,
            seed,
            ..template
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Layers run during training: everything but a trailing sigmoid, which is
    /// fused into the loss.
    fn logit_layers(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Sigmoid) => self.layers.len() - 1,
            _ => self.layers.len(),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<(), NnError> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(NnError::Shape(format!(
                "input {:?} does not match model input [N, {:?}]",
                x.shape(),
                self.input_shape
            )));
        }
        x.check_finite("input")
    }

    fn run(&self, x: &Tensor, upto: usize, keep: bool) -> Result<(Tensor, Vec<Cache>), NnError> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(if keep { upto } else { 0 });
        let mut h = x.clone();
        let mut p = 0;
        for layer in &self.layers[..upto] {
            let (next, cache) = match *layer {
                LayerSpec::Conv2d { stride, pad, .. } => {
                    let (w, b) = (&self.params.entries[p].value, &self.params.entries[p + 1].value);
                    p += 2;
                    let (y, c) = conv2d_forward(&h, w, b, stride, pad)?;
                    (y, Cache::Conv(c))
                }
                LayerSpec::Linear { .. } => {
                    let (w, b) = (&self.params.entries[p].value, &self.params.entries[p + 1].value);
                    p += 2;
                    let (y, c) = linear_forward(&h, w, b)?;
                    (y, Cache::Linear(c))
                }
                LayerSpec::Relu => {
                    let y = relu_forward(&h);
                    (y, Cache::Relu(h))
                }
                LayerSpec::Sigmoid => {
                    let y = sigmoid_forward(&h);
                    let c = Cache::Sigmoid(y.clone());
                    (y, c)
                }
                LayerSpec::Flatten => {
                    let y = flatten(&h);
                    (y, Cache::Flatten(h.shape().to_vec()))
                }
            };
            if keep {
                caches.push(cache);
            }
            h = next;
        }
        h.check_finite("activation")?;
        Ok((h, caches))
    }

    /// Pre-sigmoid outputs, one per batch item.
    pub fn logits(&self, x: &Tensor) -> Result<Vec<f64>, NnError> {
        Ok(self.run(x, self.logit_layers(), false)?.0.into_data())
    }

    /// Full forward pass.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        Ok(self.run(x, self.layers.len(), false)?.0)
    }

    /// Logits plus the gradients of `loss(logits)` with respect to every
    /// parameter, where `loss` returns `(value, dloss/dlogit)`.
    pub fn loss_and_grads(
        &self,
        x: &Tensor,
        loss: impl FnOnce(&[f64]) -> (f64, Vec<f64>),
    ) -> Result<(f64, Vec<f64>, Vec<Tensor>), NnError> {
        let upto = self.logit_layers();
        let (out, caches) = self.run(x, upto, true)?;
        let (value, grad_logits) = loss(out.data());
        let mut g = Tensor::new(out.shape().to_vec(), grad_logits)?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.params.len()];
        let mut p = self.layers[..upto]
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv2d { .. } | LayerSpec::Linear { .. }))
            .count()
            * 2;
        for (depth, cache) in caches.iter().enumerate().rev() {
            g = match cache {
                Cache::Conv(c) if depth == 0 => {
                    let (gw, gb) = conv2d_backward_params(&g, c)?;
                    grads[0] = Some(gw);
                    grads[1] = Some(gb);
                    break;
                }
                Cache::Conv(c) => {
                    let (gx, gw, gb) = conv2d_backward(&g, c)?;
                    p -= 2;
                    grads[p] = Some(gw);
                    grads[p + 1] = Some(gb);
                    gx
                }
                Cache::Linear(c) => {
                    let (gx, gw, gb) = linear_backward(&g, c)?;
                    p -= 2;
                    grads[p] = Some(gw);
                    grads[p + 1] = Some(gb);
                    gx
                }
                Cache::Relu(input) => relu_backward(&g, input)?,
                Cache::Sigmoid(output) => sigmoid_backward(&g, output)?,
                Cache::Flatten(shape) => g.reshape(shape.clone())?,
            };
        }
        let grads = grads
            .into_iter()
            .zip(self.params.iter())
            .map(|(g, e)| g.unwrap_or_else(|| Tensor::zeros(e.value.shape())))
            .collect();
        Ok((value, out.into_data(), grads))
    }
}
