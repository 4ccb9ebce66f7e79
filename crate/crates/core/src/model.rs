//! Network definitions and global parameter-vector views.
//!
//! A [`Model`] is an ordered layer list plus a named parameter list. Forward
//! passes are recorded on a fresh [`Tape`] per call, so a model can be shared
//! read-only across evaluation threads.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{component_rng, tag};
use crate::tensor::{conv_output_dims, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Linear {
        input: usize,
        output: usize,
        bias: bool,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    AvgPool2,
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Index of the owning entry in [`Model::layers`].
    pub layer: usize,
    /// Weight matrices and kernels are prunable; biases are not.
    pub prunable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    params: Vec<Param>,
    /// Per-example input shape, e.g. `[D]` or `[C, H, W]`.
    input_shape: Vec<usize>,
    classes: usize,
}

/// Loss and accuracy of one forward/backward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStats {
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
}

fn glorot(rng: &mut impl Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-s..s)).collect()
}

/// Linear+ReLU stack ending in a linear layer to `layer_sizes.last()` classes.
pub fn build_mlp(layer_sizes: &[usize], seed: u64) -> Result<Model> {
    if layer_sizes.len() < 2 {
        return Err(Error::config(
            "model.layer_sizes",
            "an MLP needs at least an input and an output size",
        ));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::config("model.layer_sizes", "sizes must be positive"));
    }
    let mut layers = vec![Layer::Flatten];
    for (i, pair) in layer_sizes.windows(2).enumerate() {
        layers.push(Layer::Linear {
            input: pair[0],
            output: pair[1],
            bias: true,
        });
        if i + 2 < layer_sizes.len() {
            layers.push(Layer::Relu);
        }
    }
    Model::from_layers(layers, vec![layer_sizes[0]], seed)
}

/// 3×3 conv+ReLU blocks with 2× average-pool downsampling between blocks,
/// then a linear head.
pub fn build_small_cnn(input: [usize; 3], channels: &[usize], classes: usize, seed: u64) -> Result<Model> {
    if channels.is_empty() {
        return Err(Error::config("model.channels", "need at least one conv block"));
    }
    if classes == 0 || input.contains(&0) || channels.contains(&0) {
        return Err(Error::config("model", "sizes must be positive"));
    }
    let [c, mut h, mut w] = input;
    let mut layers = Vec::new();
    let mut in_ch = c;
    for (i, &out_ch) in channels.iter().enumerate() {
        if i > 0 {
            if h < 2 || w < 2 {
                return Err(Error::config(
                    "model.channels",
                    format!("spatial dims exhausted by downsampling before block {i}"),
                ));
            }
            layers.push(Layer::AvgPool2);
            h /= 2;
            w /= 2;
        }
        layers.push(Layer::Conv {
            in_channels: in_ch,
            out_channels: out_ch,
            kernel: 3,
            stride: 1,
            padding: 1,
        });
        layers.push(Layer::Relu);
        in_ch = out_ch;
    }
    layers.push(Layer::Flatten);
    layers.push(Layer::Linear {
        input: in_ch * h * w,
        output: classes,
        bias: true,
    });
    Model::from_layers(layers, input.to_vec(), seed)
}

impl Model {
    /// Builds a model with Glorot-uniform weights and zero biases.
    pub fn from_layers(layers: Vec<Layer>, input_shape: Vec<usize>, seed: u64) -> Result<Self> {
        let mut rng = component_rng(seed, tag::INIT);
        let mut params = Vec::new();
        let (mut linear_count, mut conv_count) = (0, 0);
        for (idx, layer) in layers.iter().enumerate() {
            match *layer {
                Layer::Linear { input, output, bias } => {
                    linear_count += 1;
                    let w = glorot(&mut rng, input * output, input, output);
                    params.push(Param {
                        name: format!("fc{linear_count}.weight"),
                        tensor: Tensor::new(vec![input, output], w)?,
                        layer: idx,
                        prunable: true,
                    });
                    if bias {
                        params.push(Param {
                            name: format!("fc{linear_count}.bias"),
                            tensor: Tensor::zeros(vec![output]),
                            layer: idx,
                            prunable: false,
                        });
                    }
                }
                Layer::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    conv_count += 1;
                    let area = kernel * kernel;
                    let w = glorot(
                        &mut rng,
                        out_channels * in_channels * area,
                        in_channels * area,
                        out_channels * area,
                    );
                    params.push(Param {
                        name: format!("conv{conv_count}.weight"),
                        tensor: Tensor::new(vec![out_channels, in_channels, kernel, kernel], w)?,
                        layer: idx,
                        prunable: true,
                    });
                    params.push(Param {
                        name: format!("conv{conv_count}.bias"),
                        tensor: Tensor::zeros(vec![out_channels]),
                        layer: idx,
                        prunable: false,
                    });
                }
                Layer::Relu | Layer::AvgPool2 | Layer::Flatten => {}
            }
        }
        let classes = Self::infer_output(&layers, &input_shape)?;
        Ok(Self {
            layers,
            params,
            input_shape,
            classes,
        })
    }

    /// Reassembles a model from stored parts, validating shapes.
    pub fn from_parts(layers: Vec<Layer>, input_shape: Vec<usize>, params: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::from_layers(layers, input_shape, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (slot, (name, tensor)) in model.params.iter_mut().zip(params) {
            if slot.name != name || slot.tensor.shape() != tensor.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` {:?} does not match architecture slot `{}` {:?}",
                    tensor.shape(),
                    slot.name,
                    slot.tensor.shape()
                )));
            }
            slot.tensor = tensor;
        }
        Ok(model)
    }

    fn infer_output(layers: &[Layer], input_shape: &[usize]) -> Result<usize> {
        let mut shape = input_shape.to_vec();
        for layer in layers {
            shape = match *layer {
                Layer::Flatten => vec![shape.iter().product()],
                Layer::Relu => shape,
                Layer::AvgPool2 => {
                    if shape.len() != 3 || shape[1] < 2 || shape[2] < 2 {
                        return Err(Error::config("model", format!("cannot pool shape {shape:?}")));
                    }
                    vec![shape[0], shape[1] / 2, shape[2] / 2]
                }
                Layer::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if shape.len() != 3 {
                        return Err(Error::config("model", format!("conv expects C×H×W, got {shape:?}")));
                    }
                    let (oh, ow) = conv_output_dims(
                        &[1, shape[0], shape[1], shape[2]],
                        &[out_channels, in_channels, kernel, kernel],
                        stride,
                        padding,
                    )
                    .map_err(|e| Error::config("model", e.to_string()))?;
                    vec![out_channels, oh, ow]
                }
                Layer::Linear { input, output, .. } => {
                    if shape != [input] {
                        return Err(Error::config(
                            "model",
                            format!("linear layer expects [{input}], got {shape:?}"),
                        ));
                    }
                    vec![output]
                }
            };
        }
        match shape.as_slice() {
            [c] => Ok(*c),
            _ => Err(Error::config("model", format!("network output {shape:?} is not a class vector"))),
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Records the forward pass on `tape`; returns logits and the parameter leaves.
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<(Var, Vec<Var>)> {
        let expected = &self.input_shape;
        let got = tape.value(input).shape();
        if got.len() != expected.len() + 1 || &got[1..] != expected.as_slice() {
            return Err(Error::Dimension(format!(
                "model expects N×{expected:?} input, got {got:?}"
            )));
        }
        let param_vars: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.tensor.clone())).collect();
        let mut next_param = 0;
        let mut x = input;
        for layer in &self.layers {
            x = match *layer {
                Layer::Flatten => tape.flatten(x)?,
                Layer::Relu => tape.relu(x),
                Layer::AvgPool2 => tape.avg_pool2(x)?,
                Layer::Linear { bias, .. } => {
                    let y = tape.matmul(x, param_vars[next_param])?;
                    next_param += 1;
                    if bias {
                        next_param += 1;
                        tape.add_row_bias(y, param_vars[next_param - 1])?
                    } else {
                        y
                    }
                }
                Layer::Conv { stride, padding, .. } => {
                    let y = tape.conv2d(x, param_vars[next_param], stride, padding)?;
                    let y = tape.add_channel_bias(y, param_vars[next_param + 1])?;
                    next_param += 2;
                    y
                }
            };
        }
        Ok((x, param_vars))
    }

    pub fn logits(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(inputs.clone());
        let (z, _) = self.forward(&mut tape, x)?;
        Ok(tape.value(z).clone())
    }

    /// Mean cross-entropy without touching gradients.
    pub fn loss(&self, inputs: &Tensor, labels: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(inputs.clone());
        let (z, _) = self.forward(&mut tape, x)?;
        let l = tape.softmax_cross_entropy(z, labels)?;
        Ok(tape.scalar(l))
    }

    /// Arg-max class per row. Rows containing non-finite logits predict `None`.
    pub fn predict(&self, inputs: &Tensor) -> Result<Vec<Option<usize>>> {
        let z = self.logits(inputs)?;
        Ok(z.data().chunks(self.classes).map(argmax).collect())
    }

    /// Cross-entropy forward/backward; stores each parameter's gradient in its `grad` slot.
    pub fn compute_gradients(&mut self, inputs: &Tensor, labels: &[usize]) -> Result<BatchStats> {
        let mut tape = Tape::new();
        let x = tape.leaf(inputs.clone());
        let (z, vars) = self.forward(&mut tape, x)?;
        let correct = count_correct(tape.value(z), self.classes, labels);
        let l = tape.softmax_cross_entropy(z, labels)?;
        tape.backward(l)?;
        let loss = tape.scalar(l);
        for (param, var) in self.params.iter_mut().zip(vars) {
            param.tensor.set_grad(tape.take_grad(var));
        }
        Ok(BatchStats {
            loss,
            correct,
            count: labels.len(),
        })
    }

    /// Gradient of the mean cross-entropy with respect to the inputs. Parameters are untouched.
    pub fn input_gradient(&self, inputs: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let x = tape.leaf(inputs.clone());
        let (z, _) = self.forward(&mut tape, x)?;
        let l = tape.softmax_cross_entropy(z, labels)?;
        tape.backward(l)?;
        let loss = tape.scalar(l);
        let g = tape
            .take_grad(x)
            .ok_or_else(|| Error::State("input gradient was not populated".into()))?;
        Ok((loss, g))
    }

    pub fn clear_gradients(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.set_grad(None));
    }
}

pub(crate) fn argmax(row: &[f64]) -> Option<usize> {
    if row.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    Some(best)
}

pub(crate) fn count_correct(logits: &Tensor, classes: usize, labels: &[usize]) -> usize {
    logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == Some(y))
        .count()
}

/// Euclidean norm of all trainable parameters taken as one vector.
pub fn param_l2_norm(model: &Model) -> f64 {
    model.params.iter().map(|p| p.tensor.sum_squares()).sum::<f64>().sqrt()
}

/// Euclidean norm of all parameter gradients taken as one vector.
pub fn grad_l2_norm(model: &Model) -> Result<f64> {
    let mut total = 0.0;
    for p in &model.params {
        let g = p
            .tensor
            .grad()
            .ok_or_else(|| Error::State(format!("gradient of `{}` is missing", p.name)))?;
        total += g.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_shapes_and_init() {
        let m = build_mlp(&[4, 3], 7).unwrap();
        assert_eq!(m.params().len(), 2);
        assert_eq!(m.params()[0].tensor.shape(), &[4, 3]);
        assert_eq!(m.params()[1].tensor.shape(), &[3]);
        assert!(m.params()[1].tensor.data().iter().all(|&b| b == 0.0));
        let s = (6.0f64 / 7.0).sqrt();
        assert!(m.params()[0].tensor.data().iter().all(|w| w.abs() < s));
        assert!(m.params()[0].prunable && !m.params()[1].prunable);
    }

    #[test]
    fn mlp_is_deterministic_in_seed() {
        assert_eq!(build_mlp(&[5, 8, 3], 3).unwrap(), build_mlp(&[5, 8, 3], 3).unwrap());
        assert_ne!(build_mlp(&[5, 8, 3], 3).unwrap(), build_mlp(&[5, 8, 3], 4).unwrap());
    }

    #[test]
    fn mlp_parameter_count() {
        assert_eq!(build_mlp(&[784, 128, 10], 0).unwrap().num_parameters(), 101_770);
    }

    #[test]
    fn mlp_rejects_short_size_list() {
        assert!(matches!(build_mlp(&[], 0), Err(Error::Config { .. })));
        assert!(matches!(build_mlp(&[3], 0), Err(Error::Config { .. })));
    }

    #[test]
    fn cnn_logit_shape_and_zero_input() {
        let m = build_small_cnn([3, 8, 8], &[4], 2, 1).unwrap();
        let x = Tensor::zeros(vec![5, 3, 8, 8]);
        let z = m.logits(&x).unwrap();
        assert_eq!(z.shape(), &[5, 2]);
        let head_bias = m.params().last().unwrap().tensor.data().to_vec();
        for row in z.data().chunks(2) {
            assert_eq!(row, head_bias.as_slice());
        }
        assert_eq!(m, build_small_cnn([3, 8, 8], &[4], 2, 1).unwrap());
    }

    #[test]
    fn cnn_with_downsampling() {
        let m = build_small_cnn([1, 8, 8], &[2, 3, 4], 5, 0).unwrap();
        assert_eq!(m.layers().iter().filter(|l| **l == Layer::AvgPool2).count(), 2);
        let z = m.logits(&Tensor::zeros(vec![2, 1, 8, 8])).unwrap();
        assert_eq!(z.shape(), &[2, 5]);
        assert!(matches!(build_small_cnn([1, 2, 2], &[1, 1, 1], 2, 0), Err(Error::Config { .. })));
    }

    #[test]
    fn norms() {
        let mut m = build_mlp(&[1, 2], 0).unwrap();
        m.params_mut().iter_mut().for_each(|p| p.tensor.data_mut().fill(0.0));
        assert_eq!(param_l2_norm(&m), 0.0);
        m.params_mut()[0].tensor.data_mut().copy_from_slice(&[3.0, 4.0]);
        assert_eq!(param_l2_norm(&m), 5.0);

        assert!(matches!(grad_l2_norm(&m), Err(Error::State(msg)) if msg.contains("fc1.weight")));
        m.params_mut()[0].tensor.set_grad(Some(vec![0.6, 0.0]));
        m.params_mut()[1].tensor.set_grad(Some(vec![0.0, 0.8]));
        assert!((grad_l2_norm(&m).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn norms_match_flatten_oracle() {
        let mut m = build_mlp(&[6, 5, 4], 9).unwrap();
        let x = Tensor::new(vec![3, 6], (0..18).map(|i| i as f64 / 18.0).collect()).unwrap();
        m.compute_gradients(&x, &[0, 1, 3]).unwrap();
        let flat_w: Vec<f64> = m.params().iter().flat_map(|p| p.tensor.data().to_vec()).collect();
        let flat_g: Vec<f64> = m.params().iter().flat_map(|p| p.tensor.grad().unwrap().to_vec()).collect();
        let oracle = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((param_l2_norm(&m) - oracle(&flat_w)).abs() < 1e-12);
        assert!((grad_l2_norm(&m).unwrap() - oracle(&flat_g)).abs() < 1e-12);
        let per_tensor: f64 = m.params().iter().map(|p| p.tensor.sum_squares()).sum();
        assert!((param_l2_norm(&m).powi(2) - per_tensor).abs() < 1e-10);
    }

    #[test]
    fn zero_gradient_for_constant_optimum() {
        // Zero weights, two classes, balanced labels: the loss is at its stationary point.
        let mut m = build_mlp(&[2, 2], 0).unwrap();
        m.params_mut().iter_mut().for_each(|p| p.tensor.data_mut().fill(0.0));
        let x = Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        m.compute_gradients(&x, &[0, 1]).unwrap();
        assert_eq!(grad_l2_norm(&m).unwrap(), 0.0);
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let m = build_mlp(&[4, 2], 0).unwrap();
        assert!(m.logits(&Tensor::zeros(vec![2, 5])).is_err());
    }
}
