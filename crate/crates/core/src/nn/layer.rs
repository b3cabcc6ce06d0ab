use serde::{Deserialize, Serialize};

use crate::error::{DivaError, Result};

/// One stage of a feed-forward network.
///
/// Shapes are per sample (no batch axis). Images are `[H, W, C]`; dense
/// layers take and return flat vectors `[D]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    /// `y = W x + b` with `W` stored `[outputs, inputs]`.
    Dense {
        name: String,
        inputs: usize,
        outputs: usize,
    },
    /// 3x3 convolution, stride 1, zero padding 1. Weights `[out, 3, 3, in]`.
    Conv2d {
        name: String,
        in_channels: usize,
        out_channels: usize,
    },
    Relu,
    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    MaxPool2,
    Flatten,
}

impl Layer {
    pub fn dense(name: &str, inputs: usize, outputs: usize) -> Self {
        Layer::Dense {
            name: name.into(),
            inputs,
            outputs,
        }
    }

    pub fn conv(name: &str, in_channels: usize, out_channels: usize) -> Self {
        Layer::Conv2d {
            name: name.into(),
            in_channels,
            out_channels,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Relu => "relu",
            Layer::MaxPool2 => "maxpool2x2",
            Layer::Flatten => "flatten",
        }
    }

    /// Human-readable label used in error messages.
    pub fn describe(&self, index: usize) -> String {
        match self {
            Layer::Dense { name, .. } | Layer::Conv2d { name, .. } => {
                format!("layer {index} ({} '{name}')", self.kind())
            }
            _ => format!("layer {index} ({})", self.kind()),
        }
    }

    /// Names and shapes of the parameter tensors this layer owns.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        match self {
            Layer::Dense {
                name,
                inputs,
                outputs,
            } => vec![
                (weight_name(name), vec![*outputs, *inputs]),
                (bias_name(name), vec![*outputs]),
            ],
            Layer::Conv2d {
                name,
                in_channels,
                out_channels,
            } => vec![
                (weight_name(name), vec![*out_channels, 3, 3, *in_channels]),
                (bias_name(name), vec![*out_channels]),
            ],
            _ => Vec::new(),
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv2d { .. })
    }

    /// Per-sample output shape for the given per-sample input shape.
    pub fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: Vec<usize>| DivaError::ShapeMismatch {
            at: self.describe(index),
            expected,
            got: input.to_vec(),
        };
        match self {
            Layer::Dense {
                inputs, outputs, ..
            } => {
                if input != [*inputs] {
                    return Err(mismatch(vec![*inputs]));
                }
                Ok(vec![*outputs])
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
                ..
            } => {
                if input.len() != 3 || input[2] != *in_channels {
                    return Err(mismatch(vec![0, 0, *in_channels]));
                }
                Ok(vec![input[0], input[1], *out_channels])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool2 => {
                if input.len() != 3 || input[0] < 2 || input[1] < 2 {
                    return Err(mismatch(vec![2, 2, 0]));
                }
                Ok(vec![input[0] / 2, input[1] / 2, input[2]])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

pub fn weight_name(layer: &str) -> String {
    format!("{layer}.weight")
}

pub fn bias_name(layer: &str) -> String {
    format!("{layer}.bias")
}

/// A LeNet-style CNN: two conv/relu/pool blocks and two dense layers.
pub fn lenet(input_shape: &[usize], num_classes: usize, width: usize, hidden: usize) -> Vec<Layer> {
    let (h, w, c) = (input_shape[0], input_shape[1], input_shape[2]);
    let flat = (h / 4) * (w / 4) * 2 * width;
    vec![
        Layer::conv("conv1", c, width),
        Layer::Relu,
        Layer::MaxPool2,
        Layer::conv("conv2", width, 2 * width),
        Layer::Relu,
        Layer::MaxPool2,
        Layer::Flatten,
        Layer::dense("fc1", flat, hidden),
        Layer::Relu,
        Layer::dense("fc2", hidden, num_classes),
    ]
}

/// A flatten + dense stack with ReLU between hidden layers.
pub fn mlp(input_shape: &[usize], hidden: &[usize], num_classes: usize) -> Vec<Layer> {
    let mut layers = vec![Layer::Flatten];
    let mut width: usize = input_shape.iter().product();
    for (i, &h) in hidden.iter().enumerate() {
        layers.push(Layer::dense(&format!("fc{}", i + 1), width, h));
        layers.push(Layer::Relu);
        width = h;
    }
    layers.push(Layer::dense(
        &format!("fc{}", hidden.len() + 1),
        width,
        num_classes,
    ));
    layers
}
