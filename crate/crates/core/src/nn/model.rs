use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::adapt::quant::Quantizer;
use crate::error::{DivaError, Result};
use crate::nn::layer::{bias_name, weight_name, Layer};
use crate::nn::loss::{softmax_probs, LogitLoss};
use crate::nn::ops::{self, ConvDims};
use crate::tensor::Tensor;

pub type Params = BTreeMap<String, Tensor>;

/// Inputs and integer labels for `n` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.batch_size() != labels.len() {
            return Err(DivaError::ShapeMismatch {
                at: "batch labels".into(),
                expected: vec![inputs.batch_size()],
                got: vec![labels.len()],
            });
        }
        if labels.is_empty() {
            return Err(DivaError::EmptyDataset("batch has no samples".into()));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.gather(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Activation record of a forward pass, consumed by the backward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    records: Vec<Record>,
    output_shape: Vec<usize>,
}

#[derive(Clone, Debug)]
struct Record {
    input: Tensor,
    argmax: Option<Vec<u32>>,
    ste_mask: Option<Vec<bool>>,
}

impl Tape {
    /// Input tensor that fed layer `index`.
    pub fn layer_input(&self, index: usize) -> &Tensor {
        &self.records[index].input
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Gradients of a scalar loss with respect to parameters and input.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: Params,
    pub input: Tensor,
}

/// A differentiable image classifier.
///
/// Implemented by the full-precision [`Model`] and by adapted models, whose
/// backward pass routes through straight-through estimators.
pub trait Classifier: Send + Sync {
    fn num_classes(&self) -> usize;

    fn input_shape(&self) -> &[usize];

    fn forward(&self, x: &Tensor, record: bool) -> Result<(Tensor, Option<Tape>)>;

    fn backward(&self, tape: &Tape, dlogits: &Tensor, want_params: bool) -> Result<Gradients>;

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x, false)?.0)
    }

    fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        Ok(softmax_probs(&self.logits(x)?))
    }

    /// Top-1 class per row; ties go to the lowest class index.
    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        let k = self.num_classes();
        Ok(logits.data().chunks(k).map(argmax).collect())
    }

    /// Loss value and the gradient with respect to the parameters and input.
    fn grad(&self, x: &Tensor, loss: &dyn LogitLoss) -> Result<(f32, Gradients)> {
        let (logits, tape) = self.forward(x, true)?;
        let (value, dlogits) = loss.evaluate(&logits)?;
        let grads = self.backward(tape.as_ref().expect("recorded"), &dlogits, true)?;
        Ok((value, grads))
    }

    /// Loss value and the gradient with respect to the input only.
    fn input_gradient(&self, x: &Tensor, loss: &dyn LogitLoss) -> Result<(f32, Tensor)> {
        let (logits, tape) = self.forward(x, true)?;
        let (value, dlogits) = loss.evaluate(&logits)?;
        let grads = self.backward(tape.as_ref().expect("recorded"), &dlogits, false)?;
        Ok((value, grads.input))
    }
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Class indices by descending score, ties broken by ascending index.
pub(crate) fn rank_classes(row: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx
}

/// Layered feed-forward network with named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    params: Params,
    num_classes: usize,
}

impl Model {
    /// Builds a model with seeded He-uniform weights and zero biases.
    pub fn new(input_shape: &[usize], layers: Vec<Layer>, seed: u64) -> Result<Self> {
        let num_classes = validate_layers(input_shape, &layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        for layer in &layers {
            let shapes = layer.param_shapes();
            if shapes.is_empty() {
                continue;
            }
            let (wname, wshape) = &shapes[0];
            let fan_in: usize = wshape[1..].iter().product();
            let limit = (6.0 / fan_in as f64).sqrt() as f32;
            let w = Tensor::from_fn(wshape, |_| rng.gen_range(-limit..limit));
            params.insert(wname.clone(), w);
            let (bname, bshape) = &shapes[1];
            params.insert(bname.clone(), Tensor::zeros(bshape));
        }
        Ok(Model {
            input_shape: input_shape.to_vec(),
            layers,
            params,
            num_classes,
        })
    }

    /// Assembles a model from explicit parameters, validating every shape.
    pub fn from_params(input_shape: &[usize], layers: Vec<Layer>, params: Params) -> Result<Self> {
        let num_classes = validate_layers(input_shape, &layers)?;
        let mut expected = 0;
        for layer in &layers {
            for (name, shape) in layer.param_shapes() {
                expected += 1;
                let t = params.get(&name).ok_or_else(|| {
                    DivaError::InvalidArgument(format!("missing parameter tensor '{name}'"))
                })?;
                if t.shape() != shape.as_slice() {
                    return Err(DivaError::ShapeMismatch {
                        at: format!("parameter '{name}'"),
                        expected: shape,
                        got: t.shape().to_vec(),
                    });
                }
            }
        }
        if expected != params.len() {
            return Err(DivaError::InvalidArgument(
                "parameter map contains tensors no layer owns".into(),
            ));
        }
        Ok(Model {
            input_shape: input_shape.to_vec(),
            layers,
            params,
            num_classes,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub(crate) fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Replaces one parameter tensor, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| DivaError::InvalidArgument(format!("unknown parameter '{name}'")))?;
        slot.ensure_same_shape(&value, name)?;
        *slot = value;
        Ok(())
    }

    /// Names of the weight (non-bias) tensors, in layer order.
    pub fn weight_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Dense { name, .. } | Layer::Conv2d { name, .. } => Some(weight_name(name)),
                _ => None,
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// True when both models share input shape, layer list and class count.
    pub fn same_architecture(&self, other: &Model) -> bool {
        self.input_shape == other.input_shape
            && self.layers == other.layers
            && self.num_classes == other.num_classes
    }

    /// SHA-256 over parameter names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        if x.shape().len() != self.input_shape.len() + 1
            || x.shape()[1..] != self.input_shape[..]
            || x.batch_size() == 0
        {
            let mut expected = vec![0];
            expected.extend_from_slice(&self.input_shape);
            return Err(DivaError::ShapeMismatch {
                at: "model input".into(),
                expected,
                got: x.shape().to_vec(),
            });
        }
        Ok(x.batch_size())
    }

    /// Forward pass with optional per-layer output fake-quantization.
    pub(crate) fn run(
        &self,
        x: &Tensor,
        act: Option<&[Option<Quantizer>]>,
        record: bool,
    ) -> Result<(Tensor, Option<Tape>)> {
        let n = self.check_input(x)?;
        let mut shape = self.input_shape.clone();
        let mut cur = x.clone();
        let mut records = Vec::with_capacity(if record { self.layers.len() } else { 0 });
        for (idx, layer) in self.layers.iter().enumerate() {
            let out_shape = layer.output_shape(idx, &shape)?;
            let mut argmax = None;
            let mut data = match layer {
                Layer::Dense {
                    name,
                    inputs,
                    outputs,
                } => ops::dense_forward(
                    cur.data(),
                    n,
                    *inputs,
                    *outputs,
                    self.params[&weight_name(name)].data(),
                    self.params[&bias_name(name)].data(),
                ),
                Layer::Conv2d {
                    name,
                    in_channels,
                    out_channels,
                } => ops::conv_forward(
                    cur.data(),
                    ConvDims {
                        n,
                        h: shape[0],
                        w: shape[1],
                        cin: *in_channels,
                        cout: *out_channels,
                    },
                    self.params[&weight_name(name)].data(),
                    self.params[&bias_name(name)].data(),
                ),
                Layer::Relu => cur.data().iter().map(|&v| v.max(0.0)).collect(),
                Layer::MaxPool2 => {
                    let (y, a) = ops::maxpool_forward(cur.data(), n, shape[0], shape[1], shape[2]);
                    argmax = Some(a);
                    y
                }
                Layer::Flatten => cur.data().to_vec(),
            };
            let mut ste_mask = None;
            if let Some(q) = act.and_then(|a| a.get(idx).copied().flatten()) {
                if record {
                    ste_mask = Some(data.iter().map(|&v| q.passes_gradient(v)).collect());
                }
                for v in &mut data {
                    *v = q.fake(*v);
                }
            }
            let mut full_shape = vec![n];
            full_shape.extend_from_slice(&out_shape);
            let next = Tensor::new(full_shape, data)?;
            if record {
                records.push(Record {
                    input: cur,
                    argmax,
                    ste_mask,
                });
            }
            cur = next;
            shape = out_shape;
        }
        if !cur.all_finite() {
            return Err(DivaError::Numerical("non-finite logits".into()));
        }
        let tape = record.then(|| Tape {
            records,
            output_shape: cur.shape().to_vec(),
        });
        Ok((cur, tape))
    }

    pub(crate) fn backprop(
        &self,
        tape: &Tape,
        dlogits: &Tensor,
        want_params: bool,
    ) -> Result<Gradients> {
        if dlogits.shape() != tape.output_shape.as_slice() {
            return Err(DivaError::ShapeMismatch {
                at: "backward seed".into(),
                expected: tape.output_shape.clone(),
                got: dlogits.shape().to_vec(),
            });
        }
        if tape.records.len() != self.layers.len() {
            return Err(DivaError::InvalidArgument(
                "tape was recorded on a different architecture".into(),
            ));
        }
        let mut grad = dlogits.data().to_vec();
        let mut param_grads = Params::new();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let rec = &tape.records[idx];
            if let Some(mask) = &rec.ste_mask {
                for (g, &pass) in grad.iter_mut().zip(mask) {
                    if !pass {
                        *g = 0.0;
                    }
                }
            }
            let x = &rec.input;
            let n = x.batch_size();
            grad = match layer {
                Layer::Dense {
                    name,
                    inputs,
                    outputs,
                } => {
                    let wn = weight_name(name);
                    let (dx, p) = ops::dense_backward(
                        x.data(),
                        &grad,
                        n,
                        *inputs,
                        *outputs,
                        self.params[&wn].data(),
                        want_params,
                    );
                    if let Some((dw, db)) = p {
                        param_grads.insert(wn, Tensor::new(vec![*outputs, *inputs], dw)?);
                        param_grads.insert(bias_name(name), Tensor::new(vec![*outputs], db)?);
                    }
                    dx
                }
                Layer::Conv2d {
                    name,
                    in_channels,
                    out_channels,
                } => {
                    let wn = weight_name(name);
                    let s = x.shape();
                    let (dx, p) = ops::conv_backward(
                        x.data(),
                        &grad,
                        ConvDims {
                            n,
                            h: s[1],
                            w: s[2],
                            cin: *in_channels,
                            cout: *out_channels,
                        },
                        self.params[&wn].data(),
                        want_params,
                    );
                    if let Some((dw, db)) = p {
                        param_grads.insert(
                            wn,
                            Tensor::new(vec![*out_channels, 3, 3, *in_channels], dw)?,
                        );
                        param_grads.insert(bias_name(name), Tensor::new(vec![*out_channels], db)?);
                    }
                    dx
                }
                Layer::Relu => grad
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect(),
                Layer::MaxPool2 => ops::maxpool_backward(
                    &grad,
                    rec.argmax.as_ref().expect("maxpool records argmax"),
                    x.len(),
                ),
                Layer::Flatten => grad,
            };
        }
        let input = Tensor::new(tape.records[0].input.shape().to_vec(), grad)?;
        Ok(Gradients {
            params: param_grads,
            input,
        })
    }

    /// Classes for a single sample ordered by descending probability.
    pub fn predict_topk(&self, input: &Tensor, k: usize) -> Result<Vec<usize>> {
        predict_topk(self, input, k)
    }

    /// Input to the final dense layer for every sample in `input`.
    pub fn penultimate_activations(&self, input: &Tensor) -> Result<Tensor> {
        penultimate_of(self, &self.layers, input)
    }
}

/// Top-`k` classes of the first sample in `input` by descending probability.
pub fn predict_topk(net: &dyn Classifier, input: &Tensor, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > net.num_classes() {
        return Err(DivaError::InvalidArgument(format!(
            "k must be in [1, {}], got {k}",
            net.num_classes()
        )));
    }
    let logits = net.logits(&input.sample(0))?;
    let mut ranked = rank_classes(logits.data());
    ranked.truncate(k);
    Ok(ranked)
}

pub(crate) fn penultimate_of(
    net: &dyn Classifier,
    layers: &[Layer],
    input: &Tensor,
) -> Result<Tensor> {
    if layers.len() < 2 {
        return Err(DivaError::InvalidArgument(
            "penultimate activations need at least two layers".into(),
        ));
    }
    let last_dense = layers
        .iter()
        .rposition(|l| matches!(l, Layer::Dense { .. }))
        .ok_or_else(|| DivaError::InvalidArgument("model has no dense layer".into()))?;
    let (_, tape) = net.forward(input, true)?;
    Ok(tape.expect("recorded").layer_input(last_dense).clone())
}

fn validate_layers(input_shape: &[usize], layers: &[Layer]) -> Result<usize> {
    if layers.is_empty() {
        return Err(DivaError::InvalidArgument("model has no layers".into()));
    }
    let mut names = std::collections::BTreeSet::new();
    let mut shape = input_shape.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        if let Layer::Dense { name, .. } | Layer::Conv2d { name, .. } = layer {
            if !names.insert(name.clone()) {
                return Err(DivaError::InvalidArgument(format!(
                    "duplicate layer name '{name}'"
                )));
            }
        }
        shape = layer.output_shape(i, &shape)?;
    }
    match shape.as_slice() {
        [k] if *k >= 1 => Ok(*k),
        _ => Err(DivaError::ShapeMismatch {
            at: "final layer".into(),
            expected: vec![0],
            got: shape,
        }),
    }
}

impl Classifier for Model {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn forward(&self, x: &Tensor, record: bool) -> Result<(Tensor, Option<Tape>)> {
        self.run(x, None, record)
    }

    fn backward(&self, tape: &Tape, dlogits: &Tensor, want_params: bool) -> Result<Gradients> {
        self.backprop(tape, dlogits, want_params)
    }
}
