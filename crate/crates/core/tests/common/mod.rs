//! Shared test oracles: an f64 reference network and finite-difference checks.

#![allow(dead_code)]

use std::collections::BTreeMap;

use diva_core::adapt::{AdaptedModel, Masks, ModelPair};
use diva_core::attack::ScoreMode;
use diva_core::diva::{diva_loss_grad, DivaObjective};
use diva_core::nn::{Classifier, CrossEntropy, Layer, LogitLoss, Model};
use diva_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type RefParams = BTreeMap<String, Vec<f64>>;

pub fn ref_params(model: &Model) -> RefParams {
    model
        .params()
        .iter()
        .map(|(k, t)| (k.clone(), t.data().iter().map(|&v| v as f64).collect()))
        .collect()
}

/// Reference forward pass of one sample. `shape` is the per-sample input shape.
pub fn ref_forward(layers: &[Layer], params: &RefParams, shape: &[usize], x: &[f64]) -> Vec<f64> {
    let mut shape = shape.to_vec();
    let mut v = x.to_vec();
    for layer in layers {
        match layer {
            Layer::Dense {
                name,
                inputs,
                outputs,
            } => {
                let w = &params[&format!("{name}.weight")];
                let b = &params[&format!("{name}.bias")];
                v = (0..*outputs)
                    .map(|o| b[o] + (0..*inputs).map(|i| w[o * inputs + i] * v[i]).sum::<f64>())
                    .collect();
                shape = vec![*outputs];
            }
            Layer::Conv2d {
                name,
                in_channels: ci,
                out_channels: co,
            } => {
                let (h, wd) = (shape[0], shape[1]);
                let w = &params[&format!("{name}.weight")];
                let b = &params[&format!("{name}.bias")];
                let mut out = vec![0.0; h * wd * co];
                for r in 0..h {
                    for c in 0..wd {
                        for o in 0..*co {
                            let mut s = b[o];
                            for dr in 0..3 {
                                for dc in 0..3 {
                                    let rr = r as isize + dr as isize - 1;
                                    let cc = c as isize + dc as isize - 1;
                                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= wd as isize {
                                        continue;
                                    }
                                    for i in 0..*ci {
                                        s += w[((o * 3 + dr) * 3 + dc) * ci + i]
                                            * v[(rr as usize * wd + cc as usize) * ci + i];
                                    }
                                }
                            }
                            out[(r * wd + c) * co + o] = s;
                        }
                    }
                }
                v = out;
                shape = vec![h, wd, *co];
            }
            Layer::Relu => v.iter_mut().for_each(|a| *a = a.max(0.0)),
            Layer::MaxPool2 => {
                let (h, wd, c) = (shape[0], shape[1], shape[2]);
                let (oh, ow) = (h / 2, wd / 2);
                let mut out = vec![f64::NEG_INFINITY; oh * ow * c];
                for r in 0..oh * 2 {
                    for q in 0..ow * 2 {
                        for k in 0..c {
                            let o = &mut out[((r / 2) * ow + q / 2) * c + k];
                            *o = o.max(v[(r * wd + q) * c + k]);
                        }
                    }
                }
                v = out;
                shape = vec![oh, ow, c];
            }
            Layer::Flatten => shape = vec![v.len()],
        }
    }
    v
}

pub fn ref_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Central difference of `f` at `x`, coordinate by coordinate.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`; zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nd = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        0.0
    } else {
        nd / scale
    }
}

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random parameters (including non-zero biases) for `model`.
pub fn randomize(model: &mut Model, rng: &mut ChaCha8Rng, scale: f32) {
    let names: Vec<(String, Vec<usize>)> = model
        .params()
        .iter()
        .map(|(k, t)| (k.clone(), t.shape().to_vec()))
        .collect();
    for (name, shape) in names {
        let t = Tensor::from_fn(&shape, |_| rng.gen_range(-scale..scale));
        model.set_param(&name, t).unwrap();
    }
}

/// Layer-level test network: the layer under test followed by whatever is
/// needed to reach a flat output.
pub struct LayerCase {
    pub name: &'static str,
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

pub fn layer_cases() -> Vec<LayerCase> {
    vec![
        LayerCase {
            name: "dense",
            input_shape: vec![6],
            layers: vec![Layer::dense("fc", 6, 4)],
        },
        LayerCase {
            name: "conv2d",
            input_shape: vec![5, 4, 2],
            layers: vec![Layer::conv("conv", 2, 3), Layer::Flatten],
        },
        LayerCase {
            name: "relu",
            input_shape: vec![7],
            layers: vec![Layer::Relu],
        },
        LayerCase {
            name: "maxpool2x2",
            input_shape: vec![5, 6, 2],
            layers: vec![Layer::MaxPool2, Layer::Flatten],
        },
        LayerCase {
            name: "flatten",
            input_shape: vec![3, 2, 2],
            layers: vec![Layer::Flatten],
        },
        LayerCase {
            name: "lenet-stack",
            input_shape: vec![6, 6, 1],
            layers: vec![
                Layer::conv("c1", 1, 2),
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Flatten,
                Layer::dense("f1", 18, 5),
                Layer::Relu,
                Layer::dense("f2", 5, 3),
            ],
        },
    ]
}

/// Input values with no two entries closer than 1e-3 and none within 0.02
/// of zero, so finite differences never straddle a ReLU or pooling kink.
fn kink_free_input(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    order
        .into_iter()
        .map(|k| {
            let mag = 0.05 + 0.9 * (k as f32 + rng.gen_range(0.2..0.8)) / n as f32;
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Worst relative error of input and parameter gradients over `seeds`
/// instances of one layer case, against central differences of the
/// reference network under a random linear loss on a batch of two.
pub fn layer_gradient_error(case: &LayerCase, seeds: std::ops::Range<u64>) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for seed in seeds {
        let mut r = rng(1000 + seed);
        let mut model = Model::new(&case.input_shape, case.layers.clone(), seed)?;
        randomize(&mut model, &mut r, 0.6);
        let per: usize = case.input_shape.iter().product();
        let batch = 2;
        let mut shape = vec![batch];
        shape.extend(&case.input_shape);
        let xs: Vec<f32> = (0..batch).flat_map(|_| kink_free_input(&mut r, per)).collect();
        let x = Tensor::new(shape, xs)?;
        let k = model.num_classes();
        let weights: Vec<f64> = (0..batch * k).map(|_| r.gen_range(-1.0..1.0)).collect();
        let wt = Tensor::new(vec![batch, k], weights.iter().map(|&v| v as f32).collect())?;
        let loss = |z: &Tensor| -> Result<(f32, Tensor)> {
            let v: f32 = z.data().iter().zip(wt.data()).map(|(a, b)| a * b).sum();
            Ok((v, wt.clone()))
        };
        let (_, grads) = model.grad(&x, &loss)?;

        let params = ref_params(&model);
        let xd = to_f64(&x);
        let total = |params: &RefParams, xd: &[f64]| -> f64 {
            (0..batch)
                .map(|b| {
                    let z = ref_forward(&case.layers, params, &case.input_shape, &xd[b * per..(b + 1) * per]);
                    z.iter().zip(&weights[b * k..(b + 1) * k]).map(|(a, w)| a * w).sum::<f64>()
                })
                .sum()
        };
        // The engine forward itself must agree with the reference.
        let logits = model.logits(&x)?;
        for b in 0..batch {
            let z = ref_forward(&case.layers, &params, &case.input_shape, &xd[b * per..(b + 1) * per]);
            for (e, o) in logits.row_slice(b).iter().zip(&z) {
                assert!((*e as f64 - o).abs() <= 1e-4 * (1.0 + o.abs()), "{}: forward {e} vs {o}", case.name);
            }
        }
        let fd_x = central_diff(&xd, 1e-6, |xp| total(&params, xp));
        worst = worst.max(rel_err(&to_f64(&grads.input), &fd_x));
        for (name, values) in &params {
            let fd = central_diff(values, 1e-6, |vp| {
                let mut p = params.clone();
                p.insert(name.clone(), vp.to_vec());
                total(&p, &xd)
            });
            worst = worst.max(rel_err(&to_f64(&grads.params[name]), &fd));
        }
    }
    Ok(worst)
}

fn ref_mean_ce(z: &[f64], labels: &[usize], k: usize) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(b, &y)| -ref_softmax(&z[b * k..(b + 1) * k])[y].ln())
        .sum::<f64>()
        / labels.len() as f64
}

/// Worst relative error of the mean cross-entropy logit gradient.
pub fn ce_gradient_error(seeds: std::ops::Range<u64>) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for seed in seeds {
        let mut r = rng(2000 + seed);
        let (n, k) = (3, 7);
        let z = Tensor::from_fn(&[n, k], |_| r.gen_range(-3.0..3.0));
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
        let (value, grad) = CrossEntropy { labels: &labels }.evaluate(&z)?;
        let zd = to_f64(&z);
        let expect = ref_mean_ce(&zd, &labels, k);
        assert!((value as f64 - expect).abs() <= 1e-5 * (1.0 + expect), "CE value {value} vs {expect}");
        let fd = central_diff(&zd, 1e-6, |zp| ref_mean_ce(zp, &labels, k));
        worst = worst.max(rel_err(&to_f64(&grad), &fd));
    }
    Ok(worst)
}

pub fn small_cnn() -> (Vec<usize>, Vec<Layer>) {
    (
        vec![6, 6, 1],
        vec![
            Layer::conv("c1", 1, 2),
            Layer::Relu,
            Layer::MaxPool2,
            Layer::Flatten,
            Layer::dense("f1", 18, 6),
            Layer::Relu,
            Layer::dense("f2", 6, 4),
        ],
    )
}

/// Worst relative error of the DIVA loss input gradient (probability and
/// logit scores, untargeted and targeted) over a smooth two-model pair.
pub fn diva_gradient_error(seeds: std::ops::Range<u64>) -> Result<f64> {
    let (shape, layers) = small_cnn();
    let mut worst: f64 = 0.0;
    for seed in seeds {
        let mut r = rng(3000 + seed);
        let mut a = Model::new(&shape, layers.clone(), seed)?;
        let mut b = Model::new(&shape, layers.clone(), seed + 100)?;
        randomize(&mut a, &mut r, 0.7);
        randomize(&mut b, &mut r, 0.7);
        let pair = ModelPair::new(a.clone(), AdaptedModel::pruned(b.clone(), Masks::new())?)?;
        let x = Tensor::from_fn(&[1, 6, 6, 1], |_| r.gen_range(0.05..0.95));
        let y = r.gen_range(0..4);
        let c: f32 = r.gen_range(0.0..5.0);
        let target = if seed % 2 == 0 { Some((y + 1) % 4) } else { None };
        let w: f32 = if target.is_some() { r.gen_range(0.1..2.0) } else { 0.0 };
        let (pa, pb) = (ref_params(&a), ref_params(&b));
        for mode in [ScoreMode::Probability, ScoreMode::Logit] {
            let objective = DivaObjective {
                c,
                target,
                target_weight: w,
            };
            let (value, grad) = diva_loss_grad(&pair, &x, y, &objective, mode)?;
            let f = |xp: &[f64]| -> f64 {
                let zo = ref_forward(&layers, &pa, &shape, xp);
                let za = ref_forward(&layers, &pb, &shape, xp);
                let (so, sa) = match mode {
                    ScoreMode::Probability => (ref_softmax(&zo)[y], ref_softmax(&za)[y]),
                    ScoreMode::Logit => (zo[y], za[y]),
                };
                let mut v = so - c as f64 * sa;
                if let Some(t) = target {
                    let p = ref_softmax(&za);
                    v -= w as f64
                        * p.iter()
                            .enumerate()
                            .map(|(k, pk)| (pk - if k == t { 1.0 } else { 0.0 }).powi(2))
                            .sum::<f64>();
                }
                v
            };
            let xd = to_f64(&x);
            let expect = f(&xd);
            assert!((value as f64 - expect).abs() <= 1e-4 * (1.0 + expect.abs()), "diva value {value} vs {expect}");
            worst = worst.max(rel_err(&to_f64(&grad), &central_diff(&xd, 1e-6, f)));
        }
    }
    Ok(worst)
}

/// A small trained model pair on synthetic data, shared per test binary.
pub struct Small {
    pub train: diva_core::harness::Dataset,
    pub validation: diva_core::harness::Dataset,
    pub pair: ModelPair,
}

pub fn small() -> &'static Small {
    use diva_core::adapt::{qat_train, QatConfig};
    use diva_core::harness::data::{synth_dataset, Split};
    use diva_core::nn::{lenet, sgd_train, TrainConfig};
    static S: std::sync::OnceLock<Small> = std::sync::OnceLock::new();
    S.get_or_init(|| {
        let all = synth_dataset(5, 1000, 10).unwrap();
        let train = all.subset(&(0..800).collect::<Vec<_>>(), "small/train", Split::Train).unwrap();
        let validation = all
            .subset(&(800..1000).collect::<Vec<_>>(), "small/validation", Split::Validation)
            .unwrap();
        let shape = train.image_shape().to_vec();
        let init = Model::new(&shape, lenet(&shape, 10, 6, 32), 5).unwrap();
        let cfg = TrainConfig {
            lr: 0.02,
            epochs: 6,
            batch_size: 32,
            momentum: 0.9,
            seed: 3,
            early_stop: None,
        };
        let (original, _) = sgd_train(&init, &train.data, &cfg).unwrap();
        let mut qat = QatConfig::default();
        qat.train.epochs = 1;
        let adapted = qat_train(&original, &train.data, &qat).unwrap();
        Small {
            train,
            validation,
            pair: ModelPair::new(original, adapted).unwrap(),
        }
    })
}
