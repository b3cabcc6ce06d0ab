mod common;

use common::*;
use diva_core::nn::{
    accuracy, cross_entropy, mlp, predict_topk, sgd_train, Batch, Classifier, Layer, LogitLoss,
    Model, TrainConfig,
};
use diva_core::Tensor;
use rand::Rng;

/// Loss that sums every logit.
struct SumLogits;

impl LogitLoss for SumLogits {
    fn evaluate(&self, logits: &Tensor) -> diva_core::Result<(f32, Tensor)> {
        let v = logits.data().iter().sum();
        Ok((v, Tensor::full(logits.shape(), 1.0)))
    }
}

/// Model whose logits are `bias` regardless of input.
fn constant_model(bias: &[f32]) -> Model {
    let k = bias.len();
    let mut m = Model::new(&[1], vec![Layer::dense("fc", 1, k)], 0).unwrap();
    m.set_param("fc.weight", Tensor::zeros(&[k, 1])).unwrap();
    m.set_param("fc.bias", Tensor::new(vec![k], bias.to_vec()).unwrap()).unwrap();
    m
}

#[test]
fn cross_entropy_limits() {
    let confident = cross_entropy(&Tensor::row(&[100.0, 0.0, 0.0]), &[0]).unwrap();
    assert!(confident < 1e-6, "{confident}");
    let uniform = cross_entropy(&Tensor::row(&[0.3; 5]), &[2]).unwrap();
    assert!((uniform as f64 - 5f64.ln()).abs() < 1e-6);
}

#[test]
fn cross_entropy_matches_log_softmax() {
    let mut r = rng(4);
    for _ in 0..20 {
        let z: Vec<f32> = (0..3).map(|_| r.gen_range(-5.0..5.0)).collect();
        let y = r.gen_range(0..3);
        let expect = -ref_softmax(&z.iter().map(|&v| v as f64).collect::<Vec<_>>())[y].ln();
        let got = cross_entropy(&Tensor::row(&z), &[y]).unwrap() as f64;
        assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
    }
}

#[test]
fn linear_input_gradient_is_weight_column_sum() {
    let mut m = Model::new(&[4], vec![Layer::dense("fc", 4, 3)], 1).unwrap();
    randomize(&mut m, &mut rng(1), 1.0);
    let x = Tensor::from_fn(&[1, 4], |i| i as f32 * 0.1);
    let (_, g) = m.input_gradient(&x, &SumLogits).unwrap();
    let w = m.param("fc.weight").unwrap().data();
    for i in 0..4 {
        let col: f32 = (0..3).map(|o| w[o * 4 + i]).sum();
        assert!((g.data()[i] - col).abs() < 1e-6);
    }
}

#[test]
fn dead_relu_blocks_the_gradient() {
    let layers = vec![Layer::dense("a", 3, 4), Layer::Relu, Layer::dense("b", 4, 2)];
    let mut m = Model::new(&[3], layers, 2).unwrap();
    m.set_param("a.bias", Tensor::full(&[4], -100.0)).unwrap();
    let x = Tensor::from_fn(&[2, 3], |i| (i as f32 * 0.37).sin());
    let (_, g) = m.input_gradient(&x, &SumLogits).unwrap();
    assert!(g.data().iter().all(|&v| v == 0.0));
}

fn blobs(seed: u64, n: usize) -> Batch {
    let mut r = rng(seed);
    let mut xs = Vec::with_capacity(n * 2);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let c = if y == 0 { -1.0 } else { 1.0 };
        xs.push(c + r.gen_range(-0.3..0.3));
        xs.push(-c + r.gen_range(-0.3..0.3));
        ys.push(y);
    }
    Batch::new(Tensor::new(vec![n, 2], xs).unwrap(), ys).unwrap()
}

fn blob_model() -> Model {
    Model::new(&[2], mlp(&[2], &[8], 2), 7).unwrap()
}

#[test]
fn zero_epochs_leave_the_model_unchanged() {
    let m = blob_model();
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let (trained, report) = sgd_train(&m, &blobs(0, 40), &cfg).unwrap();
    assert_eq!(trained, m);
    assert!(report.epoch_losses.is_empty());
}

#[test]
fn separable_blobs_are_learned() {
    let data = blobs(1, 200);
    let cfg = TrainConfig {
        epochs: 20,
        ..TrainConfig::default()
    };
    let (trained, _) = sgd_train(&blob_model(), &data, &cfg).unwrap();
    assert!(accuracy(&trained, &data).unwrap() >= 0.99);
}

#[test]
fn training_is_bit_identical_across_runs() {
    let data = blobs(2, 100);
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let (a, ra) = sgd_train(&blob_model(), &data, &cfg).unwrap();
    let (b, rb) = sgd_train(&blob_model(), &data, &cfg).unwrap();
    assert_eq!(a.digest(), b.digest());
    assert_eq!(ra, rb);
}

#[test]
fn invalid_training_config_is_rejected() {
    let cfg = TrainConfig {
        lr: 0.0,
        ..TrainConfig::default()
    };
    assert!(sgd_train(&blob_model(), &blobs(0, 10), &cfg).is_err());
}

#[test]
fn topk_examples() {
    let x = Tensor::zeros(&[1, 1]);
    let m = constant_model(&[0.1f32.ln(), 0.9f32.ln()]);
    assert_eq!(predict_topk(&m, &x, 1).unwrap(), vec![1]);
    let tie = constant_model(&[0.0, 0.0]);
    assert_eq!(predict_topk(&tie, &x, 2).unwrap(), vec![0, 1]);
    assert!(predict_topk(&tie, &x, 0).is_err());
    assert!(predict_topk(&tie, &x, 3).is_err());
}

#[test]
fn topk_matches_a_sort() {
    let mut r = rng(11);
    let x = Tensor::zeros(&[1, 1]);
    for _ in 0..20 {
        let z: Vec<f32> = (0..10).map(|_| r.gen_range(-3.0..3.0)).collect();
        let m = constant_model(&z);
        let mut idx: Vec<usize> = (0..10).collect();
        idx.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).unwrap());
        assert_eq!(predict_topk(&m, &x, 5).unwrap(), idx[..5].to_vec());
    }
}

#[test]
fn penultimate_of_two_dense_layers_is_the_first_output() {
    let layers = vec![Layer::dense("a", 3, 4), Layer::dense("b", 4, 2)];
    let mut m = Model::new(&[3], layers, 3).unwrap();
    randomize(&mut m, &mut rng(3), 1.0);
    let x = Tensor::from_fn(&[2, 3], |i| i as f32 * 0.2 - 0.3);
    let got = m.penultimate_activations(&x).unwrap();
    let p = ref_params(&m);
    for s in 0..2 {
        let row = &to_f64(&x)[s * 3..s * 3 + 3];
        let expect = ref_forward(&m.layers()[..1], &p, &[3], row);
        let err = rel_err(&to_f64(&got)[s * 4..s * 4 + 4], &expect);
        assert!(err < 1e-6);
    }
}

#[test]
fn penultimate_after_leading_relu_is_the_input() {
    let m = Model::new(&[3], vec![Layer::Relu, Layer::dense("fc", 3, 2)], 0).unwrap();
    let x = Tensor::from_fn(&[4, 3], |i| i as f32 * 0.1);
    assert_eq!(m.penultimate_activations(&x).unwrap().data(), x.data());
}

#[test]
fn penultimate_matches_the_tape() {
    let m = Model::new(&[2], mlp(&[2], &[5, 4], 3), 9).unwrap();
    let x = Tensor::from_fn(&[3, 2], |i| (i as f32).cos());
    let (_, tape) = m.forward(&x, true).unwrap();
    let tape = tape.unwrap();
    let last = tape.len() - 1;
    assert_eq!(
        m.penultimate_activations(&x).unwrap().data(),
        tape.layer_input(last).data()
    );
}
