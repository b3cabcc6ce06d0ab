mod common;

use common::*;
use diva_core::adapt::{AdaptedModel, QuantRange};
use diva_core::nn::{Classifier, Layer, Model};
use diva_core::Tensor;
use rand::Rng;

const TOL: f64 = 1e-3;

#[test]
fn every_layer_matches_finite_differences() {
    for case in layer_cases() {
        let err = layer_gradient_error(&case, 0..10).unwrap();
        assert!(err <= TOL, "{}: relative error {err:e}", case.name);
    }
}

#[test]
fn cross_entropy_matches_finite_differences() {
    let err = ce_gradient_error(0..10).unwrap();
    assert!(err <= TOL, "relative error {err:e}");
}

#[test]
fn diva_loss_matches_finite_differences() {
    let err = diva_gradient_error(0..10).unwrap();
    assert!(err <= TOL, "relative error {err:e}");
}

fn linear_pair(seed: u64, range: QuantRange) -> (Model, AdaptedModel) {
    let mut model = Model::new(&[5], vec![Layer::dense("fc", 5, 4)], seed).unwrap();
    randomize(&mut model, &mut rng(seed), 1.0);
    let adapted = AdaptedModel::quantize(&model, vec![Some(range)], 8, None).unwrap();
    (model, adapted)
}

#[test]
fn ste_is_identity_inside_the_range() {
    for seed in 0..10 {
        let (_, adapted) = linear_pair(seed, QuantRange::new(-100.0, 100.0).unwrap());
        let mut r = rng(seed + 50);
        let x = Tensor::from_fn(&[3, 5], |_| r.gen_range(-1.0..1.0));
        let g = Tensor::from_fn(&[3, 4], |_| r.gen_range(-1.0..1.0));
        let (_, tape_a) = adapted.forward(&x, true).unwrap();
        let (_, tape_b) = adapted.base().forward(&x, true).unwrap();
        let ga = adapted.backward(tape_a.as_ref().unwrap(), &g, true).unwrap();
        let gb = adapted.base().backward(tape_b.as_ref().unwrap(), &g, true).unwrap();
        assert_eq!(ga.input.data(), gb.input.data());
        for (name, t) in &gb.params {
            assert_eq!(ga.params[name].data(), t.data(), "{name}");
        }
    }
}

#[test]
fn ste_blocks_gradients_outside_the_range() {
    let range = QuantRange::new(-0.3, 0.3).unwrap();
    let (_, adapted) = linear_pair(3, range);
    let mut r = rng(9);
    let x = Tensor::from_fn(&[4, 5], |_| r.gen_range(-1.0..1.0));
    let g = Tensor::from_fn(&[4, 4], |_| r.gen_range(-1.0..1.0));
    let pre = adapted.base().logits(&x).unwrap();
    let masked: Vec<f32> = g
        .data()
        .iter()
        .zip(pre.data())
        .map(|(&gv, &z)| if z >= range.min && z <= range.max { gv } else { 0.0 })
        .collect();
    assert!(masked.iter().any(|&v| v == 0.0), "fixture must clip some outputs");
    let (_, tape) = adapted.forward(&x, true).unwrap();
    let got = adapted.backward(tape.as_ref().unwrap(), &g, false).unwrap().input;
    let (_, tape_b) = adapted.base().forward(&x, true).unwrap();
    let expect = adapted
        .base()
        .backward(tape_b.as_ref().unwrap(), &Tensor::new(vec![4, 4], masked).unwrap(), false)
        .unwrap()
        .input;
    assert_eq!(got.data(), expect.data());
}
