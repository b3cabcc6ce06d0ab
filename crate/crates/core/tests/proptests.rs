use diva_core::adapt::{deviations, quantize_tensor, dequantize, QuantRange};
use diva_core::attack::clip_project;
use diva_core::checkpoint::{decode, encode_model, Checkpoint, Provenance};
use diva_core::harness::dssim;
use diva_core::nn::{softmax_probs, Batch, Layer, Model};
use diva_core::Tensor;
use proptest::prelude::*;

fn values(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-10.0f32..10.0, n)
}

proptest! {
    #[test]
    fn fake_quant_error_is_half_a_step(v in values(32), bits in 2u8..=8) {
        let t = Tensor::new(vec![32], v.clone()).unwrap();
        let q = quantize_tensor(&t, bits).unwrap();
        prop_assert!(q.codes.iter().all(|&c| (c as u32) < (1u32 << bits)));
        let back = dequantize(&q).unwrap();
        let step = q.params.scale;
        for (a, b) in v.iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= step / 2.0 + 1e-5 * a.abs().max(1.0));
        }
    }

    #[test]
    fn zero_is_exact(v in values(16), bits in 2u8..=8) {
        let mut v = v;
        v[3] = 0.0;
        let q = quantize_tensor(&Tensor::new(vec![16], v).unwrap(), bits).unwrap();
        prop_assert_eq!(dequantize(&q).unwrap().data()[3], 0.0);
    }

    #[test]
    fn range_always_contains_zero(a in -5.0f32..5.0, b in -5.0f32..5.0) {
        let r = QuantRange::new(a.min(b), a.max(b)).unwrap();
        prop_assert!(r.min <= 0.0 && r.max >= 0.0);
    }

    #[test]
    fn projection_lands_in_the_box(
        x0 in prop::collection::vec(0.0f32..=1.0, 12),
        xt in prop::collection::vec(-1.0f32..2.0, 12),
        eps in 0.001f32..0.5,
    ) {
        let x0 = Tensor::row(&x0);
        let p = clip_project(&Tensor::row(&xt), &x0, eps).unwrap();
        prop_assert!(p.linf_distance(&x0) <= eps + 1e-6);
        prop_assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(clip_project(&p, &x0, eps).unwrap(), p);
    }

    #[test]
    fn dssim_is_symmetric_and_bounded(
        a in prop::collection::vec(0.0f32..=1.0, 64),
        b in prop::collection::vec(0.0f32..=1.0, 64),
    ) {
        let a = Tensor::new(vec![8, 8, 1], a).unwrap();
        let b = Tensor::new(vec![8, 8, 1], b).unwrap();
        let d = dssim(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, dssim(&b, &a).unwrap());
    }

    #[test]
    fn softmax_rows_are_distributions(z in prop::collection::vec(-80.0f32..80.0, 3 * 7)) {
        let p = softmax_probs(&Tensor::new(vec![3, 7], z).unwrap());
        for r in 0..3 {
            let row = p.row_slice(r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn instability_is_a_fraction(
        labels in prop::collection::vec(0usize..3, 1..40),
        wa in prop::collection::vec(-1.0f32..1.0, 6),
        wb in prop::collection::vec(-1.0f32..1.0, 6),
    ) {
        let n = labels.len();
        let x = Tensor::from_fn(&[n, 2], |i| ((i * 7919) % 13) as f32 / 13.0);
        let data = Batch::new(x, labels).unwrap();
        let mk = |w: &[f32]| {
            let mut m = Model::new(&[2], vec![Layer::dense("fc", 2, 3)], 0).unwrap();
            m.set_param("fc.weight", Tensor::new(vec![3, 2], w.to_vec()).unwrap()).unwrap();
            m
        };
        let d = deviations(&mk(&wa), &mk(&wb), &data).unwrap();
        prop_assert!((0.0..=1.0).contains(&d.instability()));
        prop_assert!(d.original_only_correct + d.adapted_only_correct <= n);
    }

    #[test]
    fn model_checkpoints_roundtrip(seed in any::<u64>()) {
        let m = Model::new(&[4, 4, 1], diva_core::nn::lenet(&[4, 4, 1], 3, 2, 5), seed).unwrap();
        let (ck, _) = decode(&encode_model(&m, &Provenance::new()).unwrap()).unwrap();
        prop_assert_eq!(ck, Checkpoint::Model(m));
    }
}
