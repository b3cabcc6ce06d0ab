mod common;

use common::*;
use diva_core::adapt::{prune_magnitude, prune_then_quantize, AdaptedModel, QatConfig};
use diva_core::checkpoint::{
    decode, encode_adapted, encode_model, export_adapted, import_adapted, load, load_model,
    save_model, Checkpoint, Provenance,
};
use diva_core::nn::{Classifier, Layer, TrainConfig};
use diva_core::{DivaError, Tensor};

fn provenance() -> Provenance {
    [("seed".to_string(), "5".to_string()), ("note".into(), "unit".into())]
        .into_iter()
        .collect()
}

fn adapted_variants() -> Vec<AdaptedModel> {
    let s = small();
    let data = s.train.data.gather(&(0..64).collect::<Vec<_>>());
    let none = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let mut qat = QatConfig::default();
    qat.train.epochs = 1;
    vec![
        s.pair.adapted().clone(),
        prune_magnitude(s.pair.original(), 0.5, &data, &none).unwrap(),
        prune_then_quantize(s.pair.original(), 0.5, &data, &none, &qat).unwrap(),
    ]
}

fn inputs() -> Tensor {
    small().validation.data.inputs.slice_batch(0, 100)
}

fn assert_same_logits(a: &dyn Classifier, b: &dyn Classifier) {
    let x = inputs();
    let la = a.logits(&x).unwrap();
    let lb = b.logits(&x).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&la), bits(&lb));
}

#[test]
fn model_roundtrip_is_bit_identical() {
    let m = small().pair.original();
    let (ck, prov) = decode(&encode_model(m, &provenance()).unwrap()).unwrap();
    assert_eq!(prov, provenance());
    let Checkpoint::Model(back) = ck else {
        panic!("expected a model")
    };
    assert_eq!(&back, m);
    assert_same_logits(&back, m);
}

#[test]
fn every_adapted_mode_roundtrips() {
    for a in adapted_variants() {
        let (ck, _) = decode(&encode_adapted(&a, &provenance()).unwrap()).unwrap();
        let Checkpoint::Adapted(back) = ck else {
            panic!("expected an adapted model")
        };
        assert_eq!(back.mode(), a.mode());
        assert_eq!(back.masks(), a.masks());
        assert_eq!(back.digest(), a.digest());
        assert_same_logits(&back, &a);
    }
}

#[test]
fn files_roundtrip_and_kinds_are_checked() {
    let dir = tempfile::tempdir().unwrap();
    let s = small();
    let mp = dir.path().join("m.ckpt");
    let ap = dir.path().join("a.ckpt");
    save_model(&mp, s.pair.original(), &provenance()).unwrap();
    export_adapted(&ap, s.pair.adapted(), &Provenance::new()).unwrap();
    assert_eq!(&load_model(&mp).unwrap(), s.pair.original());
    assert_eq!(import_adapted(&ap).unwrap().digest(), s.pair.adapted().digest());
    assert!(load_model(&ap).is_err());
    assert!(import_adapted(&mp).is_err());
    assert_eq!(load(&mp).unwrap().1, provenance());
}

#[test]
fn missing_file_error_names_the_path() {
    let err = load(std::path::Path::new("/nonexistent/x.ckpt")).unwrap_err();
    assert!(matches!(err, DivaError::Checkpoint(_)));
    assert!(err.to_string().contains("/nonexistent/x.ckpt"));
}

#[test]
fn every_truncation_is_rejected() {
    let bytes = encode_adapted(&adapted_variants()[2], &Provenance::new()).unwrap();
    let step = (bytes.len() / 97).max(1);
    for cut in (0..bytes.len()).step_by(step) {
        let err = decode(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, DivaError::Checkpoint(_)), "cut {cut}: {err}");
    }
}

#[test]
fn bad_magic_corrupt_header_and_trailing_bytes_are_rejected() {
    let bytes = encode_model(small().pair.original(), &Provenance::new()).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode(&bad).is_err());

    let mut corrupt = bytes.clone();
    let start = bytes.iter().position(|&b| b == b'{').unwrap();
    corrupt[start] = b'[';
    assert!(decode(&corrupt).is_err());

    let mut long = bytes;
    long.push(0);
    assert!(decode(&long).is_err());
}

fn hand_built(weights: &[f32], bias: &[f32]) -> Vec<u8> {
    let header = serde_json::json!({
        "format": 1,
        "kind": "model",
        "input_shape": [2],
        "num_classes": 2,
        "layers": [
            {"type": "flatten"},
            {"type": "dense", "name": "fc", "inputs": 2, "outputs": 2}
        ],
        "tensors": [
            {"name": "fc.bias", "dtype": "f32", "shape": [2], "offset": 0, "length": 8},
            {"name": "fc.weight", "dtype": "f32", "shape": [2, 2], "offset": 8, "length": 16}
        ],
        "provenance": {"origin": "hand"}
    });
    let json = serde_json::to_vec(&header).unwrap();
    let mut out = b"DIVA1\n".to_vec();
    out.extend(format!("{}\n", json.len()).as_bytes());
    out.extend(json);
    for v in bias.iter().chain(weights) {
        out.extend(v.to_le_bytes());
    }
    out
}

#[test]
fn hand_built_checkpoint_loads() {
    let bytes = hand_built(&[1.0, 2.0, 3.0, 4.0], &[0.5, -0.5]);
    let (ck, prov) = decode(&bytes).unwrap();
    assert_eq!(prov["origin"], "hand");
    let Checkpoint::Model(m) = ck else {
        panic!("expected a model")
    };
    assert_eq!(m.layers(), &[Layer::Flatten, Layer::dense("fc", 2, 2)]);
    let z = m.logits(&Tensor::row(&[1.0, 1.0])).unwrap();
    assert_eq!(z.data(), &[3.5, 6.5]);
}

#[test]
fn non_finite_parameters_are_rejected() {
    let bytes = hand_built(&[1.0, f32::NAN, 3.0, 4.0], &[0.0, 0.0]);
    assert!(decode(&bytes).is_err());
}
