mod common;

use common::*;
use diva_core::adapt::{AdaptedModel, Masks, ModelPair};
use diva_core::attack::{AttackConfig, AttackVariant};
use diva_core::checkpoint::{export_adapted, save_model, Provenance};
use diva_core::harness::data::{encode_idx, parse_idx, synth_dataset, Split};
use diva_core::harness::experiment::{Arch, Stage};
use diva_core::harness::metrics::evaluate_full;
use diva_core::harness::report::encode_pgm;
use diva_core::harness::{
    dssim, evaluate, filter_correct, pca2_fit, run_experiment, Dataset, EvalConfig,
    ExperimentConfig,
};
use diva_core::nn::{predict_topk, Batch, Classifier, Layer, Model};
use diva_core::{DivaError, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

/// Plain per-window SSIM over one channel, all sums in f64.
fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let (c1, c2) = (1e-4, 9e-4);
    let (kh, kw) = (7.min(h), 7.min(w));
    let mut vals = Vec::new();
    for i in 0..=h - kh {
        for j in 0..=w - kw {
            let idx: Vec<usize> = (0..kh)
                .flat_map(|di| (0..kw).map(move |dj| (i + di) * w + j + dj))
                .collect();
            let n = idx.len() as f64;
            let ma = idx.iter().map(|&t| a[t]).sum::<f64>() / n;
            let mb = idx.iter().map(|&t| b[t]).sum::<f64>() / n;
            let va = idx.iter().map(|&t| (a[t] - ma).powi(2)).sum::<f64>() / n;
            let vb = idx.iter().map(|&t| (b[t] - mb).powi(2)).sum::<f64>() / n;
            let cov = idx.iter().map(|&t| (a[t] - ma) * (b[t] - mb)).sum::<f64>() / n;
            vals.push(
                (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)),
            );
        }
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

#[test]
fn dssim_matches_windowed_oracle() {
    let mut r = rng(2);
    for (h, w) in [(16, 16), (9, 12), (5, 5)] {
        let a = Tensor::from_fn(&[h, w, 1], |_| r.gen_range(0.0..1.0));
        let b = Tensor::from_fn(&[h, w, 1], |i| (a.data()[i] + r.gen_range(-0.1..0.1)).clamp(0.0, 1.0));
        let expect = (1.0 - ssim_oracle(&to_f64(&a), &to_f64(&b), h, w)) / 2.0;
        let got = dssim(&a, &b).unwrap();
        assert!((got - expect).abs() < 1e-9, "{h}x{w}: {got} vs {expect}");
        assert_eq!(got, dssim(&b, &a).unwrap());
        assert_eq!(dssim(&a, &a).unwrap(), 0.0);
    }
}

#[test]
fn dssim_of_constant_images() {
    let a = Tensor::full(&[8, 8, 1], 0.5);
    let b = Tensor::full(&[8, 8, 1], 0.6);
    let s = (2.0 * 0.5 * 0.6 + 1e-4) / (0.25 + 0.36 + 1e-4);
    assert!((dssim(&a, &b).unwrap() - (1.0 - s) / 2.0).abs() < 1e-6);
    assert!(dssim(&a, &Tensor::full(&[8, 7, 1], 0.5)).is_err());
}

#[test]
fn pca_matches_a_dense_eigensolver() {
    let mut r = rng(3);
    let scales = [3.0, 2.0, 1.0, 0.5, 0.2];
    let (n, d) = (300, 5);
    let x = Tensor::from_fn(&[n, d], |k| scales[k % d] * r.gen_range(-1.0f32..1.0));
    let fit = pca2_fit(&x).unwrap();
    let m = DMatrix::from_fn(n, d, |i, j| x.data()[i * d + j] as f64);
    let mean = m.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    for k in 0..2 {
        let lam = eig.eigenvalues[order[k]];
        assert!((fit.eigenvalues[k] - lam).abs() < 1e-5 * lam.max(1.0), "eigenvalue {k}");
        let v = eig.eigenvectors.column(order[k]);
        let dot: f64 = (0..d).map(|i| v[i] * fit.components[k][i]).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-5, "component {k}: {dot}");
    }
    let c0 = &fit.components[0];
    for i in 0..n {
        let p: f64 = (0..d).map(|j| (m[(i, j)] - mean[j]) * c0[j]).sum();
        assert!((fit.projected.data()[i * 2] as f64 - p).abs() < 1e-4);
    }
}

fn constant(class: usize, k: usize) -> Model {
    let mut m = Model::new(&[1], vec![Layer::dense("fc", 1, k)], 0).unwrap();
    m.set_param("fc.weight", Tensor::zeros(&[k, 1])).unwrap();
    let mut b = vec![0.0; k];
    b[class] = 1.0;
    m.set_param("fc.bias", Tensor::new(vec![k], b).unwrap()).unwrap();
    m
}

fn tiny_dataset(labels: Vec<usize>) -> Dataset {
    Dataset {
        id: "tiny".into(),
        split: Split::Validation,
        data: Batch::new(Tensor::zeros(&[labels.len(), 1]), labels).unwrap(),
        num_classes: 3,
        provenance: "test".into(),
    }
}

#[test]
fn filtering_keeps_jointly_correct_samples() {
    let d = tiny_dataset(vec![0, 1, 0, 2]);
    let a = constant(0, 3);
    let f = filter_correct(&[&a], &d).unwrap();
    assert_eq!(f.kept, vec![0, 2]);
    assert_eq!(f.retention, 0.5);
    let b = constant(1, 3);
    assert!(filter_correct(&[&a, &b], &d).is_err());
}

#[test]
fn synthetic_data_is_seeded_and_balanced() {
    let a = synth_dataset(9, 200, 10).unwrap();
    let b = synth_dataset(9, 200, 10).unwrap();
    assert_eq!(a.data, b.data);
    assert_ne!(a.data.inputs, synth_dataset(10, 200, 10).unwrap().data.inputs);
    for k in 0..10 {
        assert_eq!(a.data.labels.iter().filter(|&&l| l == k).count(), 20);
    }
    assert!(a.data.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(synth_dataset(0, 5, 10).is_err());
}

fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend(d.to_be_bytes());
    }
    out.extend(payload);
    out
}

#[test]
fn idx_parsing_examples() {
    let img = idx_bytes(0x803, &[2, 2, 2], &[0, 255, 51, 102, 0, 0, 0, 255]);
    let lab = idx_bytes(0x801, &[2], &[3, 1]);
    let d = parse_idx(&img, &lab, "t").unwrap();
    assert_eq!(d.data.inputs.shape(), &[2, 2, 2, 1]);
    assert_eq!(d.data.inputs.data()[..4], [0.0, 1.0, 0.2, 0.4]);
    assert_eq!(d.data.labels, vec![3, 1]);
    assert_eq!(d.num_classes, 4);

    assert!(parse_idx(&idx_bytes(0x802, &[2, 2, 2], &[0; 8]), &lab, "t").is_err());
    assert!(parse_idx(&img, &idx_bytes(0x801, &[3], &[0, 0, 0]), "t").is_err());
    assert!(parse_idx(&img[..20], &lab, "t").is_err());
    assert!(parse_idx(&img, &lab[..6], "t").is_err());

    let (i2, l2) = encode_idx(&d.data).unwrap();
    assert_eq!((i2, l2), (img, lab));
}

#[test]
fn pgm_encoding() {
    let t = Tensor::new(vec![1, 2, 3, 1], vec![0.0, 1.0, 0.5, 0.2, 2.0, -1.0]).unwrap();
    let bytes = encode_pgm(&t).unwrap();
    assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
    assert_eq!(&bytes[11..], &[0, 255, 128, 51, 255, 0]);
}

fn eval_cfg(steps: usize) -> EvalConfig {
    EvalConfig {
        attack: AttackConfig {
            steps,
            variant: AttackVariant::Diva,
            ..AttackConfig::default()
        },
        max_samples: 30,
        ..EvalConfig::default()
    }
}

#[test]
fn metrics_match_a_re_prediction() {
    let s = small();
    let (r, advs) = evaluate_full(&s.pair, &s.pair, &s.validation, &eval_cfg(10)).unwrap();
    assert_eq!(r.samples.len(), r.n_samples);
    for (rec, adv) in r.samples.iter().zip(&advs) {
        let po = s.pair.original().predict(adv).unwrap()[0];
        let pa = s.pair.adapted().predict(adv).unwrap()[0];
        assert_eq!((rec.original_pred, rec.adapted_pred), (po, pa));
        assert_eq!(rec.label, s.validation.data.labels[rec.index]);
        assert_eq!(rec.attack_only, pa != rec.label);
        assert_eq!(rec.top1_evasive, pa != rec.label && po == rec.label);
        let top5 = predict_topk(s.pair.original(), adv, 5).unwrap();
        assert_eq!(rec.top5_loose, !top5.contains(&pa));
        assert!(!rec.top5_evasive || rec.top1_evasive);
        assert!(rec.linf <= 8.0 / 255.0 + 1e-6);
        let x = s.validation.data.inputs.sample(rec.index);
        assert_eq!(rec.dssim, dssim(&x.sample(0), &adv.sample(0)).unwrap());
    }
    let n = r.n_samples as f64;
    let count = |f: fn(&diva_core::harness::SampleRecord) -> bool| r.samples.iter().filter(|s| f(s)).count() as f64 / n;
    assert_eq!(r.attack_only_rate, count(|s| s.attack_only));
    assert_eq!(r.top1_evasive_rate, count(|s| s.top1_evasive));
    assert!(r.top5_evasive_rate <= r.top1_evasive_rate);
    assert!(r.top1_evasive_rate <= r.attack_only_rate);
}

#[test]
fn zero_steps_give_no_successes() {
    let s = small();
    let r = evaluate(&s.pair, &s.pair, &s.validation, &eval_cfg(0)).unwrap();
    assert_eq!(r.attack_only_rate, 0.0);
    assert_eq!(r.dssim_max, 0.0);
}

#[test]
fn identical_models_never_evade() {
    let s = small();
    let twin = AdaptedModel::pruned(s.pair.original().clone(), Masks::new()).unwrap();
    let pair = ModelPair::new(s.pair.original().clone(), twin).unwrap();
    let mut cfg = eval_cfg(10);
    cfg.attack.variant = AttackVariant::Pgd;
    let r = evaluate(&pair, &pair, &s.validation, &cfg).unwrap();
    assert_eq!(r.top1_evasive_rate, 0.0);
    assert_eq!(r.instability, 0.0);
}

fn quick_config(name: &str, stages: Vec<Stage>) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(name, 4, stages);
    c.data.n_train = 500;
    c.data.n_transfer = 50;
    c.data.n_validation = 100;
    c.model.arch = Arch::Lenet;
    c.model.width = 4;
    c.model.hidden = 32;
    c.train.epochs = 5;
    c.adapt.qat.train.epochs = 1;
    c.eval.config.max_samples = 10;
    c.eval.config.attack.steps = 5;
    c.eval.config.attack.variant = AttackVariant::Diva;
    c.eval.dump_images = 1;
    c
}

#[test]
fn reruns_are_skipped_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config("rerun", vec![Stage::Train, Stage::Adapt, Stage::Eval]);
    let first = run_experiment(&cfg, dir.path(), false).unwrap();
    assert!(!first.skipped);
    assert_eq!(first.report.as_ref().unwrap().n_samples, 10);
    for f in ["config.json", "summary.json", "report.json", "samples.csv", "original.diva", "adapted.diva"] {
        assert!(first.run_dir.join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read_dir(first.run_dir.join("images")).unwrap().count(), 2);
    let second = run_experiment(&cfg, dir.path(), false).unwrap();
    assert!(second.skipped);
    assert_eq!(second.summary, first.summary);
    assert_eq!(second.report, first.report);
    let forced = run_experiment(&cfg, dir.path(), true).unwrap();
    assert!(!forced.skipped);
    assert_eq!(forced.report, first.report);
}

#[test]
fn eval_only_run_matches_direct_evaluation() {
    let s = small();
    let dir = tempfile::tempdir().unwrap();
    let op = dir.path().join("o.diva");
    let ap = dir.path().join("a.diva");
    save_model(&op, s.pair.original(), &Provenance::new()).unwrap();
    export_adapted(&ap, s.pair.adapted(), &Provenance::new()).unwrap();
    let mut cfg = quick_config("evalonly", vec![Stage::Eval]);
    cfg.seed = 5;
    cfg.data.n_train = 0;
    cfg.data.n_transfer = 0;
    cfg.data.n_validation = 150;
    cfg.checkpoints.original = Some(op);
    cfg.checkpoints.adapted = Some(ap);
    let out = run_experiment(&cfg, &dir.path().join("runs"), false).unwrap();
    let val = synth_dataset(5, 150, 10).unwrap();
    let val = val.subset(&(0..150).collect::<Vec<_>>(), &format!("{}/validation", val.id), Split::Validation).unwrap();
    let direct = evaluate(&s.pair, &s.pair, &val, &cfg.eval.config).unwrap();
    assert_eq!(out.report.unwrap(), direct);
}

#[test]
fn corrupted_checkpoint_fails_without_a_report() {
    let s = small();
    let dir = tempfile::tempdir().unwrap();
    let op = dir.path().join("o.diva");
    let ap = dir.path().join("a.diva");
    save_model(&op, s.pair.original(), &Provenance::new()).unwrap();
    export_adapted(&ap, s.pair.adapted(), &Provenance::new()).unwrap();
    let bytes = std::fs::read(&ap).unwrap();
    std::fs::write(&ap, &bytes[..bytes.len() - 10]).unwrap();
    let mut cfg = quick_config("corrupt", vec![Stage::Eval]);
    cfg.checkpoints.original = Some(op);
    cfg.checkpoints.adapted = Some(ap);
    let runs = dir.path().join("runs");
    let err = run_experiment(&cfg, &runs, false).unwrap_err();
    assert!(matches!(err, DivaError::Checkpoint(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
    assert!(!runs.join(cfg.run_dir_name().unwrap()).exists());
    assert_eq!(std::fs::read_dir(&runs).unwrap().count(), 0);
}

#[test]
fn a_foreign_run_directory_is_a_collision() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config("collide", vec![Stage::Train]);
    let run_dir = dir.path().join(cfg.run_dir_name().unwrap());
    std::fs::create_dir_all(&run_dir).unwrap();
    std::fs::write(run_dir.join("config.json"), "{}\n").unwrap();
    let err = run_experiment(&cfg, dir.path(), false).unwrap_err();
    assert!(matches!(err, DivaError::Data(_)), "{err}");
}

#[test]
fn config_errors_are_config_class() {
    let err = ExperimentConfig::from_toml("name = \"x\"\nstages = [\"bake\"]\n").unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let err = ExperimentConfig::from_toml("name = \"x\"\nstages = [\"train\"]\nbogus = 1\n").unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let cfg = ExperimentConfig::from_toml("name = \"x\"\nstages = [\"eval\"]\n").unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_experiment(&cfg, dir.path(), false).unwrap_err().exit_code(), 2);
    let mut bad = quick_config("bad name!", vec![Stage::Train]);
    assert!(run_experiment(&bad, dir.path(), false).is_err());
    bad.name = "ok".into();
    bad.stages = vec![Stage::Train, Stage::Train];
    assert!(run_experiment(&bad, dir.path(), false).is_err());
}

#[test]
fn config_hash_tracks_content() {
    let a = quick_config("h", vec![Stage::Train]);
    let mut b = a.clone();
    assert_eq!(a.hash().unwrap(), b.hash().unwrap());
    b.seed += 1;
    assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    let parsed = ExperimentConfig::from_toml(&toml::to_string(&a).unwrap()).unwrap();
    assert_eq!(parsed.hash().unwrap(), a.hash().unwrap());
}
