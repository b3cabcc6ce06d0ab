//! Config-driven experiment pipelines.
//!
//! A TOML config names the stages to run (`train`, `adapt`, `defend`, `eval`,
//! `sweep`); they always execute in that order. Every run writes into
//! `<out_dir>/<name>-<hash>` where `hash` is derived from the canonical JSON
//! form of the parsed config. Artifacts are staged in a hidden sibling
//! directory and renamed into place only when every stage succeeded, so a
//! failed run leaves no report behind. Re-running an identical config is a
//! no-op unless forced.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{instability, prune_magnitude, prune_then_quantize, qat_train, AdaptMode, ModelPair, QatConfig};
use crate::checkpoint::{export_adapted, import_adapted, load_model, save_model, Provenance};
use crate::defend::{defend, DefenseConfig};
use crate::diva::{sweep_c, SweepRow};
use crate::error::{DivaError, Result};
use crate::harness::data::{filter_correct, load_idx, synth_dataset_with, Dataset, Split, SynthConfig};
use crate::harness::metrics::{evaluate_full, samples_csv, EvalConfig, MetricsReport};
use crate::harness::report::{encode_pgm, sweep_csv, write_atomic};
use crate::nn::layer::{lenet, mlp, Layer};
use crate::nn::model::{Classifier, Model};
use crate::nn::train::{accuracy, sgd_train, TrainConfig};
use crate::surrogate::{build_blackbox, build_semi_blackbox, BlackboxConfig, CountingTeacher, QueryOracle, TransferSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Train,
    Adapt,
    Defend,
    Eval,
    Sweep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synth,
    Idx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub classes: usize,
    pub n_train: usize,
    pub n_transfer: usize,
    pub n_validation: usize,
    pub synth: SynthConfig,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synth,
            classes: 10,
            n_train: 2500,
            n_transfer: 500,
            n_validation: 1000,
            synth: SynthConfig::default(),
            images: None,
            labels: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Lenet,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    /// LeNet: channels of the first convolution (the second has twice as many).
    pub width: usize,
    /// LeNet: width of the hidden dense layer.
    pub hidden: usize,
    /// MLP: hidden layer widths.
    pub mlp_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Arch::Lenet,
            width: 8,
            hidden: 64,
            mlp_hidden: vec![128],
        }
    }
}

impl ModelConfig {
    pub fn layers(&self, input_shape: &[usize], classes: usize) -> Vec<Layer> {
        match self.arch {
            Arch::Lenet => lenet(input_shape, classes, self.width, self.hidden),
            Arch::Mlp => mlp(input_shape, &self.mlp_hidden, classes),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub mode: AdaptMode,
    pub qat: QatConfig,
    pub sparsity: f64,
    /// Fine-tuning after pruning.
    pub finetune: TrainConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            mode: AdaptMode::Quantized,
            qat: QatConfig::default(),
            sparsity: 0.5,
            finetune: TrainConfig {
                lr: 0.01,
                epochs: 1,
                batch_size: 32,
                momentum: 0.9,
                seed: 2,
                early_stop: None,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Whitebox,
    SemiBlackbox,
    Blackbox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub setting: Setting,
    /// Natural/adversarial image pairs written as PGM.
    pub dump_images: usize,
    #[serde(flatten)]
    pub config: EvalConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            setting: Setting::Whitebox,
            dump_images: 4,
            config: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub c_values: Vec<f32>,
    pub max_samples: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            c_values: vec![0.0, 0.001, 0.1, 1.0, 5.0, 10.0],
            max_samples: 200,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointPaths {
    pub original: Option<PathBuf>,
    pub adapted: Option<PathBuf>,
}

pub fn default_train() -> TrainConfig {
    TrainConfig {
        lr: 0.02,
        epochs: 8,
        batch_size: 32,
        momentum: 0.9,
        seed: 3,
        early_stop: None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Seeds data generation and model initialisation.
    #[serde(default)]
    pub seed: u64,
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_train")]
    pub train: TrainConfig,
    #[serde(default)]
    pub adapt: AdaptConfig,
    #[serde(default)]
    pub defense: DefenseConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub surrogate: BlackboxConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub checkpoints: CheckpointPaths,
}

impl ExperimentConfig {
    /// A config running `stages` with every other setting at its default.
    pub fn new(name: &str, seed: u64, stages: Vec<Stage>) -> Self {
        ExperimentConfig {
            name: name.into(),
            seed,
            stages,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: default_train(),
            adapt: AdaptConfig::default(),
            defense: DefenseConfig::default(),
            eval: EvalSection::default(),
            surrogate: BlackboxConfig::default(),
            sweep: SweepConfig::default(),
            checkpoints: CheckpointPaths::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DivaError::Config(e.to_string()))
    }

    /// Parses a config file; relative paths inside resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DivaError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.data.images,
            &mut cfg.data.labels,
            &mut cfg.checkpoints.original,
            &mut cfg.checkpoints.adapted,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DivaError::Config(m));
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        {
            return bad(format!("run name '{}' must be non-empty [A-Za-z0-9._-]", self.name));
        }
        if self.stages.is_empty() {
            return bad("no stages to run".into());
        }
        let mut sorted = self.stages.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.stages.len() {
            return bad("a stage is listed twice".into());
        }
        let has = |s| self.stages.contains(&s);
        let needs_pair = has(Stage::Defend) || has(Stage::Eval) || has(Stage::Sweep);
        if (has(Stage::Adapt) || needs_pair) && !has(Stage::Train) && self.checkpoints.original.is_none() {
            return bad("no original model: add the train stage or checkpoints.original".into());
        }
        if needs_pair && !has(Stage::Adapt) && self.checkpoints.adapted.is_none() {
            return bad("no adapted model: add the adapt stage or checkpoints.adapted".into());
        }
        if self.data.n_train == 0 && (has(Stage::Train) || has(Stage::Adapt) || has(Stage::Defend)) {
            return bad("training stages need n_train > 0".into());
        }
        if self.data.n_validation == 0 && (has(Stage::Eval) || has(Stage::Sweep)) {
            return bad("evaluation stages need n_validation > 0".into());
        }
        if has(Stage::Eval) && self.eval.setting != Setting::Whitebox && self.data.n_transfer == 0 {
            return bad("surrogate settings need n_transfer > 0".into());
        }
        if self.data.source == DataSource::Idx && (self.data.images.is_none() || self.data.labels.is_none()) {
            return bad("IDX source needs data.images and data.labels".into());
        }
        if self.data.classes < 2 {
            return bad("need at least two classes".into());
        }
        if has(Stage::Defend) {
            self.defense.validate()?;
        }
        if has(Stage::Eval) {
            self.eval.config.attack.validate()?;
        }
        Ok(())
    }

    /// Canonical JSON form; the run hash covers exactly these bytes.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical_json()?.as_bytes())))
    }

    pub fn run_dir_name(&self) -> Result<String> {
        Ok(format!("{}-{}", self.name, &self.hash()?[..16]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSummary {
    pub queries: usize,
    pub teacher_calls: usize,
    pub agreement: f64,
}

/// Run-level facts written to `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub stages: Vec<Stage>,
    pub dataset: String,
    pub train_losses: Vec<f64>,
    pub original_accuracy: f64,
    pub adapted_accuracy: f64,
    pub instability: f64,
    pub surrogate: Option<SurrogateSummary>,
    pub sweep: Option<Vec<SweepRow>>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub run_dir: PathBuf,
    /// The run directory already held this config's results.
    pub skipped: bool,
    pub summary: Summary,
    pub report: Option<MetricsReport>,
}

/// Train, transfer and validation splits of the configured data.
pub struct Splits {
    pub train: Option<Dataset>,
    pub transfer: Option<Dataset>,
    pub validation: Option<Dataset>,
}

pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    let d = &cfg.data;
    let total = d.n_train + d.n_transfer + d.n_validation;
    if total == 0 {
        return Err(DivaError::Config("all split sizes are zero".into()));
    }
    let mut all = match d.source {
        DataSource::Synth => synth_dataset_with(cfg.seed, total, d.classes, &d.synth)?,
        DataSource::Idx => load_idx(
            d.images.as_deref().expect("validated"),
            d.labels.as_deref().expect("validated"),
        )?,
    };
    if all.len() < total {
        return Err(DivaError::Data(format!(
            "dataset '{}' has {} samples, the splits need {total}",
            all.id,
            all.len()
        )));
    }
    all.num_classes = d.classes;
    let part = |start: usize, len: usize, tag: &str, split: Split| -> Result<Option<Dataset>> {
        if len == 0 {
            return Ok(None);
        }
        let idx: Vec<usize> = (start..start + len).collect();
        all.subset(&idx, &format!("{}/{tag}", all.id), split).map(Some)
    };
    Ok(Splits {
        train: part(0, d.n_train, "train", Split::Train)?,
        transfer: part(d.n_train, d.n_transfer, "transfer", Split::Transfer)?,
        validation: part(d.n_train + d.n_transfer, d.n_validation, "validation", Split::Validation)?,
    })
}

fn provenance(cfg: &ExperimentConfig, hash: &str, entries: &[(&str, String)]) -> Provenance {
    let mut p = Provenance::new();
    p.insert("run".into(), cfg.name.clone());
    p.insert("config_hash".into(), hash.into());
    for (k, v) in entries {
        p.insert((*k).into(), v.clone());
    }
    p
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| DivaError::Data(format!("{}: {e}", path.display())))
}

fn pretty<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v)?;
    out.push(b'\n');
    Ok(out)
}

/// Runs (or skips) an experiment under `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path, force: bool) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let canonical = cfg.canonical_json()?;
    let hash = cfg.hash()?;
    let run_dir = out_dir.join(cfg.run_dir_name()?);
    if run_dir.exists() {
        let stored = std::fs::read_to_string(run_dir.join("config.json")).unwrap_or_default();
        if stored.trim_end() != canonical {
            return Err(DivaError::Data(format!(
                "run directory {} holds a different config (hash collision)",
                run_dir.display()
            )));
        }
        if !force {
            log::info!("{} is up to date; skipping", run_dir.display());
            let report_path = run_dir.join("report.json");
            return Ok(ExperimentOutcome {
                summary: read_json(&run_dir.join("summary.json"))?,
                report: if report_path.exists() {
                    Some(read_json(&report_path)?)
                } else {
                    None
                },
                run_dir,
                skipped: true,
            });
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let staging = out_dir.join(format!(".{}.partial", cfg.run_dir_name()?));
    if staging.exists() {
        std::fs::remove_dir_all(&staging)?;
    }
    std::fs::create_dir_all(&staging)?;
    match execute(cfg, &hash, &staging) {
        Ok((summary, report)) => {
            write_atomic(&staging.join("config.json"), format!("{canonical}\n").as_bytes())?;
            if run_dir.exists() {
                std::fs::remove_dir_all(&run_dir)?;
            }
            std::fs::rename(&staging, &run_dir)?;
            Ok(ExperimentOutcome {
                run_dir,
                skipped: false,
                summary,
                report,
            })
        }
        Err(e) => {
            let _ = std::fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

fn execute(cfg: &ExperimentConfig, hash: &str, dir: &Path) -> Result<(Summary, Option<MetricsReport>)> {
    let has = |s| cfg.stages.contains(&s);
    let splits = load_splits(cfg)?;
    let input_shape = |d: &Dataset| d.image_shape().to_vec();
    let any = splits
        .train
        .as_ref()
        .or(splits.validation.as_ref())
        .or(splits.transfer.as_ref())
        .expect("non-empty splits");
    let shape = input_shape(any);
    let classes = cfg.data.classes;
    let mut train_losses = Vec::new();

    // Train or load the original model.
    let original = if has(Stage::Train) {
        let train = splits.train.as_ref().expect("validated");
        let init = Model::new(&shape, cfg.model.layers(&shape, classes), cfg.seed)?;
        let (model, report) = sgd_train(&init, &train.data, &cfg.train)?;
        log::info!("trained original model: final loss {:?}", report.epoch_losses.last());
        train_losses = report.epoch_losses;
        save_model(&dir.join("original.diva"), &model, &provenance(cfg, hash, &[("stage", "train".into())]))?;
        Some(model)
    } else {
        cfg.checkpoints.original.as_deref().map(load_model).transpose()?
    };

    let adapted = if has(Stage::Adapt) {
        let model = original.as_ref().expect("validated");
        let data = &splits.train.as_ref().expect("validated").data;
        let a = match cfg.adapt.mode {
            AdaptMode::Quantized => qat_train(model, data, &cfg.adapt.qat)?,
            AdaptMode::Pruned => prune_magnitude(model, cfg.adapt.sparsity, data, &cfg.adapt.finetune)?,
            AdaptMode::PrunedQuantized => {
                prune_then_quantize(model, cfg.adapt.sparsity, data, &cfg.adapt.finetune, &cfg.adapt.qat)?
            }
        };
        export_adapted(&dir.join("adapted.diva"), &a, &provenance(cfg, hash, &[("stage", "adapt".into())]))?;
        Some(a)
    } else {
        cfg.checkpoints.adapted.as_deref().map(import_adapted).transpose()?
    };

    let mut pair: Option<ModelPair> = match (original, adapted) {
        (Some(o), Some(a)) => Some(ModelPair::new(o, a)?),
        _ => None,
    };

    if has(Stage::Defend) {
        let p = pair.as_ref().expect("validated");
        let train = splits.train.as_ref().expect("validated");
        let defended = defend(p, &train.data, &cfg.defense)?;
        let variant = serde_json::to_value(cfg.defense.variant)?
            .as_str()
            .unwrap_or_default()
            .to_string();
        let prov = provenance(cfg, hash, &[("stage", "defend".into()), ("defense", variant)]);
        save_model(&dir.join("defended_original.diva"), defended.original(), &prov)?;
        export_adapted(&dir.join("defended_adapted.diva"), defended.adapted(), &prov)?;
        pair = Some(defended);
    }

    let (original_accuracy, adapted_accuracy, inst) = match (&pair, &splits.validation) {
        (Some(p), Some(v)) => (
            accuracy(p.original(), &v.data)?,
            accuracy(p.adapted(), &v.data)?,
            instability(p, &v.data)?,
        ),
        _ => (0.0, 0.0, 0.0),
    };

    let mut surrogate = None;
    let mut report = None;
    if has(Stage::Eval) {
        let p = pair.as_ref().expect("validated");
        let val = splits.validation.as_ref().expect("validated");
        let attacker: ModelPair = match cfg.eval.setting {
            Setting::Whitebox => p.clone(),
            Setting::SemiBlackbox | Setting::Blackbox => {
                let transfer = splits.transfer.clone().expect("validated");
                let victim_train = splits.train.as_ref().ok_or_else(|| {
                    DivaError::Config("surrogate settings need the victim's train split to check disjointness".into())
                })?;
                let ts = TransferSet::new(transfer, victim_train)?;
                let teacher = CountingTeacher::new(QueryOracle::new(p.adapted()));
                let (sp, rep) = if cfg.eval.setting == Setting::SemiBlackbox {
                    build_semi_blackbox(p.adapted(), &ts, &cfg.surrogate.distill)?
                } else {
                    build_blackbox(&teacher, &shape, p.original().layers().to_vec(), &ts, &cfg.surrogate)?
                };
                let prov = provenance(cfg, hash, &[("stage", "surrogate".into())]);
                save_model(&dir.join("surrogate_original.diva"), sp.original(), &prov)?;
                export_adapted(&dir.join("surrogate_adapted.diva"), sp.adapted(), &prov)?;
                surrogate = Some(SurrogateSummary {
                    queries: rep.queries,
                    teacher_calls: teacher.calls(),
                    agreement: rep.agreement,
                });
                sp
            }
        };
        let (r, adversarials) = evaluate_full(&attacker, p, val, &cfg.eval.config)?;
        write_atomic(&dir.join("report.json"), &pretty(&r)?)?;
        write_atomic(&dir.join("samples.csv"), samples_csv(&r).as_bytes())?;
        if cfg.eval.dump_images > 0 {
            let images = dir.join("images");
            std::fs::create_dir_all(&images)?;
            for (rec, adv) in r.samples.iter().zip(&adversarials).take(cfg.eval.dump_images) {
                let natural = val.data.inputs.sample(rec.index);
                write_atomic(&images.join(format!("{:05}_natural.pgm", rec.index)), &encode_pgm(&natural)?)?;
                write_atomic(&images.join(format!("{:05}_adversarial.pgm", rec.index)), &encode_pgm(adv)?)?;
            }
        }
        report = Some(r);
    }

    let mut sweep = None;
    if has(Stage::Sweep) {
        let p = pair.as_ref().expect("validated");
        let val = splits.validation.as_ref().expect("validated");
        let filtered = filter_correct(&[p.original() as &dyn Classifier, p.adapted()], val)?;
        let n = filtered.dataset.len().min(cfg.sweep.max_samples);
        let data = filtered.dataset.data.gather(&(0..n).collect::<Vec<_>>());
        let rows = sweep_c(p, &data, &cfg.eval.config.attack, &cfg.sweep.c_values)?;
        write_atomic(&dir.join("sweep.csv"), sweep_csv(&rows).as_bytes())?;
        sweep = Some(rows);
    }

    let summary = Summary {
        name: cfg.name.clone(),
        config_hash: hash.into(),
        seed: cfg.seed,
        stages: cfg.stages.clone(),
        dataset: any.id.split('/').next().unwrap_or_default().to_string(),
        train_losses,
        original_accuracy,
        adapted_accuracy,
        instability: inst,
        surrogate,
        sweep,
    };
    write_atomic(&dir.join("summary.json"), &pretty(&summary)?)?;
    Ok((summary, report))
}

/// Loads a pair from two checkpoint files.
pub fn load_pair(original: &Path, adapted: &Path) -> Result<ModelPair> {
    ModelPair::new(load_model(original)?, import_adapted(adapted)?)
}

