use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use clap::{Args, Parser, Subcommand, ValueEnum};

use diva_core::adapt::{prune_magnitude, prune_then_quantize, qat_train, ModelPair};
use diva_core::attack::{run_single, AttackVariant};
use diva_core::checkpoint::{export_adapted, import_adapted, load_model, save_model, Provenance};
use diva_core::defend::{defend, DefenseVariant};
use diva_core::diva::{diva_attack, diva_targeted, DivaObjective};
use diva_core::harness::experiment::{load_splits, ExperimentConfig, Setting, Splits, Stage};
use diva_core::harness::metrics::{evaluate_full, judge_sample, samples_csv, MetricsReport};
use diva_core::harness::report::{encode_pgm, summary_csv, write_atomic};
use diva_core::harness::Dataset;
use diva_core::nn::{accuracy, sgd_train, Model};
use diva_core::surrogate::{
    build_blackbox, build_semi_blackbox, serve_queries, spawn_teacher, CountingTeacher, QueryOracle, Teacher,
    TransferSet,
};
use diva_core::{DivaError, Result};

/// Differential evasion attacks on quantized and pruned models.
#[derive(Parser)]
#[command(name = "diva", version)]
struct Cli {
    /// Seed for data generation and model initialisation (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML experiment config supplying data, model and stage settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    /// Overwrite existing outputs and rerun completed experiments.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a full-precision model on the train split.
    Train,
    /// Quantization-aware train an adapted model from a full-precision one.
    Quantize {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        bits: Option<u8>,
    },
    /// Magnitude-prune a model, optionally followed by quantization.
    Prune {
        #[arg(long)]
        original: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        sparsity: f64,
        #[arg(long)]
        quantize: bool,
    },
    /// Distill a surrogate pair from an adapted model.
    Distill {
        #[arg(long)]
        adapted: PathBuf,
        /// Build both surrogates from probability queries only.
        #[arg(long)]
        blackbox: bool,
        /// Shell command of a query server (see `serve`) used as the teacher.
        #[arg(long, requires = "blackbox")]
        remote: Option<String>,
    },
    /// Attack one validation sample.
    Attack {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long, value_enum, default_value_t = Variant::Diva)]
        variant: Variant,
        /// Index into the validation split.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        c: Option<f32>,
        /// Target class for targeted DIVA.
        #[arg(long)]
        target: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        target_weight: f32,
    },
    /// Harden a model pair with a minimax defense.
    Defend {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long, value_enum)]
        variant: Option<Defense>,
        /// Disable the minimax step (distillation-only degenerate).
        #[arg(long)]
        no_minimax: bool,
    },
    /// Evaluate an attack on a pair and write report, CSV and images.
    Eval {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long, value_enum)]
        variant: Option<Variant>,
        /// Attacker-side surrogate pair (semi-blackbox and blackbox settings).
        #[arg(long, requires = "surrogate_adapted")]
        surrogate_original: Option<PathBuf>,
        #[arg(long, requires = "surrogate_original")]
        surrogate_adapted: Option<PathBuf>,
        #[arg(long)]
        max_samples: Option<usize>,
    },
    /// Collect report.json files into one plot-ready CSV.
    Report {
        /// Run directories or report files.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Run the stages of an experiment config.
    Run,
    /// Answer probability queries for an adapted model over stdin/stdout.
    Serve {
        #[arg(long)]
        adapted: PathBuf,
    },
}

#[derive(Args)]
struct PairArgs {
    #[arg(long)]
    original: PathBuf,
    #[arg(long)]
    adapted: PathBuf,
}

impl PairArgs {
    fn load(&self) -> Result<ModelPair> {
        ModelPair::new(load_model(&self.original)?, import_adapted(&self.adapted)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Fgsm,
    Rfgsm,
    Pgd,
    MomentumPgd,
    Diva,
    DivaTargeted,
}

impl From<Variant> for AttackVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Fgsm => AttackVariant::Fgsm,
            Variant::Rfgsm => AttackVariant::RFgsm,
            Variant::Pgd => AttackVariant::Pgd,
            Variant::MomentumPgd => AttackVariant::MomentumPgd,
            Variant::Diva => AttackVariant::Diva,
            Variant::DivaTargeted => AttackVariant::DivaTargeted,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Defense {
    MinimaxPgd,
    MinimaxDivaQat,
    MinimaxDivaQatDistill,
}

impl From<Defense> for DefenseVariant {
    fn from(v: Defense) -> Self {
        match v {
            Defense::MinimaxPgd => DefenseVariant::MinimaxPgd,
            Defense::MinimaxDivaQat => DefenseVariant::MinimaxDivaQat,
            Defense::MinimaxDivaQatDistill => DefenseVariant::MinimaxDivaQatDistill,
        }
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    force: bool,
}

impl Ctx {
    fn splits(&self) -> Result<Splits> {
        load_splits(&self.cfg)
    }

    fn output(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out)?;
        let path = self.out.join(name);
        if path.exists() && !self.force {
            return Err(DivaError::Config(format!(
                "{} exists; pass --force to overwrite",
                path.display()
            )));
        }
        Ok(path)
    }

    fn provenance(&self, command: &str) -> Provenance {
        let mut p = Provenance::new();
        p.insert("command".into(), command.into());
        p.insert("seed".into(), self.cfg.seed.to_string());
        if let Ok(h) = self.cfg.hash() {
            p.insert("config_hash".into(), h);
        }
        p
    }
}

fn need<'a>(d: &'a Option<Dataset>, what: &str) -> Result<&'a Dataset> {
    d.as_ref()
        .ok_or_else(|| DivaError::Config(format!("the configured {what} split is empty")))
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn save_pair(ctx: &Ctx, prefix: &str, pair: &ModelPair, prov: &Provenance) -> Result<()> {
    save_model(&ctx.output(&format!("{prefix}original.diva"))?, pair.original(), prov)?;
    export_adapted(&ctx.output(&format!("{prefix}adapted.diva"))?, pair.adapted(), prov)
}

fn write_report(ctx: &Ctx, report: &MetricsReport, adversarials: &[diva_core::Tensor], val: &Dataset) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    write_atomic(&ctx.output("report.json")?, &json)?;
    write_atomic(&ctx.output("samples.csv")?, samples_csv(report).as_bytes())?;
    let images = ctx.out.join("images");
    std::fs::create_dir_all(&images)?;
    for (rec, adv) in report.samples.iter().zip(adversarials).take(ctx.cfg.eval.dump_images) {
        write_atomic(
            &images.join(format!("{:05}_natural.pgm", rec.index)),
            &encode_pgm(&val.data.inputs.sample(rec.index))?,
        )?;
        write_atomic(&images.join(format!("{:05}_adversarial.pgm", rec.index)), &encode_pgm(adv)?)?;
    }
    Ok(())
}

fn collect_report(path: &Path) -> Result<(String, MetricsReport)> {
    let file = if path.is_dir() {
        path.join("report.json")
    } else {
        path.to_path_buf()
    };
    let bytes = std::fs::read(&file)?;
    let report = serde_json::from_slice(&bytes)
        .map_err(|e| DivaError::Data(format!("{}: {e}", file.display())))?;
    let name = if path.is_dir() { path } else { path.parent().unwrap_or(path) };
    let name = name
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| file.display().to_string());
    Ok((name, report))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::new("cli", 0, vec![Stage::Train]),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let ctx = Ctx {
        cfg,
        out: cli.out_dir,
        force: cli.force,
    };
    let cfg = &ctx.cfg;
    match cli.command {
        Cmd::Train => {
            let splits = ctx.splits()?;
            let train = need(&splits.train, "train")?;
            let shape = train.image_shape().to_vec();
            let init = Model::new(&shape, cfg.model.layers(&shape, cfg.data.classes), cfg.seed)?;
            let (model, report) = sgd_train(&init, &train.data, &cfg.train)?;
            save_model(&ctx.output("original.diva")?, &model, &ctx.provenance("train"))?;
            let val_acc = match &splits.validation {
                Some(v) => Some(accuracy(&model, &v.data)?),
                None => None,
            };
            print_json(&serde_json::json!({
                "epoch_losses": report.epoch_losses,
                "stopped_early": report.stopped_early,
                "validation_accuracy": val_acc,
            }))
        }
        Cmd::Quantize { original, bits } => {
            let splits = ctx.splits()?;
            let model = load_model(&original)?;
            let mut qat = cfg.adapt.qat.clone();
            if let Some(b) = bits {
                qat.bits = b;
            }
            let adapted = qat_train(&model, &need(&splits.train, "train")?.data, &qat)?;
            export_adapted(&ctx.output("adapted.diva")?, &adapted, &ctx.provenance("quantize"))?;
            if let Some(v) = &splits.validation {
                let pair = ModelPair::new(model, adapted)?;
                print_json(&serde_json::json!({
                    "adapted_accuracy": accuracy(pair.adapted(), &v.data)?,
                    "instability": diva_core::adapt::instability(&pair, &v.data)?,
                }))?;
            }
            Ok(())
        }
        Cmd::Prune {
            original,
            sparsity,
            quantize,
        } => {
            let splits = ctx.splits()?;
            let model = load_model(&original)?;
            let data = &need(&splits.train, "train")?.data;
            let adapted = if quantize {
                prune_then_quantize(&model, sparsity, data, &cfg.adapt.finetune, &cfg.adapt.qat)?
            } else {
                prune_magnitude(&model, sparsity, data, &cfg.adapt.finetune)?
            };
            export_adapted(&ctx.output("adapted.diva")?, &adapted, &ctx.provenance("prune"))
        }
        Cmd::Distill {
            adapted,
            blackbox,
            remote,
        } => {
            let splits = ctx.splits()?;
            let transfer = TransferSet::new(
                need(&splits.transfer, "transfer")?.clone(),
                need(&splits.train, "train")?,
            )?;
            let adapted = import_adapted(&adapted)?;
            let (pair, report) = if blackbox {
                let teacher: Box<dyn Teacher> = match remote {
                    Some(cmd) => {
                        let mut c = Command::new("sh");
                        c.arg("-c").arg(cmd);
                        Box::new(spawn_teacher(c)?)
                    }
                    None => Box::new(QueryOracle::new(&adapted)),
                };
                let counted = CountingTeacher::new(teacher);
                let shape = transfer.dataset().image_shape().to_vec();
                build_blackbox(&counted, &shape, adapted.layers().to_vec(), &transfer, &cfg.surrogate)?
            } else {
                build_semi_blackbox(&adapted, &transfer, &cfg.surrogate.distill)?
            };
            let prefix = "surrogate_";
            let prov = ctx.provenance(if blackbox { "distill-blackbox" } else { "distill" });
            if blackbox {
                save_pair(&ctx, prefix, &pair, &prov)?;
            } else {
                save_model(&ctx.output("surrogate_original.diva")?, pair.original(), &prov)?;
            }
            print_json(&report)
        }
        Cmd::Attack {
            pair,
            variant,
            index,
            c,
            target,
            target_weight,
        } => {
            let pair = pair.load()?;
            let splits = ctx.splits()?;
            let val = need(&splits.validation, "validation")?;
            if index >= val.len() {
                return Err(DivaError::InvalidArgument(format!(
                    "index {index} outside the validation split of {}",
                    val.len()
                )));
            }
            let mut acfg = cfg.eval.config.attack.clone().with_variant(variant.into());
            if let Some(c) = c {
                acfg.c = c;
            }
            let x = val.data.inputs.sample(index);
            let y = val.data.labels[index];
            let (adv, trace) = match variant {
                Variant::Diva => {
                    let r = diva_attack(&pair, &x, y, &acfg)?;
                    (r.adversarial, r.loss_trace)
                }
                Variant::DivaTargeted => {
                    let objective = DivaObjective {
                        c: acfg.c,
                        target,
                        target_weight,
                    };
                    let r = diva_targeted(&pair, &x, y, &objective, &acfg)?;
                    (r.adversarial, r.loss_trace)
                }
                _ => {
                    let r = run_single(pair.adapted(), &x, y, &acfg)?;
                    (r.adversarial, r.loss_trace)
                }
            };
            let rec = judge_sample(&pair, index, &x, &adv, y, cfg.eval.config.dssim_threshold)?;
            write_atomic(&ctx.output(&format!("attack_{index:05}.pgm"))?, &encode_pgm(&adv)?)?;
            print_json(&serde_json::json!({ "record": rec, "loss_trace": trace }))
        }
        Cmd::Defend {
            pair,
            variant,
            no_minimax,
        } => {
            let pair = pair.load()?;
            let splits = ctx.splits()?;
            let mut dcfg = cfg.defense.clone();
            if let Some(v) = variant {
                dcfg.variant = v.into();
            }
            if no_minimax {
                dcfg.minimax = false;
            }
            let defended = defend(&pair, &need(&splits.train, "train")?.data, &dcfg)?;
            let mut prov = ctx.provenance("defend");
            prov.insert("defense".into(), serde_json::to_value(dcfg.variant)?.as_str().unwrap_or("").into());
            save_pair(&ctx, "defended_", &defended, &prov)?;
            if let Some(v) = &splits.validation {
                print_json(&serde_json::json!({
                    "adapted_accuracy": accuracy(defended.adapted(), &v.data)?,
                    "instability": diva_core::adapt::instability(&defended, &v.data)?,
                }))?;
            }
            Ok(())
        }
        Cmd::Eval {
            pair,
            variant,
            surrogate_original,
            surrogate_adapted,
            max_samples,
        } => {
            let eval_pair = pair.load()?;
            let attacker = match (surrogate_original, surrogate_adapted) {
                (Some(o), Some(a)) => ModelPair::new(load_model(&o)?, import_adapted(&a)?)?,
                _ => eval_pair.clone(),
            };
            let splits = ctx.splits()?;
            let val = need(&splits.validation, "validation")?;
            let mut ecfg = cfg.eval.config.clone();
            if let Some(v) = variant {
                ecfg.attack.variant = v.into();
            }
            if let Some(m) = max_samples {
                ecfg.max_samples = m;
            }
            let (report, adversarials) = evaluate_full(&attacker, &eval_pair, val, &ecfg)?;
            write_report(&ctx, &report, &adversarials, val)?;
            print_json(&serde_json::json!({
                "n_samples": report.n_samples,
                "top1_evasive_rate": report.top1_evasive_rate,
                "top5_evasive_rate": report.top5_evasive_rate,
                "attack_only_rate": report.attack_only_rate,
                "confidence_delta_mean": report.confidence_delta_mean,
                "instability": report.instability,
                "dssim_max": report.dssim_max,
                "dssim_flagged": report.dssim_flagged,
            }))
        }
        Cmd::Report { runs } => {
            let rows = runs.iter().map(|p| collect_report(p)).collect::<Result<Vec<_>>>()?;
            let csv = summary_csv(&rows);
            if ctx.cfg.name != "cli" || ctx.out != Path::new("runs") {
                std::fs::create_dir_all(&ctx.out)?;
                write_atomic(&ctx.out.join("summary.csv"), csv.as_bytes())?;
            }
            print!("{csv}");
            Ok(())
        }
        Cmd::Run => {
            if cli.config.is_none() {
                return Err(DivaError::Config("run needs --config".into()));
            }
            let outcome = diva_core::harness::run_experiment(cfg, &ctx.out, ctx.force)?;
            if outcome.skipped {
                log::info!("already complete: {}", outcome.run_dir.display());
            }
            print_json(&serde_json::json!({
                "run_dir": outcome.run_dir,
                "skipped": outcome.skipped,
                "setting": match cfg.eval.setting {
                    Setting::Whitebox => "whitebox",
                    Setting::SemiBlackbox => "semi_blackbox",
                    Setting::Blackbox => "blackbox",
                },
                "summary": outcome.summary,
            }))
        }
        Cmd::Serve { adapted } => {
            let adapted = import_adapted(&adapted)?;
            let stdin = io::stdin();
            let served = serve_queries(&adapted, stdin.lock(), io::stdout().lock())?;
            log::info!("served {served} requests");
            Ok(())
        }
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DIVA_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| DivaError::Config(format!("DIVA_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| DivaError::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
