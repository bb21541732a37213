use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use log::{info, warn};
use metasbir::checkpoint::{Checkpoint, Stage};
use metasbir::config::{ExperimentConfig, Method, TrainConfig, Variant};
use metasbir::episodes::{Dataset, SemanticTable, Split};
use metasbir::eval::{
    ablation_suite, emit_report, evaluate_method, EvalOptions, ModelSet, ReportFormat,
};
use metasbir::gradcheck::{grl_suite, hypergradient_suite_with, primitive_suite, SuiteReport};
use metasbir::metatrain::{
    init_params, meta_train, pretrain_baseline, EpochStats, MetaState, TrainData,
};
use metasbir::model::ModelParams;
use metasbir::synth::generate;
use metasbir::Error;
use serde::Serialize;
use tapegrad::Tensor;

use crate::manifest::Recorder;
use crate::{Command, Common, DataArgs};

pub const ITEMS: &str = "items.jsonl";
pub const SEMANTIC: &str = "semantic.jsonl";
pub const SPLIT: &str = "split.json";
pub const BASELINE: &str = "baseline.ckpt";

pub enum Failure {
    /// Bad flags or configuration: exit code 2.
    Usage(String),
    /// Anything that went wrong while running: exit code 1.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::Config(_)) => Failure::Usage(format!("{e:#}")),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type Outcome<T> = Result<T, Failure>;

fn meta_name(v: Variant) -> String {
    format!("meta-{v}.ckpt")
}

fn load_config(path: &Path, seed: Option<u64>) -> Outcome<ExperimentConfig> {
    if !path.is_file() {
        return Err(Failure::Usage(format!(
            "config file {} not found",
            path.display()
        )));
    }
    let mut cfg = ExperimentConfig::from_file(path).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn prepare_out(out: &Path) -> Outcome<()> {
    fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))
        .map_err(Failure::Runtime)
}

struct Loaded {
    dataset: Dataset,
    split: Split,
    semantic: Option<SemanticTable>,
}

impl Loaded {
    fn view(&self) -> TrainData<'_> {
        TrainData {
            dataset: &self.dataset,
            split: &self.split,
            semantic: self.semantic.as_ref(),
        }
    }
}

fn load_data(dir: &Path, rec: &mut Recorder) -> Outcome<Loaded> {
    let items = dir.join(ITEMS);
    let split_path = dir.join(SPLIT);
    let dataset = Dataset::load(&items).context("loading dataset")?;
    let split = Split::load(&split_path).context("loading split")?;
    split
        .check_against(&dataset)
        .context("checking split against dataset")?;
    rec.input(&items);
    rec.input(&split_path);
    let sem_path = dir.join(SEMANTIC);
    let semantic = if sem_path.is_file() {
        let s = SemanticTable::load(&sem_path).context("loading semantic table")?;
        s.check_covers(&dataset)?;
        rec.input(&sem_path);
        Some(s)
    } else {
        None
    };
    info!(
        "loaded {} items, {} training and {} test units",
        dataset.len(),
        split.train_units.len(),
        split.test_units.len()
    );
    Ok(Loaded {
        dataset,
        split,
        semantic,
    })
}

/// Loads a checkpoint and checks its stage and that its shapes fit `data`.
fn load_checkpoint(
    path: &Path,
    stage: Stage,
    data: &TrainData<'_>,
    cfg: &ExperimentConfig,
    rec: &mut Recorder,
) -> Outcome<Checkpoint> {
    let cp =
        Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if cp.stage != stage {
        return Err(Failure::Runtime(anyhow!(
            "{} holds a {:?} checkpoint, expected {:?}",
            path.display(),
            cp.stage,
            stage
        )));
    }
    let expected = data.dims(cfg);
    if cp.params.dims() != expected {
        return Err(Failure::Runtime(anyhow!(
            "{} was trained with dimensions {:?}, but data and config give {:?}",
            path.display(),
            cp.params.dims(),
            expected
        )));
    }
    rec.input(path);
    Ok(cp)
}

fn write_text(path: &Path, text: &str, rec: &mut Recorder) -> Outcome<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    rec.artifact(path);
    Ok(())
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T, rec: &mut Recorder) -> Outcome<()> {
    let mut text = serde_json::to_string_pretty(value).context("encoding json")?;
    text.push('\n');
    write_text(path, &text, rec)
}

const CURVE_HEADER: &str = "epoch,loss,triplet,reg,mean_margin,dropped_tasks";

fn curve_line(s: &EpochStats) -> String {
    format!(
        "{},{:?},{:?},{:?},{:?},{}\n",
        s.epoch, s.loss, s.triplet, s.reg, s.mean_margin, s.dropped_tasks
    )
}

pub fn run(command: Command) -> Outcome<ExitCode> {
    match command {
        Command::GenData { common } => gen_data(common),
        Command::Pretrain { common, data } => pretrain(common, data),
        Command::MetaTrain {
            common,
            data,
            baseline,
            variant,
            resume,
        } => meta(common, data, baseline, variant, resume),
        Command::Eval {
            common,
            data,
            checkpoints,
            methods,
            k,
        } => eval(common, data, checkpoints, methods, k),
        Command::Ablate {
            common,
            data,
            checkpoints,
        } => ablate(common, data, checkpoints),
        Command::CheckGrads { config, out, seeds } => check_grads(config, out, seeds),
    }
}

fn gen_data(common: Common) -> Outcome<ExitCode> {
    let cfg = load_config(&common.config, common.seed)?;
    prepare_out(&common.out)?;
    let syn = generate(&cfg.generator, cfg.seed)?;
    let mut rec = Recorder::default();
    let items = common.out.join(ITEMS);
    let semantic = common.out.join(SEMANTIC);
    let split = common.out.join(SPLIT);
    syn.dataset.save(&items)?;
    syn.semantic.save(&semantic)?;
    syn.split.save(&split)?;
    for p in [&items, &semantic, &split] {
        rec.artifact(p);
    }
    rec.write(&common.out, "gen-data", &cfg)
        .map_err(Failure::Runtime)?;
    info!(
        "wrote {} items over {} units to {}",
        syn.dataset.len(),
        syn.split.train_units.len() + syn.split.test_units.len(),
        common.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn pretrain(common: Common, data: DataArgs) -> Outcome<ExitCode> {
    let cfg = load_config(&common.config, common.seed)?;
    prepare_out(&common.out)?;
    let mut rec = Recorder::default();
    let loaded = load_data(data.data.as_deref().unwrap_or(&common.out), &mut rec)?;
    let d = loaded.view();
    let mut params = init_params(&d, &cfg);
    info!(
        "pretraining {} parameters for {} epochs",
        params.parameter_count(),
        cfg.train.pretrain_epochs
    );
    let history = pretrain_baseline(&d, &cfg, &mut params, |s| {
        info!("pretrain epoch {}: loss {:.6}", s.epoch, s.loss);
    })?;
    let ckpt = common.out.join(BASELINE);
    Checkpoint {
        stage: Stage::Baseline,
        variant: None,
        epoch: history.len(),
        config: cfg.clone(),
        params,
        optimizer: None,
    }
    .save(&ckpt)?;
    rec.artifact(&ckpt);
    let mut curve = String::from("epoch,loss\n");
    for s in &history {
        let _ = writeln!(curve, "{},{:?}", s.epoch, s.loss);
    }
    write_text(&common.out.join("pretrain_curve.csv"), &curve, &mut rec)?;
    rec.write(&common.out, "pretrain", &cfg)
        .map_err(Failure::Runtime)?;
    Ok(ExitCode::SUCCESS)
}

fn meta(
    common: Common,
    data: DataArgs,
    baseline: Option<PathBuf>,
    variant: Option<Variant>,
    resume: Option<PathBuf>,
) -> Outcome<ExitCode> {
    let mut cfg = load_config(&common.config, common.seed)?;
    if let Some(v) = variant {
        cfg.train.variant = v;
    }
    let variant = cfg.train.variant;
    prepare_out(&common.out)?;
    let mut rec = Recorder::default();
    let loaded = load_data(data.data.as_deref().unwrap_or(&common.out), &mut rec)?;
    let d = loaded.view();

    let start = match &resume {
        Some(path) => {
            let cp = load_checkpoint(path, Stage::Meta, &d, &cfg, &mut rec)?;
            if cp.variant != Some(variant) {
                return Err(Failure::Runtime(anyhow!(
                    "{} is a {:?} checkpoint, not {variant}",
                    path.display(),
                    cp.variant
                )));
            }
            info!("resuming {variant} from epoch {}", cp.epoch);
            MetaState {
                params: cp.params,
                optimizer: cp.optimizer,
                epoch: cp.epoch,
            }
        }
        None => {
            let path = baseline.unwrap_or_else(|| common.out.join(BASELINE));
            let cp = load_checkpoint(&path, Stage::Baseline, &d, &cfg, &mut rec)?;
            MetaState {
                params: cp.params,
                optimizer: None,
                epoch: 0,
            }
        }
    };
    let first_epoch = start.epoch;

    let ckpt = common.out.join(meta_name(variant));
    let curve_path = common.out.join(format!("meta_curve-{variant}.csv"));
    let mut curve = String::from(CURVE_HEADER);
    curve.push('\n');
    if first_epoch > 0 {
        if let Ok(previous) = fs::read_to_string(&curve_path) {
            for line in previous.lines().skip(1) {
                let epoch: Option<usize> = line.split(',').next().and_then(|e| e.parse().ok());
                if epoch.is_some_and(|e| e < first_epoch) {
                    curve.push_str(line);
                    curve.push('\n');
                }
            }
        } else {
            warn!("no earlier training curve at {}", curve_path.display());
        }
    }
    let (state, _) = meta_train(&d, &cfg, start, |state, stats| {
        info!(
            "{variant} epoch {}: loss {:.6} triplet {:.6} reg {:.6} margin {:.4}",
            stats.epoch, stats.loss, stats.triplet, stats.reg, stats.mean_margin
        );
        if stats.dropped_tasks > 0 {
            warn!(
                "epoch {}: dropped {} non-finite tasks",
                stats.epoch, stats.dropped_tasks
            );
        }
        curve.push_str(&curve_line(stats));
        Checkpoint {
            stage: Stage::Meta,
            variant: Some(variant),
            epoch: state.epoch,
            config: cfg.clone(),
            params: state.params.clone(),
            optimizer: state.optimizer.clone(),
        }
        .save(&ckpt)
    })?;
    if state.epoch == first_epoch {
        warn!("nothing to do: checkpoint already at epoch {}", state.epoch);
        Checkpoint {
            stage: Stage::Meta,
            variant: Some(variant),
            epoch: state.epoch,
            config: cfg.clone(),
            params: state.params,
            optimizer: state.optimizer,
        }
        .save(&ckpt)?;
    }
    rec.artifact(&ckpt);
    write_text(&curve_path, &curve, &mut rec)?;
    rec.write(&common.out, &format!("meta-train-{variant}"), &cfg)
        .map_err(Failure::Runtime)?;
    Ok(ExitCode::SUCCESS)
}

/// Loads the checkpoints `methods` need from `dir`.
fn load_models(
    dir: &Path,
    methods: &[Method],
    d: &TrainData<'_>,
    cfg: &ExperimentConfig,
    rec: &mut Recorder,
) -> Outcome<ModelSet> {
    let mut set = ModelSet::default();
    let load = |name: String, stage: Stage, rec: &mut Recorder| -> Outcome<ModelParams<Tensor>> {
        let path = dir.join(&name);
        if !path.is_file() {
            return Err(Error::MissingCheckpoint(format!("{} not found", path.display())).into());
        }
        Ok(load_checkpoint(&path, stage, d, cfg, rec)?.params)
    };
    for m in methods {
        match m.variant() {
            None if set.baseline.is_none() => {
                set.baseline = Some(load(BASELINE.into(), Stage::Baseline, rec)?)
            }
            Some(v) if !set.meta.contains_key(&v.to_string()) => {
                let p = load(meta_name(v), Stage::Meta, rec)?;
                set.insert_meta(v, p);
            }
            _ => {}
        }
    }
    Ok(set)
}

#[derive(Serialize)]
struct MarginRow<'a> {
    method: &'a str,
    k: usize,
    unit: &'a str,
    mean: f64,
    std: f64,
}

fn margins_csv(rows: &[MarginRow<'_>]) -> String {
    let mut s = String::from("method,k,unit,mean,std\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:?},{:?}",
            r.method, r.k, r.unit, r.mean, r.std
        );
    }
    s
}

fn eval(
    common: Common,
    data: DataArgs,
    checkpoints: Option<PathBuf>,
    methods: Vec<Method>,
    ks: Vec<usize>,
) -> Outcome<ExitCode> {
    let cfg = load_config(&common.config, common.seed)?;
    let methods = if methods.is_empty() {
        cfg.eval.methods.clone()
    } else {
        methods
    };
    let ks = if ks.is_empty() {
        cfg.eval.ks.clone()
    } else {
        ks
    };
    if let Some(k) = ks.iter().find(|&&k| k == 0) {
        return Err(Failure::Usage(format!(
            "--k values must be positive, got {k}"
        )));
    }
    prepare_out(&common.out)?;
    let mut rec = Recorder::default();
    let loaded = load_data(data.data.as_deref().unwrap_or(&common.out), &mut rec)?;
    let d = loaded.view();
    let dir = checkpoints.unwrap_or_else(|| common.out.clone());
    let models = load_models(&dir, &methods, &d, &cfg, &mut rec)?;

    let mut reports = Vec::new();
    for &m in &methods {
        for &k in &ks {
            info!("evaluating {m} at k={k}");
            let r = evaluate_method(&models, m, m.name(), &d, &cfg, EvalOptions::new(&cfg, k))?;
            info!(
                "{m} k={k}: Acc@1 {:.2} Acc@5 {:.2}",
                r.mean_acc1, r.mean_acc5
            );
            reports.push(r);
        }
    }
    let summaries: Vec<_> = reports
        .iter()
        .map(|r| (r, metasbir::eval::margin_summary(r)))
        .collect();
    let margin_rows: Vec<MarginRow<'_>> = summaries
        .iter()
        .flat_map(|(r, ms)| {
            ms.iter().map(move |m| MarginRow {
                method: &r.method,
                k: r.k,
                unit: &m.unit,
                mean: m.mean,
                std: m.std,
            })
        })
        .collect();
    let csv = common.out.join("report.csv");
    let json = common.out.join("report.json");
    emit_report(&reports, &csv, ReportFormat::Csv)?;
    emit_report(&reports, &json, ReportFormat::Json)?;
    rec.artifact(&csv);
    rec.artifact(&json);
    write_text(
        &common.out.join("margins.csv"),
        &margins_csv(&margin_rows),
        &mut rec,
    )?;
    rec.write(&common.out, "eval", &cfg)
        .map_err(Failure::Runtime)?;
    Ok(ExitCode::SUCCESS)
}

fn ablate(common: Common, data: DataArgs, checkpoints: Option<PathBuf>) -> Outcome<ExitCode> {
    let cfg = load_config(&common.config, common.seed)?;
    prepare_out(&common.out)?;
    let mut rec = Recorder::default();
    let loaded = load_data(data.data.as_deref().unwrap_or(&common.out), &mut rec)?;
    let d = loaded.view();
    let dir = checkpoints.unwrap_or_else(|| common.out.clone());
    let models = load_models(&dir, &[Method::Ours], &d, &cfg, &mut rec)?;
    let results = ablation_suite(&models, &d, &cfg, |label| info!("ablation: {label}"))?;
    let csv = common.out.join("ablation.csv");
    let json = common.out.join("ablation.json");
    emit_report(&results.reports, &csv, ReportFormat::Csv)?;
    emit_report(&results.reports, &json, ReportFormat::Json)?;
    rec.artifact(&csv);
    rec.artifact(&json);
    let rows: Vec<MarginRow<'_>> = results
        .margins
        .iter()
        .map(|m| MarginRow {
            method: "ours",
            k: cfg.train.k,
            unit: &m.unit,
            mean: m.mean,
            std: m.std,
        })
        .collect();
    write_text(
        &common.out.join("ablation_margins.csv"),
        &margins_csv(&rows),
        &mut rec,
    )?;
    rec.write(&common.out, "ablate", &cfg)
        .map_err(Failure::Runtime)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct GradReport<'a> {
    passed: bool,
    suites: &'a [SuiteReport],
}

fn check_grads(config: Option<PathBuf>, out: PathBuf, seeds: u64) -> Outcome<ExitCode> {
    let cfg = match &config {
        Some(p) => load_config(p, None)?,
        None => ExperimentConfig::default(),
    };
    if seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    prepare_out(&out)?;
    let train = TrainConfig {
        k: 2,
        ..cfg.train.clone()
    };
    let suites = vec![
        primitive_suite(seeds, 1e-5)?,
        hypergradient_suite_with(&train, seeds, 1e-3)?,
        grl_suite(seeds, cfg.train.grl_lambda, 1e-6)?,
    ];
    let passed = suites.iter().all(|s| s.passed);
    for s in &suites {
        let line = format!(
            "{}: {} checks, max relative error {:.3e} (tolerance {:.0e}), {:.2} s",
            s.suite,
            s.checks.len(),
            s.max_rel_error,
            s.tolerance,
            s.seconds
        );
        if s.passed {
            info!("{line}");
        } else {
            eprintln!("FAILED {line}");
            for c in s.checks.iter().filter(|c| !c.passed) {
                eprintln!(
                    "  {} seed {}: relative error {:.3e}",
                    c.name, c.seed, c.max_rel_error
                );
            }
        }
    }
    let mut rec = Recorder::default();
    if let Some(p) = &config {
        rec.input(p);
    }
    write_json(
        &out.join("gradcheck.json"),
        &GradReport {
            passed,
            suites: &suites,
        },
        &mut rec,
    )?;
    rec.write(&out, "check-grads", &cfg)
        .map_err(Failure::Runtime)?;
    if passed {
        Ok(ExitCode::SUCCESS)
    } else {
        bail_runtime("gradient verification failed")
    }
}

fn bail_runtime(msg: &str) -> Outcome<ExitCode> {
    Err(Failure::Runtime(anyhow!("{msg}")))
}
