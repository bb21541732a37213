//! Few-shot adaptation, retrieval scoring, ablations and report files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tapegrad::optim::{Adam, AdamConfig};
use tapegrad::{Graph, Tensor, Var};

use crate::config::{ExperimentConfig, Method, Mode, RegSwitches, Variant};
use crate::episodes::{adaptation_set, derive_seed, evaluation_set, Triplet};
use crate::error::{Error, Result};
use crate::losses::{triplet_loss, Hinge, TripletBatch};
use crate::metatrain::{
    init_params, inner_adapt, meta_train, pretrain_baseline, InnerSpec, MetaState, TrainData,
};
use crate::model::{embed, encode, predict_margin, Encoder, Linear, ModelParams};

const EVAL_STREAM: u64 = 11;

/// Trained parameters available to the harness.
#[derive(Debug, Clone, Default)]
pub struct ModelSet {
    /// Stage-1 baseline, used by `no-adapt` and `fine-tune`.
    pub baseline: Option<ModelParams<Tensor>>,
    pub meta: BTreeMap<String, ModelParams<Tensor>>,
}

impl ModelSet {
    pub fn insert_meta(&mut self, variant: Variant, params: ModelParams<Tensor>) {
        self.meta.insert(variant.to_string(), params);
    }

    pub fn for_method(&self, method: Method) -> Result<&ModelParams<Tensor>> {
        match method.variant() {
            None => self.baseline.as_ref().ok_or_else(|| {
                Error::MissingCheckpoint(format!("{method} needs the pretrained baseline"))
            }),
            Some(v) => self.meta.get(&v.to_string()).ok_or_else(|| {
                Error::MissingCheckpoint(format!("{method} needs a {v} meta-trained checkpoint"))
            }),
        }
    }
}

/// Pretrains the baseline and meta-trains every requested variant from it.
pub fn train_models(
    data: &TrainData<'_>,
    cfg: &ExperimentConfig,
    variants: &[Variant],
) -> Result<ModelSet> {
    let mut baseline = init_params(data, cfg);
    pretrain_baseline(data, cfg, &mut baseline, |_| {})?;
    let mut set = ModelSet {
        baseline: Some(baseline.clone()),
        ..ModelSet::default()
    };
    for &v in variants {
        let mut c = cfg.clone();
        c.train.variant = v;
        let start = MetaState {
            params: baseline.clone(),
            optimizer: None,
            epoch: 0,
        };
        let (state, _) = meta_train(data, &c, start, |_, _| Ok(()))?;
        set.insert_meta(v, state.params);
    }
    Ok(set)
}

/// A specialized model for one test unit.
#[derive(Debug, Clone)]
pub struct AdaptedModel {
    pub encoder: Encoder<Tensor>,
    pub head: Linear<Tensor>,
    /// Margin used by the inner loop, if the method has one.
    pub margin: Option<f64>,
    pub margin_fallback: bool,
}

fn triplet_rows(ts: &[Triplet]) -> Vec<usize> {
    ts.iter()
        .map(|t| t.anchor)
        .chain(ts.iter().map(|t| t.positive))
        .chain(ts.iter().map(|t| t.negative))
        .collect()
}

/// Test-time adaptation of `params` on `triplets` (item indices into `data`).
///
/// `steps` overrides the inner-step count of meta-learned methods.
pub fn adapt(
    params: &ModelParams<Tensor>,
    method: Method,
    triplets: &[Triplet],
    data: &TrainData<'_>,
    cfg: &ExperimentConfig,
    steps: usize,
) -> Result<AdaptedModel> {
    if triplets.is_empty() {
        return Err(Error::Invalid("empty fine-tune set".into()));
    }
    let k = triplets.len();
    match method {
        Method::NoAdapt => Ok(AdaptedModel {
            encoder: params.encoder.clone(),
            head: params.head.clone(),
            margin: None,
            margin_fallback: false,
        }),
        Method::FineTune => fine_tune(params, triplets, data, cfg),
        _ => {
            let variant = method.variant().expect("meta method");
            let g = Graph::new();
            let m = params.to_graph(&g);
            let x = g.constant(data.dataset.features(&triplet_rows(triplets)));
            let lat = encode(&m.encoder, x)?;
            let c = lat.shape()[1];
            let (margin, fallback) = if variant.learns_margin() {
                let p = predict_margin(
                    &m.margin,
                    lat.slice(0..k, 0..c)?,
                    lat.slice(k..2 * k, 0..c)?,
                    cfg.train.fixed_margin,
                )?;
                (p.value, p.fallback)
            } else {
                (g.scalar(cfg.train.fixed_margin), false)
            };
            let spec = InnerSpec::for_variant(variant, &cfg.train, steps, false);
            let adapted = inner_adapt(&m, x, lat, margin, &spec)?;
            Ok(AdaptedModel {
                encoder: adapted.encoder.values(),
                head: adapted.head.values(),
                margin: Some(margin.item()),
                margin_fallback: fallback,
            })
        }
    }
}

/// Plain fine-tuning: Adam on encoder and head with the hard triplet loss at
/// the fixed margin.
fn fine_tune(
    params: &ModelParams<Tensor>,
    triplets: &[Triplet],
    data: &TrainData<'_>,
    cfg: &ExperimentConfig,
) -> Result<AdaptedModel> {
    let k = triplets.len();
    let mut encoder = params.encoder.clone();
    let mut head = params.head.clone();
    let shapes: Vec<_> = encoder
        .leaves()
        .iter()
        .chain(head.leaves().iter())
        .map(|(_, t)| t.shape())
        .collect();
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.eval.finetune_lr,
        ..AdamConfig::default()
    });
    opt.init(&shapes);
    let features = data.dataset.features(&triplet_rows(triplets));
    for step in 0..cfg.eval.finetune_steps {
        let g = Graph::new();
        let enc = encoder.map(|t| g.param(t));
        let hd = head.map(|t| g.param(t));
        let emb = embed(&enc, &hd, g.constant(features.clone()))?;
        let d = emb.shape()[1];
        let loss = triplet_loss(&TripletBatch {
            anchors: emb.slice(0..k, 0..d)?,
            positives: emb.slice(k..2 * k, 0..d)?,
            negatives: emb.slice(2 * k..3 * k, 0..d)?,
            margin: g.scalar(cfg.train.fixed_margin),
            hinge: Hinge::Hard,
        })?;
        let vars: Vec<Var<'_>> = enc
            .leaves()
            .into_iter()
            .chain(hd.leaves())
            .map(|(_, v)| *v)
            .collect();
        let grads: Vec<Tensor> = g
            .gradient(loss, &vars, false)?
            .grads
            .iter()
            .map(|v| (*v.value()).clone())
            .collect();
        if grads.iter().any(|t| !t.is_finite()) {
            return Err(Error::Diverged(format!(
                "fine-tune gradient non-finite at step {step}"
            )));
        }
        let mut leaves: Vec<&mut Tensor> = encoder.leaves_mut();
        leaves.extend(head.leaves_mut());
        opt.step(&mut leaves, &grads)?;
    }
    Ok(AdaptedModel {
        encoder,
        head,
        margin: Some(cfg.train.fixed_margin),
        margin_fallback: false,
    })
}

/// Embeddings of the listed items under an adapted model.
pub fn embed_items(model: &AdaptedModel, data: &TrainData<'_>, items: &[usize]) -> Result<Tensor> {
    let g = Graph::new();
    g.set_grad_enabled(false);
    let enc = model.encoder.map(|t| g.constant(t.clone()));
    let head = model.head.map(|t| g.constant(t.clone()));
    let e = embed(&enc, &head, g.constant(data.dataset.features(items)))?;
    Ok((*e.value()).clone())
}

/// Gallery ids ordered by ascending Euclidean distance to `query`; ties go to
/// the smaller id.
pub fn retrieve(query: &[f64], gallery: &Tensor, ids: &[u64]) -> Result<Vec<u64>> {
    if gallery.rows() == 0 {
        return Err(Error::Invalid("empty gallery".into()));
    }
    if gallery.rows() != ids.len() || gallery.cols() != query.len() {
        return Err(Error::Dimension {
            what: "retrieval gallery",
            expected: query.len(),
            got: gallery.cols(),
        });
    }
    let mut scored: Vec<(f64, u64)> = (0..gallery.rows())
        .map(|r| {
            let d2: f64 = gallery
                .row_slice(r)
                .iter()
                .zip(query)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            (d2.sqrt(), ids[r])
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, id)| id).collect())
}

/// Percentage of queries whose true match has rank (1-based) at most `q`.
pub fn acc_at_q(ranks: &[usize], q: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    let hits = ranks.iter().filter(|&&r| r <= q).count();
    100.0 * hits as f64 / ranks.len() as f64
}

/// 1-based rank of each query's true match.
pub fn unit_ranks(model: &AdaptedModel, data: &TrainData<'_>, unit: &str) -> Result<Vec<usize>> {
    let (queries, gallery) = evaluation_set(data.dataset, data.split, unit)?;
    let q_emb = embed_items(model, data, &queries)?;
    let g_emb = embed_items(model, data, &gallery)?;
    let ids: Vec<u64> = gallery.iter().map(|&i| data.dataset.item(i).id).collect();
    queries
        .iter()
        .enumerate()
        .map(|(qi, &q)| {
            let pair = data.dataset.item(q).pair_id;
            let truth = data
                .dataset
                .photo_for_pair(pair)
                .map(|p| data.dataset.item(p).id)
                .ok_or_else(|| {
                    Error::Integrity(format!("sketch {} has no photo", data.dataset.item(q).id))
                })?;
            let ranking = retrieve(q_emb.row_slice(qi), &g_emb, &ids)?;
            ranking
                .iter()
                .position(|&id| id == truth)
                .map(|p| p + 1)
                .ok_or_else(|| {
                    Error::Integrity(format!(
                        "true match {truth} is not in the gallery of {unit}"
                    ))
                })
        })
        .collect()
}

/// One line of a report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub mode: Mode,
    pub k: usize,
    pub seed: usize,
    pub acc1: f64,
    pub acc5: f64,
    /// Mean adaptation wall-clock per test unit, when timing is recorded.
    pub adapt_ms: Option<f64>,
}

/// Per-test-unit results of one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitResult {
    pub unit: String,
    pub ranks: Vec<usize>,
    pub margin: Option<f64>,
    pub adapt_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub mode: Mode,
    pub k: usize,
    pub config_hash: String,
    pub rows: Vec<ReportRow>,
    pub mean_acc1: f64,
    pub mean_acc5: f64,
    /// Margin used per test unit, one entry per seed.
    pub unit_margins: BTreeMap<String, Vec<f64>>,
}

/// Options that vary between the main evaluation and ablation sweeps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub k: usize,
    /// Inner steps for meta-learned methods.
    pub steps: usize,
}

impl EvalOptions {
    pub fn new(cfg: &ExperimentConfig, k: usize) -> Self {
        let steps = if cfg.eval.inner_steps == 0 {
            cfg.train.inner_steps
        } else {
            cfg.eval.inner_steps
        };
        Self { k, steps }
    }
}

/// Adaptation set of `unit` for one evaluation repeat; identical across methods.
pub fn eval_adaptation_set(
    data: &TrainData<'_>,
    cfg: &ExperimentConfig,
    unit: &str,
    k: usize,
    seed: usize,
) -> Result<Vec<Triplet>> {
    adaptation_set(
        data.dataset,
        data.split,
        unit,
        k,
        derive_seed(cfg.seed, &[EVAL_STREAM, seed as u64]),
    )
}

/// Adapt-then-retrieve on every test unit for every seed.
pub fn evaluate_method(
    models: &ModelSet,
    method: Method,
    label: &str,
    data: &TrainData<'_>,
    cfg: &ExperimentConfig,
    opts: EvalOptions,
) -> Result<EvalReport> {
    let params = models.for_method(method)?;
    let units: Vec<&String> = data.split.test_units.iter().collect();
    let mut rows = Vec::new();
    let mut unit_margins: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for seed in 0..cfg.eval.seeds {
        let results: Vec<Result<UnitResult>> = units
            .par_iter()
            .map(|unit| {
                let triplets = eval_adaptation_set(data, cfg, unit, opts.k, seed)?;
                let start = Instant::now();
                let model = adapt(params, method, &triplets, data, cfg, opts.steps)?;
                let adapt_ms = start.elapsed().as_secs_f64() * 1e3;
                Ok(UnitResult {
                    unit: (*unit).clone(),
                    ranks: unit_ranks(&model, data, unit)?,
                    margin: model.margin,
                    adapt_ms,
                })
            })
            .collect();
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;
        let ranks: Vec<usize> = results
            .iter()
            .flat_map(|r| r.ranks.iter().copied())
            .collect();
        for r in &results {
            if let Some(m) = r.margin {
                unit_margins.entry(r.unit.clone()).or_default().push(m);
            }
        }
        let adapt_ms = cfg
            .eval
            .record_timing
            .then(|| results.iter().map(|r| r.adapt_ms).sum::<f64>() / results.len().max(1) as f64);
        rows.push(ReportRow {
            method: label.to_string(),
            mode: data.mode(),
            k: opts.k,
            seed,
            acc1: acc_at_q(&ranks, 1),
            acc5: acc_at_q(&ranks, 5),
            adapt_ms,
        });
    }
    let n = rows.len().max(1) as f64;
    Ok(EvalReport {
        method: label.to_string(),
        mode: data.mode(),
        k: opts.k,
        config_hash: cfg.hash(),
        mean_acc1: rows.iter().map(|r| r.acc1).sum::<f64>() / n,
        mean_acc5: rows.iter().map(|r| r.acc5).sum::<f64>() / n,
        rows,
        unit_margins,
    })
}

/// Mean and standard deviation (population) of `v`.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Summary of predicted margins on the test units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginSummary {
    pub unit: String,
    pub mean: f64,
    pub std: f64,
}

pub fn margin_summary(report: &EvalReport) -> Vec<MarginSummary> {
    report
        .unit_margins
        .iter()
        .map(|(unit, v)| {
            let (mean, std) = mean_std(v);
            MarginSummary {
                unit: unit.clone(),
                mean,
                std,
            }
        })
        .collect()
}

/// Standard deviation across units of each unit's mean margin.
pub fn margin_spread(report: &EvalReport) -> f64 {
    let means: Vec<f64> = margin_summary(report).iter().map(|m| m.mean).collect();
    mean_std(&means).1
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResults {
    pub reports: Vec<EvalReport>,
    pub margins: Vec<MarginSummary>,
}

fn switch_grid() -> Vec<(String, RegSwitches)> {
    let s = |domain, discriminative, semantic| RegSwitches {
        domain,
        discriminative,
        semantic,
    };
    vec![
        ("all".into(), s(true, true, true)),
        ("none".into(), s(false, false, false)),
        ("no-domain".into(), s(false, true, true)),
        ("no-discriminative".into(), s(true, false, true)),
        ("no-semantic".into(), s(true, true, false)),
    ]
}

/// Test-time step sweep, k sweep and margin distribution on `models`, plus
/// retrained sweeps over embedding width and regularizer switches.
///
/// `progress` is called with a label before each evaluation or retraining.
pub fn ablation_suite(
    models: &ModelSet,
    data: &TrainData<'_>,
    cfg: &ExperimentConfig,
    mut progress: impl FnMut(&str),
) -> Result<AblationResults> {
    let mut reports = Vec::new();
    let base_k = cfg.train.k;
    for &steps in &cfg.ablation.steps {
        let label = format!("ours@steps={steps}");
        progress(&label);
        reports.push(evaluate_method(
            models,
            Method::Ours,
            &label,
            data,
            cfg,
            EvalOptions { k: base_k, steps },
        )?);
    }
    let mut margins = Vec::new();
    for &k in &cfg.eval.ks {
        let label = format!("ours@k={k}");
        progress(&label);
        let r = evaluate_method(
            models,
            Method::Ours,
            &label,
            data,
            cfg,
            EvalOptions::new(cfg, k),
        )?;
        if k == base_k {
            margins = margin_summary(&r);
        }
        reports.push(r);
    }
    let mut retrain = |label: String, c: ExperimentConfig| -> Result<()> {
        progress(&format!("training {label}"));
        let mut c = c;
        c.train.meta_epochs = cfg.ablation.meta_epochs;
        let set = train_models(data, &c, &[Variant::Ours])?;
        reports.push(evaluate_method(
            &set,
            Method::Ours,
            &label,
            data,
            &c,
            EvalOptions::new(&c, base_k),
        )?);
        Ok(())
    };
    for &d in &cfg.ablation.embed_dims {
        let mut c = cfg.clone();
        c.model.embed_dim = d;
        retrain(format!("ours@d={d}"), c)?;
    }
    if cfg.ablation.regularizer_grid {
        for (name, switches) in switch_grid() {
            let mut c = cfg.clone();
            c.train.regularizers = switches;
            retrain(format!("ours@reg={name}"), c)?;
        }
    }
    Ok(AblationResults { reports, margins })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(ReportFormat::Csv),
            Some("json") => Ok(ReportFormat::Json),
            _ => Err(Error::Config(format!(
                "report path {} needs a .csv or .json extension",
                path.display()
            ))),
        }
    }
}

pub const REPORT_COLUMNS: [&str; 7] = ["method", "mode", "k", "seed", "acc1", "acc5", "adapt_ms"];

/// Writes every row of `reports`; an empty list gives a header-only CSV or `[]`.
pub fn emit_report(reports: &[EvalReport], path: &Path, format: ReportFormat) -> Result<()> {
    let rows: Vec<&ReportRow> = reports.iter().flat_map(|r| r.rows.iter()).collect();
    let bytes = match format {
        ReportFormat::Csv => {
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .from_writer(Vec::new());
            let io = |e: csv::Error| Error::Invalid(format!("csv encoding: {e}"));
            w.write_record(REPORT_COLUMNS).map_err(io)?;
            for r in &rows {
                w.serialize(r).map_err(io)?;
            }
            w.into_inner()
                .map_err(|e| Error::Invalid(format!("csv encoding: {e}")))?
        }
        ReportFormat::Json => {
            let mut s =
                serde_json::to_string_pretty(&rows).map_err(|e| Error::Invalid(e.to_string()))?;
            s.push('\n');
            s.into_bytes()
        }
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path, format: ReportFormat) -> Result<Vec<ReportRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    match format {
        ReportFormat::Csv => {
            let mut r = csv::Reader::from_reader(text.as_bytes());
            let header: Vec<String> = r
                .headers()
                .map_err(|e| parse(1, e.to_string()))?
                .iter()
                .map(str::to_string)
                .collect();
            if header != REPORT_COLUMNS {
                return Err(parse(1, format!("unexpected columns {header:?}")));
            }
            r.deserialize()
                .enumerate()
                .map(|(i, row)| row.map_err(|e| parse(i + 2, e.to_string())))
                .collect()
        }
        ReportFormat::Json => {
            serde_json::from_str(&text).map_err(|e| parse(e.line(), e.to_string()))
        }
    }
}
