//! Baseline pretraining and bi-level meta-training.

use std::collections::BTreeMap;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use tapegrad::optim::{sgd_step, Adam, AdamConfig, AdamState};
use tapegrad::{Graph, Tensor, Var};

use crate::config::{ExperimentConfig, Mode, TrainConfig, Variant};
use crate::episodes::{
    derive_seed, Dataset, Domain, SemanticTable, Split, TaskEpisode, TaskSampler, Triplet,
};
use crate::error::{Error, Result};
use crate::losses::{
    classification_loss, reg_loss, triplet_loss, Hinge, PairLatents, RegSamples, RoleSamples,
    StyleSamples, TripletBatch,
};
use crate::model::{
    encode, predict_margin, project, Encoder, Group, Linear, ModelDims, ModelParams,
};

const PRETRAIN_STREAM: u64 = 1;
const META_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;

/// Everything read-only a training or evaluation run needs from disk.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub dataset: &'a Dataset,
    pub split: &'a Split,
    pub semantic: Option<&'a SemanticTable>,
}

impl<'a> TrainData<'a> {
    pub fn mode(&self) -> Mode {
        self.split.mode
    }

    pub fn dims(&self, cfg: &ExperimentConfig) -> ModelDims {
        let classes = match self.mode() {
            Mode::Category => self.split.train_units.len(),
            Mode::User => 1,
        };
        let semantic = self.semantic.map_or(1, |s| s.dim());
        ModelDims::from_config(&cfg.model, self.dataset.feature_dim(), classes, semantic)
    }
}

/// Fresh parameters for `cfg`, seeded from `cfg.seed`.
pub fn init_params(data: &TrainData<'_>, cfg: &ExperimentConfig) -> ModelParams<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[INIT_STREAM]));
    ModelParams::init(
        &data.dims(cfg),
        &mut rng,
        cfg.train.alpha_init,
        cfg.train.fixed_margin,
    )
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub triplet: f64,
    pub reg: f64,
    pub mean_margin: f64,
    pub dropped_tasks: usize,
}

/// Which leaves belong to `groups`.
pub fn leaf_mask(params: &ModelParams<Tensor>, groups: &[Group]) -> Vec<bool> {
    params
        .leaves()
        .iter()
        .map(|(n, _)| Group::of(n).is_some_and(|g| groups.contains(&g)))
        .collect()
}

/// Gradient of `loss` for every leaf of `vars`; leaves outside `mask` get zeros.
fn masked_gradients<'g>(
    g: &'g Graph,
    loss: Var<'g>,
    vars: &[Var<'g>],
    mask: &[bool],
) -> Result<Vec<Tensor>> {
    let active: Vec<Var<'g>> = vars
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(v, _)| *v)
        .collect();
    let grads = g.gradient(loss, &active, false)?;
    let mut it = grads.grads.into_iter();
    let out: Vec<Tensor> = vars
        .iter()
        .zip(mask)
        .map(|(v, &m)| {
            if m {
                (*it.next().expect("one gradient per active leaf").value()).clone()
            } else {
                Tensor::zeros(v.shape())
            }
        })
        .collect();
    Ok(out)
}

fn adam_for(params: &ModelParams<Tensor>, lr: f64, state: Option<AdamState>) -> Adam {
    let config = AdamConfig {
        lr,
        ..AdamConfig::default()
    };
    match state {
        Some(s) => Adam::with_state(config, s),
        None => {
            let mut a = Adam::new(config);
            let shapes: Vec<_> = params.leaves().iter().map(|(_, t)| t.shape()).collect();
            a.init(&shapes);
            a
        }
    }
}

fn apply_adam(params: &mut ModelParams<Tensor>, opt: &mut Adam, grads: &[Tensor]) -> Result<()> {
    let mut leaves = params.leaves_mut();
    Ok(opt.step(&mut leaves, grads)?)
}

/// Encoded features of the listed items.
fn latents<'g>(
    g: &'g Graph,
    enc: &Encoder<Var<'g>>,
    data: &Dataset,
    idx: &[usize],
) -> Result<Var<'g>> {
    encode(enc, g.constant(data.features(idx)))
}

fn triplet_columns(ts: &[Triplet]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    (
        ts.iter().map(|t| t.anchor).collect(),
        ts.iter().map(|t| t.positive).collect(),
        ts.iter().map(|t| t.negative).collect(),
    )
}

/// Overflow inside the forward pass is reported as divergence.
fn divergence(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Autograd(tapegrad::AutogradError::NonFinite { op }) => Error::Diverged(format!(
            "non-finite {op} output at epoch {epoch}, batch {batch}"
        )),
        other => other,
    }
}

/// Training samples for pretraining: one per training sketch.
fn pretrain_pairs(data: &TrainData<'_>) -> Result<Vec<(usize, usize, usize)>> {
    let units = data.dataset.units(data.mode());
    let mut out = Vec::new();
    for (ui, u) in data.split.train_units.iter().enumerate() {
        let pairs = units
            .get(u)
            .ok_or_else(|| Error::Integrity(format!("training unit {u} has no pairs")))?;
        for (pi, p) in pairs.iter().enumerate() {
            for &s in &p.sketches {
                out.push((ui, pi, s));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Invalid("no training pairs to pretrain on".into()));
    }
    Ok(out)
}

/// Stage 1: Adam on encoder and head with hard triplets (and optionally the
/// classification head). Returns the per-epoch mean loss.
pub fn pretrain_baseline(
    data: &TrainData<'_>,
    cfg: &ExperimentConfig,
    params: &mut ModelParams<Tensor>,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    let t = &cfg.train;
    let units = data.dataset.units(data.mode());
    let unit_pairs: Vec<_> = data.split.train_units.iter().map(|u| &units[u]).collect();
    let samples = pretrain_pairs(data)?;
    let class_index = data.split.class_index();
    let mut groups = vec![Group::Encoder, Group::Head];
    let use_cls = t.pretrain_class_weight > 0.0 && data.mode() == Mode::Category;
    if use_cls {
        groups.push(Group::Classifier);
    }
    let mask = leaf_mask(params, &groups);
    let mut opt = adam_for(params, t.pretrain_lr, None);
    let mut history = Vec::with_capacity(t.pretrain_epochs);
    for epoch in 0..t.pretrain_epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[PRETRAIN_STREAM, epoch as u64]));
        let mut order = samples.clone();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(t.pretrain_batch) {
            let triplets: Vec<Triplet> = batch
                .iter()
                .map(|&(ui, pi, s)| {
                    let pairs = unit_pairs[ui];
                    let mut j = rng.gen_range(0..pairs.len() - 1);
                    if j >= pi {
                        j += 1;
                    }
                    Triplet {
                        anchor: s,
                        positive: pairs[pi].photo,
                        negative: pairs[j].photo,
                    }
                })
                .collect();
            let g = Graph::new();
            let m = params.to_graph(&g);
            let vars: Vec<Var<'_>> = m.leaves().into_iter().map(|(_, v)| *v).collect();
            let forward = || -> Result<Var<'_>> {
                let (a, p, n) = triplet_columns(&triplets);
                let idx: Vec<usize> = a.iter().chain(&p).chain(&n).copied().collect();
                let lat = latents(&g, &m.encoder, data.dataset, &idx)?;
                let emb = project(&m.head, lat)?;
                let b = triplets.len();
                let mut loss = triplet_loss(&TripletBatch {
                    anchors: emb.slice(0..b, 0..emb.shape()[1])?,
                    positives: emb.slice(b..2 * b, 0..emb.shape()[1])?,
                    negatives: emb.slice(2 * b..3 * b, 0..emb.shape()[1])?,
                    margin: g.scalar(t.pretrain_margin),
                    hinge: Hinge::Hard,
                })?;
                if use_cls {
                    let labels: Vec<usize> = idx[..2 * b]
                        .iter()
                        .map(|&i| class_index[&data.dataset.item(i).category])
                        .collect();
                    let ce = classification_loss(
                        &m.classifier,
                        lat.slice(0..2 * b, 0..lat.shape()[1])?,
                        &labels,
                    )?;
                    loss = loss.add(ce.scale(t.pretrain_class_weight)?)?;
                }
                Ok(loss)
            };
            let loss = forward().map_err(|e| divergence(e, epoch, batches))?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Diverged(format!(
                    "pretraining loss {value} at epoch {epoch}, batch {batches}"
                )));
            }
            let grads = masked_gradients(&g, loss, &vars, &mask)?;
            if grads.iter().any(|t| !t.is_finite()) {
                return Err(Error::Diverged(format!(
                    "non-finite gradient at epoch {epoch}, batch {batches}"
                )));
            }
            drop(vars);
            apply_adam(params, &mut opt, &grads)?;
            total += value;
            batches += 1;
        }
        let stats = EpochStats {
            epoch,
            loss: total / batches as f64,
            triplet: total / batches as f64,
            ..EpochStats::default()
        };
        debug!("pretrain epoch {epoch}: loss {:.6}", stats.loss);
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(history)
}

/// How an inner loop steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rates {
    /// Use the meta-learned per-coordinate rates `alpha` (head only).
    Learned,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerSpec {
    pub steps: usize,
    pub hinge: Hinge,
    pub rates: Rates,
    pub adapt_encoder: bool,
    /// Record the inner gradient so the outer loss can differentiate through it.
    pub create_graph: bool,
}

impl InnerSpec {
    pub fn for_variant(
        variant: Variant,
        t: &TrainConfig,
        steps: usize,
        create_graph: bool,
    ) -> Self {
        Self {
            steps,
            hinge: if variant.smooth_inner_hinge() {
                Hinge::Smooth { tau: t.tau }
            } else {
                Hinge::Hard
            },
            rates: if variant.learns_rates() {
                Rates::Learned
            } else {
                Rates::Fixed(t.alpha_init)
            },
            adapt_encoder: variant.adapts_encoder(),
            create_graph,
        }
    }
}

/// Adapted copies of the encoder and head; the inputs are left untouched.
#[derive(Debug, Clone)]
pub struct Adapted<'g> {
    pub encoder: Encoder<Var<'g>>,
    pub head: Linear<Var<'g>>,
}

fn split3<'g>(x: Var<'g>) -> Result<(Var<'g>, Var<'g>, Var<'g>)> {
    let [rows, cols] = x.shape();
    let k = rows / 3;
    Ok((
        x.slice(0..k, 0..cols)?,
        x.slice(k..2 * k, 0..cols)?,
        x.slice(2 * k..3 * k, 0..cols)?,
    ))
}

/// Inner loop: `steps` gradient steps on the support triplets.
///
/// `support_x` stacks anchor, positive and negative features (`[3k, D_in]`)
/// and `support_latent` their latents under `m.encoder`.
pub fn inner_adapt<'g>(
    m: &ModelParams<Var<'g>>,
    support_x: Var<'g>,
    support_latent: Var<'g>,
    margin: Var<'g>,
    spec: &InnerSpec,
) -> Result<Adapted<'g>> {
    let g = support_x.graph();
    let mut encoder = m.encoder.clone();
    let mut head = m.head.clone();
    for step in 0..spec.steps {
        let lat = if spec.adapt_encoder && step > 0 {
            encode(&encoder, support_x)?
        } else {
            support_latent
        };
        let emb = project(&head, lat)?;
        let (a, p, n) = split3(emb)?;
        let loss = triplet_loss(&TripletBatch {
            anchors: a,
            positives: p,
            negatives: n,
            margin,
            hinge: spec.hinge,
        })?;
        let mut vars: Vec<Var<'g>> = Vec::new();
        if spec.adapt_encoder {
            vars.extend(encoder.leaves().into_iter().map(|(_, v)| *v));
        }
        vars.extend(head.leaves().into_iter().map(|(_, v)| *v));
        let grads = g.gradient(loss, &vars, spec.create_graph)?.grads;
        if grads.iter().any(|v| !v.value().is_finite()) {
            return Err(Error::Diverged(format!(
                "non-finite inner gradient at step {step}"
            )));
        }
        let rates: Vec<Var<'g>> = match spec.rates {
            Rates::Learned => {
                if spec.adapt_encoder {
                    return Err(Error::Config(
                        "learned inner rates cover the head only".into(),
                    ));
                }
                m.alpha.leaves().into_iter().map(|(_, v)| *v).collect()
            }
            Rates::Fixed(r) => vec![g.scalar(r); vars.len()],
        };
        let updated = sgd_step(&vars, &grads, &rates)?;
        let n_enc = if spec.adapt_encoder {
            encoder.leaves().len()
        } else {
            0
        };
        let (enc_part, head_part) = updated.split_at(n_enc);
        if spec.adapt_encoder {
            encoder = encoder.from_leaves(enc_part.to_vec())?;
        }
        head = head.from_leaves(head_part.to_vec())?;
    }
    Ok(Adapted { encoder, head })
}

/// Loss terms of one task, for logging.
#[derive(Debug, Clone, Copy)]
pub struct TaskOutput<'g> {
    pub total: Var<'g>,
    pub triplet: f64,
    pub reg: f64,
    pub margin: f64,
}

/// The outer objective of one episode: validation triplet loss after
/// adaptation plus `lambda` times the regularizer on support and validation.
pub fn task_objective<'g>(
    m: &ModelParams<Var<'g>>,
    episode: &TaskEpisode,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    create_graph: bool,
) -> Result<TaskOutput<'g>> {
    let g = m.head.weight.graph();
    let k = episode.support.len();
    let (sa, sp, sn) = triplet_columns(&episode.support);
    let (va, vp, vn) = triplet_columns(&episode.validation);
    let neg_s: Vec<usize> = episode.style_negatives.iter().map(|s| s.sketch).collect();
    let neg_p: Vec<usize> = episode.style_negatives.iter().map(|s| s.photo).collect();
    let idx: Vec<usize> = [&sa, &sp, &sn, &va, &vp, &vn, &neg_s, &neg_p]
        .iter()
        .flat_map(|v| v.iter().copied())
        .collect();
    let x = g.constant(data.dataset.features(&idx));
    let lat = encode(&m.encoder, x)?;
    let c = lat.shape()[1];
    let d_in = x.shape()[1];
    let rows = |v: Var<'g>, i: usize, width: usize| v.slice(i * k..(i + 1) * k, 0..width);

    let variant = cfg.variant;
    let margin = if variant.learns_margin() {
        predict_margin(
            &m.margin,
            rows(lat, 0, c)?,
            rows(lat, 1, c)?,
            cfg.fixed_margin,
        )?
        .value
    } else {
        g.scalar(cfg.fixed_margin)
    };
    let spec = InnerSpec::for_variant(variant, cfg, cfg.inner_steps, create_graph);
    let adapted = inner_adapt(
        m,
        x.slice(0..3 * k, 0..d_in)?,
        lat.slice(0..3 * k, 0..c)?,
        margin,
        &spec,
    )?;

    let val_lat = if spec.adapt_encoder {
        encode(&adapted.encoder, x.slice(3 * k..6 * k, 0..d_in)?)?
    } else {
        lat.slice(3 * k..6 * k, 0..c)?
    };
    let (a, p, n) = split3(project(&adapted.head, val_lat)?)?;
    let outer = triplet_loss(&TripletBatch {
        anchors: a,
        positives: p,
        negatives: n,
        margin: g.scalar(cfg.outer_margin),
        hinge: Hinge::Hard,
    })?;

    let mut total = outer;
    let mut reg_value = 0.0;
    if variant.uses_regularizers() {
        let samples = reg_samples(lat, k, &idx, episode, data)?;
        let reg = reg_loss(
            data.mode(),
            m,
            &samples,
            cfg.regularizers,
            cfg.grl_lambda,
            cfg.style_margin,
        )?;
        reg_value = reg.total.item();
        total = total.add(reg.total.scale(cfg.lambda)?)?;
    }
    Ok(TaskOutput {
        total,
        triplet: outer.item(),
        reg: reg_value,
        margin: margin.item(),
    })
}

fn reg_samples<'g>(
    lat: Var<'g>,
    k: usize,
    idx: &[usize],
    episode: &TaskEpisode,
    data: &TrainData<'_>,
) -> Result<RegSamples<'g>> {
    let c = lat.shape()[1];
    let class_index = data.split.class_index();
    let role = |r: usize| -> Result<RoleSamples<'g>> {
        // role r: support rows r*k.., validation rows (3 + r)*k..
        let rows: Vec<usize> = (r * k..(r + 1) * k)
            .chain((3 + r) * k..(4 + r) * k)
            .collect();
        let items: Vec<usize> = rows.iter().map(|&i| idx[i]).collect();
        let latent = lat.gather_rows(&rows)?;
        let is_photo = items
            .iter()
            .map(|&i| data.dataset.item(i).domain == Domain::Photo)
            .collect();
        let (labels, semantic) = match data.mode() {
            Mode::Category => {
                let labels = items
                    .iter()
                    .map(|&i| {
                        let cat = &data.dataset.item(i).category;
                        class_index.get(cat).copied().ok_or_else(|| {
                            Error::Integrity(format!("category {cat} is not a training category"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let semantic = match data.semantic {
                    Some(t) => Some(
                        t.rows(
                            items
                                .iter()
                                .map(|&i| data.dataset.item(i).category.as_str()),
                        )?,
                    ),
                    None => None,
                };
                (labels, semantic)
            }
            Mode::User => (Vec::new(), None),
        };
        Ok(RoleSamples {
            latent,
            is_photo,
            labels,
            semantic,
        })
    };
    let roles = [role(0)?, role(1)?, role(2)?];
    let style = if data.mode() == Mode::User && !episode.style_negatives.is_empty() {
        let q = episode.style_negatives.len();
        let pair_sk: Vec<usize> = (0..k).chain(3 * k..4 * k).collect();
        let pair_ph: Vec<usize> = (k..2 * k).chain(4 * k..5 * k).collect();
        let user_of = |i: usize| data.dataset.item(idx[i]).user.clone().unwrap_or_default();
        let pair_users: Vec<String> = pair_sk.iter().map(|&i| user_of(i)).collect();
        let negative_users: Vec<String> = (6 * k..6 * k + q).map(user_of).collect();
        let mut triplets = Vec::new();
        for a in 0..pair_sk.len() {
            for p in 0..pair_sk.len() {
                if a == p || pair_users[a] != pair_users[p] {
                    continue;
                }
                for (n, nu) in negative_users.iter().enumerate() {
                    if *nu != pair_users[a] {
                        triplets.push((a, p, n));
                    }
                }
            }
        }
        Some(StyleSamples {
            pairs: PairLatents {
                sketch: lat.gather_rows(&pair_sk)?,
                photo: lat.gather_rows(&pair_ph)?,
            },
            pair_users,
            negatives: PairLatents {
                sketch: lat.slice(6 * k..6 * k + q, 0..c)?,
                photo: lat.slice(6 * k + q..6 * k + 2 * q, 0..c)?,
            },
            negative_users,
            triplets,
        })
    } else {
        None
    };
    Ok(RegSamples { roles, style })
}

/// Parameter groups updated by the outer loop of `cfg.variant`.
pub fn outer_groups(cfg: &TrainConfig, mode: Mode) -> Vec<Group> {
    let v = cfg.variant;
    let mut groups = vec![Group::Encoder, Group::Head];
    if v.learns_rates() {
        groups.push(Group::Alpha);
    }
    if v.learns_margin() {
        groups.push(Group::Margin);
    }
    if v.uses_regularizers() {
        let r = cfg.regularizers;
        if r.domain {
            groups.push(Group::Discriminator);
        }
        match mode {
            Mode::Category => {
                if r.discriminative {
                    groups.push(Group::Classifier);
                }
                if r.semantic {
                    groups.push(Group::Semantic);
                }
            }
            Mode::User => {
                if r.discriminative {
                    groups.push(Group::Style);
                }
            }
        }
    }
    groups
}

/// Gradient of one task's outer objective for every leaf (zeros outside `mask`).
pub fn task_gradient(
    params: &ModelParams<Tensor>,
    episode: &TaskEpisode,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    mask: &[bool],
    create_graph: bool,
) -> Result<(Vec<Tensor>, EpochStats)> {
    let g = Graph::new();
    let m = params.to_graph(&g);
    let vars: Vec<Var<'_>> = m.leaves().into_iter().map(|(_, v)| *v).collect();
    let out = task_objective(&m, episode, data, cfg, create_graph)?;
    let grads = masked_gradients(&g, out.total, &vars, mask)?;
    Ok((
        grads,
        EpochStats {
            loss: out.total.item(),
            triplet: out.triplet,
            reg: out.reg,
            mean_margin: out.margin,
            ..EpochStats::default()
        },
    ))
}

/// One outer update over a meta-batch. Non-finite tasks are dropped and the
/// average taken over the rest; if every task fails the step is an error.
pub fn outer_step(
    params: &mut ModelParams<Tensor>,
    opt: &mut Adam,
    episodes: &[TaskEpisode],
    data: &TrainData<'_>,
    cfg: &TrainConfig,
) -> Result<EpochStats> {
    let mask = leaf_mask(params, &outer_groups(cfg, data.mode()));
    let frozen: &ModelParams<Tensor> = params;
    let results: Vec<Result<(Vec<Tensor>, EpochStats)>> = episodes
        .par_iter()
        .map(|ep| task_gradient(frozen, ep, data, cfg, &mask, true))
        .collect();
    let mut sum: Option<Vec<Tensor>> = None;
    let mut stats = EpochStats::default();
    let mut kept = 0usize;
    for (i, r) in results.into_iter().enumerate() {
        let (grads, s) = match r {
            Ok(v) if v.0.iter().all(Tensor::is_finite) && v.1.loss.is_finite() => v,
            Ok(_) => {
                warn!(
                    "dropping task {i} ({}): non-finite outer gradient",
                    episodes[i].unit
                );
                stats.dropped_tasks += 1;
                continue;
            }
            Err(
                e @ (Error::Diverged(_)
                | Error::Autograd(tapegrad::AutogradError::NonFinite { .. })),
            ) => {
                warn!("dropping task {i} ({}): {e}", episodes[i].unit);
                stats.dropped_tasks += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        match sum.as_mut() {
            None => sum = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.axpy(1.0, g)?;
                }
            }
        }
        stats.loss += s.loss;
        stats.triplet += s.triplet;
        stats.reg += s.reg;
        stats.mean_margin += s.mean_margin;
        kept += 1;
    }
    let Some(mut avg) = sum else {
        return Err(Error::Diverged(format!(
            "all {} tasks of the meta-batch were dropped",
            episodes.len()
        )));
    };
    let inv = 1.0 / kept as f64;
    for t in avg.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    apply_adam(params, opt, &avg)?;
    stats.loss *= inv;
    stats.triplet *= inv;
    stats.reg *= inv;
    stats.mean_margin *= inv;
    Ok(stats)
}

/// State carried between meta-training epochs.
#[derive(Debug, Clone)]
pub struct MetaState {
    pub params: ModelParams<Tensor>,
    pub optimizer: Option<AdamState>,
    /// Number of completed epochs.
    pub epoch: usize,
}

/// Stage 2: runs outer steps from `state.epoch` up to `cfg.train.meta_epochs`.
///
/// Each epoch's randomness derives from `(seed, epoch)` only, so a run
/// resumed from a saved state matches an uninterrupted one bit for bit.
/// `on_epoch` sees the state after each epoch (for checkpointing).
pub fn meta_train(
    data: &TrainData<'_>,
    cfg: &ExperimentConfig,
    mut state: MetaState,
    mut on_epoch: impl FnMut(&MetaState, &EpochStats) -> Result<()>,
) -> Result<(MetaState, Vec<EpochStats>)> {
    let t = &cfg.train;
    if data.mode() == Mode::Category
        && t.variant.uses_regularizers()
        && t.regularizers.semantic
        && data.semantic.is_none()
    {
        return Err(Error::Config(
            "category-mode semantic regularizer requires a semantic table".into(),
        ));
    }
    let sampler = TaskSampler::new(data.dataset, data.split)?;
    let mut opt = adam_for(&state.params, t.outer_lr, state.optimizer.take());
    let mut history = Vec::new();
    for epoch in state.epoch..t.meta_epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[META_STREAM, epoch as u64]));
        let mut acc = EpochStats {
            epoch,
            ..EpochStats::default()
        };
        for _ in 0..t.steps_per_epoch {
            let episodes = (0..t.meta_batch)
                .map(|_| sampler.sample(t.k, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let s = outer_step(&mut state.params, &mut opt, &episodes, data, t)?;
            acc.loss += s.loss;
            acc.triplet += s.triplet;
            acc.reg += s.reg;
            acc.mean_margin += s.mean_margin;
            acc.dropped_tasks += s.dropped_tasks;
        }
        let n = t.steps_per_epoch.max(1) as f64;
        acc.loss /= n;
        acc.triplet /= n;
        acc.reg /= n;
        acc.mean_margin /= n;
        state.epoch = epoch + 1;
        state.optimizer = opt.state().cloned();
        debug!(
            "meta epoch {epoch}: loss {:.6} triplet {:.6} reg {:.6} margin {:.4}",
            acc.loss, acc.triplet, acc.reg, acc.mean_margin
        );
        on_epoch(&state, &acc)?;
        history.push(acc);
    }
    Ok((state, history))
}

/// Named gradient map, mostly for diagnostics and tests.
pub fn named(params: &ModelParams<Tensor>, grads: &[Tensor]) -> BTreeMap<String, Tensor> {
    params
        .leaves()
        .into_iter()
        .map(|(n, _)| n)
        .zip(grads.iter().cloned())
        .collect()
}
