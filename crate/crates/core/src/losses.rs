//! Training objectives.

use tapegrad::nn::{cosine_similarity, euclidean_distance, log_softmax};
use tapegrad::{Tensor, Var};

use crate::config::{Mode, RegSwitches};
use crate::error::{Error, Result};
use crate::model::{decode_semantic, discriminate, style_embed, Linear, Mlp2, Mlp3, ModelParams};

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` before the log.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Hinge {
    /// `max(0, z)`.
    Hard,
    /// `tau * ln(1 + exp(z / tau))`.
    Smooth { tau: f64 },
}

/// Row-aligned embeddings of anchors (sketches), positives and negatives (photos).
#[derive(Debug, Clone, Copy)]
pub struct TripletBatch<'g> {
    pub anchors: Var<'g>,
    pub positives: Var<'g>,
    pub negatives: Var<'g>,
    /// `[1, 1]`, non-negative.
    pub margin: Var<'g>,
    pub hinge: Hinge,
}

/// Per-triplet slack `mu + d(a, p) - d(a, n)`: `[n, 1]`.
pub fn triplet_slack<'g>(batch: &TripletBatch<'g>) -> Result<Var<'g>> {
    let n = batch.anchors.shape()[0];
    if n == 0 {
        return Err(Error::Invalid("triplet loss over an empty batch".into()));
    }
    if batch.positives.shape()[0] != n || batch.negatives.shape()[0] != n {
        return Err(Error::Dimension {
            what: "triplet batch",
            expected: n,
            got: batch.positives.shape()[0].min(batch.negatives.shape()[0]),
        });
    }
    if batch.margin.shape() != [1, 1] || batch.margin.item() < 0.0 {
        return Err(Error::Invalid(format!(
            "triplet margin must be a non-negative scalar, got {:?}",
            batch.margin.value().data()
        )));
    }
    let pos = euclidean_distance(batch.anchors, batch.positives)?;
    let neg = euclidean_distance(batch.anchors, batch.negatives)?;
    Ok(pos.sub(neg)?.add(batch.margin)?)
}

/// Mean hinge of the triplet slacks.
pub fn triplet_loss<'g>(batch: &TripletBatch<'g>) -> Result<Var<'g>> {
    let slack = triplet_slack(batch)?;
    let per = match batch.hinge {
        Hinge::Hard => slack.relu()?,
        Hinge::Smooth { tau } => {
            if tau <= 0.0 {
                return Err(Error::Invalid(format!(
                    "hinge temperature must be positive, got {tau}"
                )));
            }
            slack.softplus(tau)?
        }
    };
    Ok(per.mean()?)
}

/// Mean binary cross-entropy of `probs: [n, 1]` against targets in `{0, 1}`.
pub fn binary_cross_entropy<'g>(probs: Var<'g>, targets: &[f64]) -> Result<Var<'g>> {
    let n = probs.shape()[0];
    if targets.len() != n || probs.shape()[1] != 1 {
        return Err(Error::Dimension {
            what: "domain targets",
            expected: n,
            got: targets.len(),
        });
    }
    if n == 0 {
        return Err(Error::Invalid("domain loss over an empty batch".into()));
    }
    let g = probs.graph();
    let p = probs.clamp(BCE_EPS, 1.0 - BCE_EPS)?;
    let t = g.constant(Tensor::new([n, 1], targets.to_vec())?);
    let one_minus_t = g.constant(Tensor::new(
        [n, 1],
        targets.iter().map(|v| 1.0 - v).collect(),
    )?);
    let ll = t
        .mul(p.log()?)?
        .add(one_minus_t.mul(p.affine(-1.0, 1.0)?.log()?)?)?;
    Ok(ll.mean()?.neg()?)
}

/// Domain target: 0 for sketches, 1 for photos.
pub fn domain_target(is_photo: bool) -> f64 {
    if is_photo {
        1.0
    } else {
        0.0
    }
}

/// BCE of the discriminator on `latent`, with the encoder-side gradient
/// reversed and scaled by `grl_lambda`.
pub fn domain_loss<'g>(
    disc: &Mlp2<Var<'g>>,
    latent: Var<'g>,
    is_photo: &[bool],
    grl_lambda: f64,
) -> Result<Var<'g>> {
    let probs = discriminate(disc, latent, grl_lambda)?;
    let targets: Vec<f64> = is_photo.iter().map(|&p| domain_target(p)).collect();
    binary_cross_entropy(probs, &targets)
}

/// Mean softmax cross-entropy of `logits: [n, classes]`.
pub fn cross_entropy<'g>(logits: Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
    let [n, classes] = logits.shape();
    if labels.len() != n {
        return Err(Error::Dimension {
            what: "class labels",
            expected: n,
            got: labels.len(),
        });
    }
    if n == 0 {
        return Err(Error::Invalid(
            "classification loss over an empty batch".into(),
        ));
    }
    let mut onehot = Tensor::zeros([n, classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        onehot.set(i, l, 1.0);
    }
    let picked = log_softmax(logits)?.mul(logits.graph().constant(onehot))?;
    Ok(picked.sum()?.scale(-1.0 / n as f64)?)
}

pub fn classification_loss<'g>(
    cls: &Linear<Var<'g>>,
    latent: Var<'g>,
    labels: &[usize],
) -> Result<Var<'g>> {
    cross_entropy(cls.forward(latent)?, labels)
}

/// Mean hard-hinge triplet loss on unnormalized style embeddings.
pub fn style_triplet<'g>(
    anchor: Var<'g>,
    positive: Var<'g>,
    negative: Var<'g>,
    margin: f64,
) -> Result<Var<'g>> {
    let g = anchor.graph();
    triplet_loss(&TripletBatch {
        anchors: anchor,
        positives: positive,
        negatives: negative,
        margin: g.scalar(margin),
        hinge: Hinge::Hard,
    })
}

/// Sketch and photo latents of row-aligned pairs.
#[derive(Debug, Clone, Copy)]
pub struct PairLatents<'g> {
    pub sketch: Var<'g>,
    pub photo: Var<'g>,
}

/// User-style triplet loss on `T([F(sketch), F(photo)])`.
///
/// `anchor` and `positive` pairs must come from the same user and `negative`
/// pairs from a different one; user labels are given row by row.
pub fn user_triplet_loss<'g>(
    style: &Mlp2<Var<'g>>,
    anchor: PairLatents<'g>,
    positive: PairLatents<'g>,
    negative: PairLatents<'g>,
    users: (&[&str], &[&str], &[&str]),
    margin: f64,
) -> Result<Var<'g>> {
    let (ua, up, un) = users;
    if ua.len() != up.len() || ua.len() != un.len() || ua.len() != anchor.sketch.shape()[0] {
        return Err(Error::Dimension {
            what: "user triplet labels",
            expected: anchor.sketch.shape()[0],
            got: ua.len(),
        });
    }
    for i in 0..ua.len() {
        if ua[i] != up[i] {
            return Err(Error::Sampling(format!(
                "user triplet {i}: anchor user {} differs from positive user {}",
                ua[i], up[i]
            )));
        }
        if ua[i] == un[i] {
            return Err(Error::Sampling(format!(
                "user triplet {i}: negative drawn from the anchor's own user {}",
                ua[i]
            )));
        }
    }
    let a = style_embed(style, anchor.sketch, anchor.photo)?;
    let p = style_embed(style, positive.sketch, positive.photo)?;
    let n = style_embed(style, negative.sketch, negative.photo)?;
    style_triplet(a, p, n, margin)
}

/// Mean of `(1 - cos(pred, target)) / 2` over rows.
pub fn cosine_loss<'g>(pred: Var<'g>, target: &Tensor) -> Result<Var<'g>> {
    if pred.shape() != target.shape() {
        return Err(Error::Dimension {
            what: "semantic target",
            expected: pred.shape()[1],
            got: target.cols(),
        });
    }
    for r in 0..target.rows() {
        if target.row_slice(r).iter().all(|&v| v == 0.0) {
            return Err(Error::Invalid(format!(
                "semantic target row {r} is the zero vector"
            )));
        }
    }
    let cos = cosine_similarity(pred, pred.graph().constant(target.clone()))?;
    Ok(cos.affine(-0.5, 0.5)?.mean()?)
}

pub fn semantic_loss<'g>(
    dec: &Mlp3<Var<'g>>,
    latent: Var<'g>,
    targets: &Tensor,
) -> Result<Var<'g>> {
    cosine_loss(decode_semantic(dec, latent)?, targets)
}

/// Inputs of the regularizers for one triplet role (anchor, positive or negative).
#[derive(Debug, Clone)]
pub struct RoleSamples<'g> {
    pub latent: Var<'g>,
    pub is_photo: Vec<bool>,
    /// Training-category index per row (category mode).
    pub labels: Vec<usize>,
    /// Semantic vector per row (category mode, when a table is available).
    pub semantic: Option<Tensor>,
}

/// Style-triplet inputs: all triplets formed from `pairs` (same user) and
/// `negatives` (other users), as index triples into those two sets.
#[derive(Debug, Clone)]
pub struct StyleSamples<'g> {
    pub pairs: PairLatents<'g>,
    pub pair_users: Vec<String>,
    pub negatives: PairLatents<'g>,
    pub negative_users: Vec<String>,
    pub triplets: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct RegSamples<'g> {
    /// Anchor, positive and negative roles, in that order.
    pub roles: [RoleSamples<'g>; 3],
    pub style: Option<StyleSamples<'g>>,
}

/// Component values of a regularizer evaluation, kept for logging.
#[derive(Debug, Clone, Copy)]
pub struct RegLoss<'g> {
    pub total: Var<'g>,
    pub domain: f64,
    pub classification: f64,
    pub semantic: f64,
    pub style: f64,
}

/// Category mode: `sum_{a,p,n} (L_D + L_C + L_S) / 3`; a disabled term is left out.
pub fn combine_category<'g>(per_role: &[[Option<Var<'g>>; 3]; 3]) -> Result<Option<Var<'g>>> {
    let mut total: Option<Var<'g>> = None;
    for terms in per_role {
        for t in terms.iter().flatten() {
            let v = t.scale(1.0 / 3.0)?;
            total = Some(match total {
                Some(acc) => acc.add(v)?,
                None => v,
            });
        }
    }
    Ok(total)
}

/// User mode: `sum_{a,p,n} L_D / 3 + L_ud`.
pub fn combine_user<'g>(
    domain: &[Option<Var<'g>>; 3],
    style: Option<Var<'g>>,
) -> Result<Option<Var<'g>>> {
    let mut total: Option<Var<'g>> = None;
    for v in domain.iter().flatten() {
        let v = v.scale(1.0 / 3.0)?;
        total = Some(match total {
            Some(acc) => acc.add(v)?,
            None => v,
        });
    }
    if let Some(s) = style {
        total = Some(match total {
            Some(acc) => acc.add(s)?,
            None => s,
        });
    }
    Ok(total)
}

fn style_term<'g>(
    model: &ModelParams<Var<'g>>,
    s: &StyleSamples<'g>,
    margin: f64,
) -> Result<Option<Var<'g>>> {
    if s.triplets.is_empty() {
        return Ok(None);
    }
    for &(a, p, n) in &s.triplets {
        if s.pair_users[a] != s.pair_users[p] {
            return Err(Error::Sampling(format!(
                "style triplet pairs {a} and {p} belong to different users"
            )));
        }
        if s.pair_users[a] == s.negative_users[n] {
            return Err(Error::Sampling(format!(
                "style negative {n} comes from the anchor's own user {}",
                s.pair_users[a]
            )));
        }
    }
    let pos = style_embed(&model.style, s.pairs.sketch, s.pairs.photo)?;
    let neg = style_embed(&model.style, s.negatives.sketch, s.negatives.photo)?;
    let ai: Vec<usize> = s.triplets.iter().map(|t| t.0).collect();
    let pi: Vec<usize> = s.triplets.iter().map(|t| t.1).collect();
    let ni: Vec<usize> = s.triplets.iter().map(|t| t.2).collect();
    Ok(Some(style_triplet(
        pos.gather_rows(&ai)?,
        pos.gather_rows(&pi)?,
        neg.gather_rows(&ni)?,
        margin,
    )?))
}

/// The outer-loop regularizer over an episode's support and validation samples.
pub fn reg_loss<'g>(
    mode: Mode,
    model: &ModelParams<Var<'g>>,
    samples: &RegSamples<'g>,
    switches: RegSwitches,
    grl_lambda: f64,
    style_margin: f64,
) -> Result<RegLoss<'g>> {
    let g = samples.roles[0].latent.graph();
    let mut out = RegLoss {
        total: g.scalar(0.0),
        domain: 0.0,
        classification: 0.0,
        semantic: 0.0,
        style: 0.0,
    };
    let mut domain: [Option<Var<'g>>; 3] = [None, None, None];
    if switches.domain {
        for (r, role) in samples.roles.iter().enumerate() {
            let l = domain_loss(
                &model.discriminator,
                role.latent,
                &role.is_photo,
                grl_lambda,
            )?;
            out.domain += l.item();
            domain[r] = Some(l);
        }
    }
    let total = match mode {
        Mode::Category => {
            let mut per_role: [[Option<Var<'g>>; 3]; 3] = Default::default();
            for (r, role) in samples.roles.iter().enumerate() {
                per_role[r][0] = domain[r];
                if switches.discriminative {
                    let l = classification_loss(&model.classifier, role.latent, &role.labels)?;
                    out.classification += l.item();
                    per_role[r][1] = Some(l);
                }
                if switches.semantic {
                    let table = role.semantic.as_ref().ok_or_else(|| {
                        Error::Config(
                            "category-mode semantic regularizer requires a semantic table".into(),
                        )
                    })?;
                    let l = semantic_loss(&model.semantic, role.latent, table)?;
                    out.semantic += l.item();
                    per_role[r][2] = Some(l);
                }
            }
            combine_category(&per_role)?
        }
        Mode::User => {
            let style = match (&samples.style, switches.discriminative) {
                (Some(s), true) => style_term(model, s, style_margin)?,
                _ => None,
            };
            if let Some(s) = style {
                out.style = s.item();
            }
            combine_user(&domain, style)?
        }
    };
    if let Some(t) = total {
        out.total = t;
    }
    Ok(out)
}
