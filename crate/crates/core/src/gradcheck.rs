//! Finite-difference verification suites: every primitive, the outer
//! (hypergradient) objective on a tiny model, and the gradient reversal layer.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use tapegrad::check::{finite_difference_check, FdConfig};
use tapegrad::nn;
use tapegrad::{AutogradError, Graph, Tensor, Var};

use crate::config::{GeneratorSpec, Mode, TrainConfig};
use crate::episodes::{derive_seed, TaskSampler};
use crate::error::{Error, Result};
use crate::losses::{binary_cross_entropy, domain_loss, domain_target};
use crate::metatrain::{task_objective, TrainData};
use crate::model::{Group, ModelDims, ModelParams};
use crate::synth::generate;

type Objective = Box<dyn for<'g> Fn(&'g Graph, &[Var<'g>]) -> tapegrad::Result<Var<'g>> + Sync>;

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub tolerance: f64,
    pub checks: Vec<CheckOutcome>,
    pub max_rel_error: f64,
    /// Wall-clock time; left out of serialized reports so they stay reproducible.
    #[serde(skip)]
    pub seconds: f64,
    pub passed: bool,
}

impl SuiteReport {
    fn finish(suite: &str, tolerance: f64, checks: Vec<CheckOutcome>, start: Instant) -> Self {
        let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
        Self {
            suite: suite.to_string(),
            tolerance,
            passed: !checks.is_empty() && checks.iter().all(|c| c.passed),
            max_rel_error,
            checks,
            seconds: start.elapsed().as_secs_f64(),
        }
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: [usize; 2], scale: f64) -> Tensor {
    let n = shape[0] * shape[1];
    Tensor::new(
        shape,
        (0..n)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )
    .expect("shape and length agree")
}

/// Entries of magnitude in `[lo, hi]` with random signs.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: [usize; 2], lo: f64, hi: f64) -> Tensor {
    let n = shape[0] * shape[1];
    Tensor::new(
        shape,
        (0..n)
            .map(|_| {
                let m = rng.gen_range(lo..hi);
                if rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect(),
    )
    .expect("shape and length agree")
}

fn positive(rng: &mut ChaCha8Rng, shape: [usize; 2]) -> Tensor {
    away_from_zero(rng, shape, 0.2, 2.0).map(f64::abs)
}

/// Contracts an arbitrary output with fixed weights so every output entry
/// contributes to the checked scalar.
fn contract<'g>(out: Var<'g>, seed: u64) -> tapegrad::Result<Var<'g>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let w = normal(&mut rng, out.shape(), 1.0);
    out.mul(out.graph().constant(w))?.sum()
}

struct Primitive {
    name: &'static str,
    inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    f: for<'g> fn(&[Var<'g>]) -> tapegrad::Result<Var<'g>>,
}

fn primitives() -> Vec<Primitive> {
    fn two(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        vec![normal(rng, [3, 4], 1.0), normal(rng, [3, 4], 1.0)]
    }
    fn one(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        vec![normal(rng, [3, 4], 1.0)]
    }
    fn kinked(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        vec![away_from_zero(rng, [3, 4], 0.05, 2.0)]
    }
    fn pos(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        vec![positive(rng, [3, 4])]
    }
    fn rows(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        vec![normal(rng, [4, 5], 1.0), normal(rng, [4, 5], 1.0)]
    }
    vec![
        Primitive {
            name: "add",
            inputs: two,
            f: |v| v[0].add(v[1]),
        },
        Primitive {
            name: "add_broadcast_row",
            inputs: |r| vec![normal(r, [3, 4], 1.0), normal(r, [1, 4], 1.0)],
            f: |v| v[0].add(v[1]),
        },
        Primitive {
            name: "mul_broadcast_col",
            inputs: |r| vec![normal(r, [3, 4], 1.0), normal(r, [3, 1], 1.0)],
            f: |v| v[0].mul(v[1]),
        },
        Primitive {
            name: "sub",
            inputs: two,
            f: |v| v[0].sub(v[1]),
        },
        Primitive {
            name: "mul",
            inputs: two,
            f: |v| v[0].mul(v[1]),
        },
        Primitive {
            name: "div",
            inputs: |r| vec![normal(r, [3, 4], 1.0), away_from_zero(r, [3, 4], 0.5, 2.0)],
            f: |v| v[0].div(v[1]),
        },
        Primitive {
            name: "affine",
            inputs: one,
            f: |v| v[0].affine(-1.7, 0.4),
        },
        Primitive {
            name: "scale",
            inputs: one,
            f: |v| v[0].scale(2.5),
        },
        Primitive {
            name: "add_scalar",
            inputs: one,
            f: |v| v[0].add_scalar(0.3),
        },
        Primitive {
            name: "neg",
            inputs: one,
            f: |v| v[0].neg(),
        },
        Primitive {
            name: "matmul",
            inputs: |r| vec![normal(r, [3, 4], 1.0), normal(r, [4, 2], 1.0)],
            f: |v| v[0].matmul(v[1]),
        },
        Primitive {
            name: "transpose",
            inputs: one,
            f: |v| v[0].t(),
        },
        Primitive {
            name: "relu",
            inputs: kinked,
            f: |v| v[0].relu(),
        },
        Primitive {
            name: "sigmoid",
            inputs: one,
            f: |v| v[0].sigmoid(),
        },
        Primitive {
            name: "tanh",
            inputs: one,
            f: |v| v[0].tanh(),
        },
        Primitive {
            name: "exp",
            inputs: one,
            f: |v| v[0].exp(),
        },
        Primitive {
            name: "log",
            inputs: pos,
            f: |v| v[0].log(),
        },
        Primitive {
            name: "sqrt",
            inputs: pos,
            f: |v| v[0].sqrt(),
        },
        Primitive {
            name: "safe_recip",
            inputs: |r| vec![away_from_zero(r, [3, 4], 0.5, 2.0)],
            f: |v| v[0].safe_recip(),
        },
        Primitive {
            name: "softplus",
            inputs: one,
            f: |v| v[0].softplus(0.5),
        },
        Primitive {
            name: "clamp",
            inputs: kinked,
            f: |v| v[0].clamp(-1.0, 1.0),
        },
        Primitive {
            name: "sum_rows",
            inputs: one,
            f: |v| v[0].sum_rows(),
        },
        Primitive {
            name: "sum_cols",
            inputs: one,
            f: |v| v[0].sum_cols(),
        },
        Primitive {
            name: "sum",
            inputs: one,
            f: |v| v[0].sum(),
        },
        Primitive {
            name: "mean",
            inputs: one,
            f: |v| v[0].mean(),
        },
        Primitive {
            name: "broadcast_to",
            inputs: |r| vec![normal(r, [1, 4], 1.0)],
            f: |v| v[0].broadcast_to([3, 4]),
        },
        Primitive {
            name: "max_rows",
            inputs: one,
            f: |v| v[0].max_rows(),
        },
        Primitive {
            name: "concat_cols",
            inputs: two,
            f: |v| Var::concat_cols(&[v[0], v[1]]),
        },
        Primitive {
            name: "concat_rows",
            inputs: two,
            f: |v| Var::concat_rows(&[v[0], v[1]]),
        },
        Primitive {
            name: "slice",
            inputs: one,
            f: |v| v[0].slice(1..3, 0..3),
        },
        Primitive {
            name: "pad",
            inputs: one,
            f: |v| v[0].pad([5, 6], 1, 2),
        },
        Primitive {
            name: "gather_rows",
            inputs: one,
            f: |v| v[0].gather_rows(&[2, 0, 2, 1]),
        },
        Primitive {
            name: "scatter_rows",
            inputs: one,
            f: |v| v[0].scatter_rows(&[3, 0, 3], 5),
        },
        Primitive {
            name: "linear",
            inputs: |r| {
                vec![
                    normal(r, [3, 4], 1.0),
                    normal(r, [4, 2], 0.5),
                    normal(r, [1, 2], 0.5),
                ]
            },
            f: |v| nn::linear(v[0], v[1], v[2]),
        },
        Primitive {
            name: "row_norms",
            inputs: rows,
            f: |v| nn::row_norms(v[0]),
        },
        Primitive {
            name: "l2_normalize",
            inputs: rows,
            f: |v| nn::l2_normalize(v[0]),
        },
        Primitive {
            name: "euclidean_distance",
            inputs: rows,
            f: |v| nn::euclidean_distance(v[0], v[1]),
        },
        Primitive {
            name: "cosine_similarity",
            inputs: rows,
            f: |v| nn::cosine_similarity(v[0], v[1]),
        },
        Primitive {
            name: "log_softmax",
            inputs: one,
            f: |v| nn::log_softmax(v[0]),
        },
        Primitive {
            name: "softmax",
            inputs: one,
            f: |v| nn::softmax(v[0]),
        },
        Primitive {
            name: "gru_step",
            inputs: |r| {
                vec![
                    normal(r, [2, 3], 1.0),
                    normal(r, [2, 4], 0.5),
                    normal(r, [3, 12], 0.5),
                    normal(r, [4, 12], 0.5),
                    normal(r, [1, 12], 0.5),
                    normal(r, [1, 12], 0.5),
                ]
            },
            f: |v| nn::gru_cell_step(v[0], v[1], v[2], v[3], v[4], v[5]),
        },
        Primitive {
            name: "second_order",
            inputs: |r| vec![normal(r, [2, 3], 1.0)],
            f: |v| {
                // gradient of sum(tanh(x)^3), itself differentiated
                let g = v[0].graph();
                let inner = v[0].tanh()?.mul(v[0].tanh()?)?.mul(v[0].tanh()?)?.sum()?;
                let grads = g.gradient(inner, &[v[0]], true)?;
                Ok(grads.grads[0])
            },
        },
    ]
}

const MAX_DRAWS: usize = 20;

/// Runs `f` on fresh draws from `inputs` until the point is far enough from
/// every kink for the comparison to be meaningful.
fn check_drawn(
    name: &str,
    seed: u64,
    inputs: &dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    f: &Objective,
    cfg: &FdConfig,
) -> Result<CheckOutcome> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(seed, &[crate::episodes::stable_hash(name)]));
    for _ in 0..MAX_DRAWS {
        let params = inputs(&mut rng);
        match finite_difference_check(|g, v| f(g, v), &params, cfg) {
            Ok(report) => {
                return Ok(CheckOutcome {
                    name: name.to_string(),
                    seed,
                    max_rel_error: report.max_rel_error,
                    coordinates: report.coordinates,
                    passed: report.passed,
                })
            }
            Err(AutogradError::OracleInvalid(_)) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(Error::Invalid(format!(
        "{name}: no evaluation point away from kinks after {MAX_DRAWS} draws"
    )))
}

/// Every differentiable primitive over `seeds` random draws, at relative
/// tolerance `tolerance`.
pub fn primitive_suite(seeds: u64, tolerance: f64) -> Result<SuiteReport> {
    let start = Instant::now();
    let cfg = FdConfig {
        tolerance,
        ..FdConfig::default()
    };
    let mut checks = Vec::new();
    for p in primitives() {
        let f = p.f;
        let objective: Objective = Box::new(move |_, v| {
            let out = f(v)?;
            let seed = v.len() as u64;
            contract(out, seed)
        });
        for seed in 0..seeds {
            checks.push(check_drawn(p.name, seed, &p.inputs, &objective, &cfg)?);
        }
    }
    Ok(SuiteReport::finish("primitives", tolerance, checks, start))
}

/// Data, model shapes and training settings for the tiny hypergradient model.
fn tiny_setup() -> Result<(crate::synth::Synthetic, TrainConfig)> {
    let dims = ModelDims::tiny();
    let spec = GeneratorSpec {
        mode: Mode::Category,
        categories: 4,
        train_categories: 2,
        photos_per_category: 8,
        feature_dim: dims.input,
        semantic_dim: dims.semantic,
        subspace_rank: 2,
        clutter_rank: 1,
        clutter: 0.5,
        finetune_photos: 3,
        ..GeneratorSpec::default()
    };
    let train = TrainConfig {
        k: 2,
        ..TrainConfig::default()
    };
    Ok((generate(&spec, 17)?, train))
}

/// Parameter count of the tiny hypergradient model.
pub fn tiny_parameter_count() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    ModelParams::init(&ModelDims::tiny(), &mut rng, 0.3, 0.3).parameter_count()
}

/// Outer objective (validation loss after one recorded inner step plus the
/// weighted regularizers) against central differences of every parameter of
/// a tiny model, including the inner rates and the margin network.
pub fn hypergradient_suite(seeds: u64, tolerance: f64) -> Result<SuiteReport> {
    let (_, train) = tiny_setup()?;
    hypergradient_suite_with(&train, seeds, tolerance)
}

/// As [`hypergradient_suite`] with explicit training settings (`k` must stay
/// small enough for the tiny data set).
pub fn hypergradient_suite_with(
    train: &TrainConfig,
    seeds: u64,
    tolerance: f64,
) -> Result<SuiteReport> {
    let start = Instant::now();
    let (syn, _) = tiny_setup()?;
    let data = TrainData {
        dataset: &syn.dataset,
        split: &syn.split,
        semantic: Some(&syn.semantic),
    };
    let sampler = TaskSampler::new(&syn.dataset, &syn.split)?;
    let cfg = FdConfig {
        tolerance,
        ..FdConfig::default()
    };
    let unregularized = TrainConfig {
        lambda: 0.0,
        ..train.clone()
    };
    let dims = ModelDims::tiny();
    let mut checks = Vec::new();
    for seed in 0..seeds {
        // encoder leaves only at lambda = 0 (reversal layer)
        for (name, t, with_encoder) in [
            ("outer_objective", train, false),
            ("outer_objective_lambda0", &unregularized, true),
        ] {
            let mut outcome = None;
            for draw in 0..MAX_DRAWS as u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x4947, draw]));
                let params = ModelParams::init(&dims, &mut rng, t.alpha_init, t.fixed_margin);
                let episode = sampler.sample(t.k, &mut rng)?;
                let named = params.leaves();
                let checked: Vec<usize> = (0..named.len())
                    .filter(|&i| with_encoder || Group::of(&named[i].0) != Some(Group::Encoder))
                    .collect();
                let leaves: Vec<Tensor> = checked.iter().map(|&i| named[i].1.clone()).collect();
                let result = finite_difference_check(
                    |g, v| {
                        let mut all: Vec<Var<'_>> = named
                            .iter()
                            .map(|(_, t)| g.constant((*t).clone()))
                            .collect();
                        for (pos, &i) in checked.iter().enumerate() {
                            all[i] = v[pos];
                        }
                        let m = params.from_leaves(all).map_err(to_autograd)?;
                        let out =
                            task_objective(&m, &episode, &data, t, true).map_err(to_autograd)?;
                        Ok(out.total)
                    },
                    &leaves,
                    &cfg,
                );
                match result {
                    Ok(report) => {
                        outcome = Some(CheckOutcome {
                            name: name.to_string(),
                            seed,
                            max_rel_error: report.max_rel_error,
                            coordinates: report.coordinates,
                            passed: report.passed,
                        });
                        break;
                    }
                    Err(AutogradError::OracleInvalid(_)) => continue,
                    Err(e) => return Err(e.into()),
                }
            }
            checks.push(outcome.ok_or_else(|| {
                Error::Invalid(format!(
                    "{name} seed {seed}: no kink-free point after {MAX_DRAWS} draws"
                ))
            })?);
        }
    }
    Ok(SuiteReport::finish(
        "hypergradient",
        tolerance,
        checks,
        start,
    ))
}

fn to_autograd(e: Error) -> AutogradError {
    match e {
        Error::Autograd(a) => a,
        other => AutogradError::InvalidArgument {
            op: "objective",
            reason: other.to_string(),
        },
    }
}

/// Encoder-side gradient of the domain loss through the reversal layer,
/// compared against `-grl_lambda` times the gradient without reversal.
pub fn grl_suite(seeds: u64, grl_lambda: f64, tolerance: f64) -> Result<SuiteReport> {
    let start = Instant::now();
    let dims = ModelDims::tiny();
    let mut checks = Vec::new();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x6721]));
        let params = ModelParams::init(&dims, &mut rng, 0.3, 0.3);
        let latent = normal(&mut rng, [6, dims.latent], 1.0);
        let is_photo = [true, false, true, true, false, false];
        let grad_of = |reverse: bool| -> Result<Tensor> {
            let g = Graph::new();
            let m = params.to_graph(&g);
            let z = g.param(&latent);
            let loss = if reverse {
                domain_loss(&m.discriminator, z, &is_photo, grl_lambda)?
            } else {
                let h = m.discriminator.l1.forward(z)?.relu()?;
                let probs = m.discriminator.l2.forward(h)?.sigmoid()?;
                let targets: Vec<f64> = is_photo.iter().map(|&p| domain_target(p)).collect();
                binary_cross_entropy(probs, &targets)?
            };
            Ok((*g.gradient(loss, &[z], false)?.grads[0].value()).clone())
        };
        let reversed = grad_of(true)?;
        let plain = grad_of(false)?;
        let mut max_rel: f64 = 0.0;
        for (r, p) in reversed.data().iter().zip(plain.data()) {
            let expected = -grl_lambda * p;
            let err = (r - expected).abs() / expected.abs().max(1e-12);
            max_rel = max_rel.max(err);
        }
        checks.push(CheckOutcome {
            name: "grl".into(),
            seed,
            max_rel_error: max_rel,
            coordinates: reversed.len(),
            passed: max_rel < tolerance,
        });
    }
    Ok(SuiteReport::finish("grl", tolerance, checks, start))
}
