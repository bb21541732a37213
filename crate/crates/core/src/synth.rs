//! Synthetic cross-modal data with known ground truth.
//!
//! Photos of category `c` are `proto_c + spread_c * U_c z`, where `U_c` is a
//! random orthonormal basis of a low-rank subspace. A sketch of photo `y` by
//! user `u` is `(Q + S_u) y + noise`, with `Q` a random orthogonal map (closer
//! to the identity for small domain gaps) and `S_u` a low-rank style term.
//! Photo features additionally carry clutter `b * N_c eta` along a
//! category-specific basis `N_c`; sketches are drawn from the clean photo.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tapegrad::Tensor;

use crate::config::{GeneratorSpec, Mode};
use crate::episodes::{derive_seed, Dataset, Domain, Item, SemanticTable, Split};
use crate::error::{Error, Result};

/// Generator internals needed by oracle tests.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorTruth {
    /// Shared cross-domain map `Q` (`[D, D]`, orthogonal).
    pub cross_map: Tensor,
    pub spreads: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub dataset: Dataset,
    pub semantic: SemanticTable,
    pub split: Split,
    pub truth: GeneratorTruth,
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

/// Orthonormalizes the columns of `cols` (each an `n`-vector) in place by
/// modified Gram-Schmidt.
fn orthonormalize(cols: &mut [Vec<f64>]) -> Result<()> {
    for i in 0..cols.len() {
        for j in 0..i {
            let (done, rest) = cols.split_at_mut(i);
            let dot: f64 = rest[0].iter().zip(&done[j]).map(|(a, b)| a * b).sum();
            for (a, b) in rest[0].iter_mut().zip(&done[j]) {
                *a -= dot * b;
            }
        }
        let norm = cols[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-10 {
            return Err(Error::Invalid(
                "degenerate basis during orthonormalization".into(),
            ));
        }
        cols[i].iter_mut().for_each(|v| *v /= norm);
    }
    Ok(())
}

fn mat_vec(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn validate(spec: &GeneratorSpec) -> Result<()> {
    let bad = |m: String| Err(Error::Config(m));
    let positive = [
        ("gen.categories", spec.categories),
        ("gen.photos_per_category", spec.photos_per_category),
        ("gen.sketches_per_photo", spec.sketches_per_photo),
        ("gen.users", spec.users),
        ("gen.feature_dim", spec.feature_dim),
        ("gen.semantic_dim", spec.semantic_dim),
        ("gen.subspace_rank", spec.subspace_rank),
        ("gen.finetune_photos", spec.finetune_photos),
    ];
    for (k, v) in positive {
        if v == 0 {
            return bad(format!("{k} must be positive"));
        }
    }
    if spec.subspace_rank > spec.feature_dim
        || spec.style_rank > spec.feature_dim
        || spec.clutter_rank > spec.feature_dim
    {
        return bad("gen.subspace_rank, gen.style_rank and gen.clutter_rank must not exceed gen.feature_dim".into());
    }
    if spec.finetune_photos >= spec.photos_per_category {
        return bad("gen.finetune_photos must leave photos for evaluation".into());
    }
    for (k, v) in [
        ("gen.noise", spec.noise),
        ("gen.style_strength", spec.style_strength),
        ("gen.domain_gap", spec.domain_gap),
        ("gen.spread_min", spec.spread_min),
        ("gen.semantic_noise", spec.semantic_noise),
        ("gen.clutter", spec.clutter),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return bad(format!("{k} must be a finite non-negative number"));
        }
    }
    if spec.prototype_scale <= 0.0 {
        return bad("gen.prototype_scale must be positive".into());
    }
    let (units, train) = match spec.mode {
        Mode::Category => (spec.categories, spec.train_categories),
        Mode::User => (spec.users, spec.train_users),
    };
    if train == 0 || train >= units {
        return bad(format!(
            "need at least one training and one testing unit, got {train} of {units}"
        ));
    }
    Ok(())
}

/// Indices of the testing units, spread evenly over `0..units` so that they
/// cover the whole range of per-unit spreads.
fn test_positions(units: usize, test: usize) -> Vec<usize> {
    (0..test)
        .map(|j| (((j as f64 + 0.5) * units as f64 / test as f64).floor() as usize).min(units - 1))
        .collect()
}

pub fn generate(spec: &GeneratorSpec, seed: u64) -> Result<Synthetic> {
    validate(spec)?;
    let d = spec.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5e17]));

    let mut q_cols = normal_matrix(&mut rng, d, d, spec.domain_gap / (d as f64).sqrt());
    for (i, col) in q_cols.iter_mut().enumerate() {
        col[i] += 1.0;
    }
    orthonormalize(&mut q_cols)?;
    // q_cols[j] is column j; store row-major Q
    let q: Vec<Vec<f64>> = (0..d)
        .map(|i| (0..d).map(|j| q_cols[j][i]).collect())
        .collect();

    let cat_names: Vec<String> = (0..spec.categories).map(|c| format!("cat{c:03}")).collect();
    let user_names: Vec<String> = (0..spec.users).map(|u| format!("user{u:03}")).collect();

    let spread_of = |i: usize, n: usize| {
        if n <= 1 {
            spec.spread_min
        } else {
            spec.spread_min + (spec.spread_max - spec.spread_min) * i as f64 / (n - 1) as f64
        }
    };
    let mut protos = Vec::with_capacity(spec.categories);
    let mut bases = Vec::with_capacity(spec.categories);
    let mut spreads = BTreeMap::new();
    for (c, name) in cat_names.iter().enumerate() {
        protos.push(
            (0..d)
                .map(|_| spec.prototype_scale * rng.sample::<f64, _>(StandardNormal))
                .collect::<Vec<f64>>(),
        );
        let mut basis = normal_matrix(&mut rng, spec.subspace_rank, d, 1.0);
        orthonormalize(&mut basis)?;
        bases.push(basis);
        spreads.insert(name.clone(), spread_of(c, spec.categories));
    }

    // per-user sketch map Q + S_u, with S_u = strength * A B^T / d
    let user_maps: Vec<Vec<Vec<f64>>> = (0..spec.users)
        .map(|_| {
            let a = normal_matrix(&mut rng, d, spec.style_rank, 1.0);
            let b = normal_matrix(&mut rng, d, spec.style_rank, 1.0);
            (0..d)
                .map(|i| {
                    (0..d)
                        .map(|j| {
                            let s: f64 = (0..spec.style_rank).map(|r| a[i][r] * b[j][r]).sum();
                            q[i][j] + spec.style_strength * s / d as f64
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let w = normal_matrix(&mut rng, spec.semantic_dim, d, 1.0 / (d as f64).sqrt());
    let mut semantic = BTreeMap::new();
    for (c, name) in cat_names.iter().enumerate() {
        let mut v = mat_vec(&w, &protos[c]);
        for x in v.iter_mut() {
            *x += spec.semantic_noise * rng.sample::<f64, _>(StandardNormal);
        }
        semantic.insert(name.clone(), v);
    }

    // separate stream so that clutter-free specs draw the same data as before
    let mut clutter_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xc1u64 << 8]));
    let mut clutter_bases = Vec::with_capacity(spec.categories);
    for _ in 0..spec.categories {
        let mut basis = normal_matrix(&mut clutter_rng, spec.clutter_rank, d, 1.0);
        if spec.clutter_rank > 0 {
            orthonormalize(&mut basis)?;
        }
        clutter_bases.push(basis);
    }
    let clutter = |rng: &mut ChaCha8Rng, c: usize, y: &[f64]| -> Vec<f64> {
        let eta: Vec<f64> = (0..spec.clutter_rank)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        (0..d)
            .map(|i| {
                y[i] + spec.clutter
                    * (0..spec.clutter_rank)
                        .map(|r| clutter_bases[c][r][i] * eta[r])
                        .sum::<f64>()
            })
            .collect()
    };

    let mut items = Vec::new();
    let mut next_id = 0u64;
    let mut next_pair = 0u64;
    let mut unit_pairs: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    let photo = |rng: &mut ChaCha8Rng, c: usize| -> Vec<f64> {
        let z: Vec<f64> = (0..spec.subspace_rank)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let s = spreads[&cat_names[c]];
        (0..d)
            .map(|i| {
                protos[c][i]
                    + s * (0..spec.subspace_rank)
                        .map(|r| bases[c][r][i] * z[r])
                        .sum::<f64>()
            })
            .collect()
    };
    let sketch = |rng: &mut ChaCha8Rng, y: &[f64], u: usize| -> Vec<f64> {
        mat_vec(&user_maps[u], y)
            .into_iter()
            .map(|v| v + spec.noise * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };

    match spec.mode {
        Mode::Category => {
            for (c, cat) in cat_names.iter().enumerate() {
                for _ in 0..spec.photos_per_category {
                    let y = photo(&mut rng, c);
                    let pair = next_pair;
                    next_pair += 1;
                    unit_pairs.entry(cat.clone()).or_default().push(pair);
                    for _ in 0..spec.sketches_per_photo {
                        let u = rng.gen_range(0..spec.users);
                        items.push(Item {
                            id: next_id,
                            domain: Domain::Sketch,
                            category: cat.clone(),
                            user: Some(user_names[u].clone()),
                            pair_id: pair,
                            features: sketch(&mut rng, &y, u),
                        });
                        next_id += 1;
                    }
                    items.push(Item {
                        id: next_id,
                        domain: Domain::Photo,
                        category: cat.clone(),
                        user: None,
                        pair_id: pair,
                        features: clutter(&mut clutter_rng, c, &y),
                    });
                    next_id += 1;
                }
            }
        }
        Mode::User => {
            for (u, user) in user_names.iter().enumerate() {
                for _ in 0..spec.photos_per_category {
                    let c = rng.gen_range(0..spec.categories);
                    let y = photo(&mut rng, c);
                    let pair = next_pair;
                    next_pair += 1;
                    unit_pairs.entry(user.clone()).or_default().push(pair);
                    for _ in 0..spec.sketches_per_photo {
                        items.push(Item {
                            id: next_id,
                            domain: Domain::Sketch,
                            category: cat_names[c].clone(),
                            user: Some(user.clone()),
                            pair_id: pair,
                            features: sketch(&mut rng, &y, u),
                        });
                        next_id += 1;
                    }
                    items.push(Item {
                        id: next_id,
                        domain: Domain::Photo,
                        category: cat_names[c].clone(),
                        user: Some(user.clone()),
                        pair_id: pair,
                        features: clutter(&mut clutter_rng, c, &y),
                    });
                    next_id += 1;
                }
            }
        }
    }

    let units: &[String] = match spec.mode {
        Mode::Category => &cat_names,
        Mode::User => &user_names,
    };
    let test_count = units.len()
        - match spec.mode {
            Mode::Category => spec.train_categories,
            Mode::User => spec.train_users,
        };
    let test_idx = test_positions(units.len(), test_count);
    let mut train_units = Vec::new();
    let mut test_units = Vec::new();
    for (i, u) in units.iter().enumerate() {
        if test_idx.contains(&i) {
            test_units.push(u.clone());
        } else {
            train_units.push(u.clone());
        }
    }
    let mut finetune = BTreeMap::new();
    let mut evaluation = BTreeMap::new();
    for u in &test_units {
        let mut pairs = unit_pairs[u].clone();
        pairs.shuffle(&mut rng);
        let mut ft = pairs[..spec.finetune_photos].to_vec();
        let mut ev = pairs[spec.finetune_photos..].to_vec();
        ft.sort_unstable();
        ev.sort_unstable();
        finetune.insert(u.clone(), ft);
        evaluation.insert(u.clone(), ev);
    }

    let q_flat: Vec<f64> = q.into_iter().flatten().collect();
    Ok(Synthetic {
        dataset: Dataset::new(items)?,
        semantic: SemanticTable::new(semantic)?,
        split: Split::new(spec.mode, train_units, test_units, finetune, evaluation)?,
        truth: GeneratorTruth {
            cross_map: Tensor::new([d, d], q_flat)?,
            spreads,
        },
    })
}
