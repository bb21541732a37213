use std::path::Path;

use metasbir::config::{ExperimentConfig, Mode, RegSwitches};
use metasbir::eval::{acc_at_q, retrieve};
use metasbir::losses::{reg_loss, RegSamples, RoleSamples};
use metasbir::model::{embed, ModelDims, ModelParams};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tapegrad::{Graph, Tensor};

fn random_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-scale..scale)).collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn embeddings_are_unit_norm(seed in any::<u64>(), rows in 1usize..6, scale in 1e-3f64..50.0) {
        let dims = ModelDims::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = ModelParams::init(&dims, &mut rng, 0.3, 0.3);
        let x = Tensor::from_rows(&random_rows(&mut rng, rows, dims.input, scale)).unwrap();
        let g = Graph::new();
        let m = p.to_graph(&g);
        let e = embed(&m.encoder, &m.head, g.constant(x)).unwrap();
        let e = e.value();
        for r in 0..rows {
            let n = e.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-9, "norm {n}");
        }
    }

    #[test]
    fn category_regularizer_ignores_sample_order(
        seed in any::<u64>(),
        order in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let dims = ModelDims::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = ModelParams::init(&dims, &mut rng, 0.3, 0.3);
        let n = order.len();
        let roles: Vec<(Vec<Vec<f64>>, Vec<bool>, Vec<usize>, Vec<Vec<f64>>)> = (0..3)
            .map(|_| {
                (
                    random_rows(&mut rng, n, dims.latent, 1.0),
                    (0..n).map(|_| rng.gen_bool(0.5)).collect(),
                    (0..n).map(|_| rng.gen_range(0..dims.classes)).collect(),
                    random_rows(&mut rng, n, dims.semantic, 1.0),
                )
            })
            .collect();
        let total = |perm: &[usize]| {
            let g = Graph::new();
            let m = p.to_graph(&g);
            let pick = |rows: &[Vec<f64>]| Tensor::from_rows(&perm.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>()).unwrap();
            let make = |r: &(Vec<Vec<f64>>, Vec<bool>, Vec<usize>, Vec<Vec<f64>>)| RoleSamples {
                latent: g.constant(pick(&r.0)),
                is_photo: perm.iter().map(|&i| r.1[i]).collect(),
                labels: perm.iter().map(|&i| r.2[i]).collect(),
                semantic: Some(pick(&r.3)),
            };
            let samples = RegSamples {
                roles: [make(&roles[0]), make(&roles[1]), make(&roles[2])],
                style: None,
            };
            reg_loss(Mode::Category, &m, &samples, RegSwitches::default(), 1.0, 0.2).unwrap().total.item()
        };
        let identity: Vec<usize> = (0..n).collect();
        let a = total(&identity);
        let b = total(&order);
        prop_assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()), "{a} vs {b}");
    }

    #[test]
    fn accuracy_is_a_monotone_percentage(ranks in proptest::collection::vec(1usize..30, 1..40), q in 1usize..30) {
        let a = acc_at_q(&ranks, q);
        prop_assert!((0.0..=100.0).contains(&a));
        prop_assert!(acc_at_q(&ranks, q + 1) >= a);
        prop_assert_eq!(acc_at_q(&ranks, 30), 100.0);
    }

    #[test]
    fn retrieval_ranks_every_gallery_item(seed in any::<u64>(), size in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = random_rows(&mut rng, size, 3, 1.0);
        let gallery = Tensor::from_rows(&rows).unwrap();
        let ids: Vec<u64> = (0..size as u64).map(|i| 100 + 7 * i).collect();
        let query = random_rows(&mut rng, 1, 3, 1.0).remove(0);
        let ranking = retrieve(&query, &gallery, &ids).unwrap();
        let mut sorted = ranking.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, ids.clone());
        let dist = |r: &[f64]| r.iter().zip(&query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let best = rows.iter().map(|r| dist(r)).fold(f64::INFINITY, f64::min);
        let first = ids.iter().position(|&i| i == ranking[0]).unwrap();
        prop_assert!(dist(&rows[first]) <= best);
    }

    #[test]
    fn config_render_parses_back(seed in any::<u64>(), k in 2usize..20, lambda in 0.0f64..5.0, tau in 1e-4f64..1.0) {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        cfg.train.k = k;
        cfg.train.lambda = lambda;
        cfg.train.tau = tau;
        let back = ExperimentConfig::parse(&cfg.render(), Path::new("generated")).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back, cfg);
    }
}
