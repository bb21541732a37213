mod common;

use std::collections::BTreeSet;
use std::fs;

use common::{data, max_abs_diff, small_config, synth};
use metasbir::config::{ExperimentConfig, Method, Variant};
use metasbir::episodes::evaluation_set;
use metasbir::eval::{
    ablation_suite, adapt, emit_report, eval_adaptation_set, evaluate_method, margin_spread,
    read_report, train_models, unit_ranks, EvalOptions, EvalReport, ModelSet, ReportFormat,
};
use metasbir::metatrain::{init_params, TrainData};
use metasbir::Error;
use tapegrad::Tensor;

fn trained(cfg: &ExperimentConfig, d: &TrainData<'_>) -> ModelSet {
    train_models(
        d,
        cfg,
        &[Variant::Ours, Variant::FixedMargin, Variant::MamlFull],
    )
    .unwrap()
}

#[test]
fn zero_rates_reduce_ours_to_no_adapt() {
    let cfg = small_config();
    let syn = synth(&cfg);
    let d = data(&syn);
    let base = init_params(&d, &cfg);
    let mut frozen = base.clone();
    frozen.alpha = frozen.alpha.map(|t| Tensor::zeros(t.shape()));
    let mut set = ModelSet {
        baseline: Some(base),
        ..ModelSet::default()
    };
    set.insert_meta(Variant::Ours, frozen);
    for k in [1, 2, 3] {
        for seed in 0..cfg.eval.seeds {
            for unit in &syn.split.test_units {
                let ts = eval_adaptation_set(&d, &cfg, unit, k, seed).unwrap();
                let ours = adapt(
                    set.for_method(Method::Ours).unwrap(),
                    Method::Ours,
                    &ts,
                    &d,
                    &cfg,
                    1,
                )
                .unwrap();
                let plain = adapt(
                    set.for_method(Method::NoAdapt).unwrap(),
                    Method::NoAdapt,
                    &ts,
                    &d,
                    &cfg,
                    1,
                )
                .unwrap();
                assert_eq!(
                    unit_ranks(&ours, &d, unit).unwrap(),
                    unit_ranks(&plain, &d, unit).unwrap()
                );
            }
        }
        let a = evaluate_method(
            &set,
            Method::Ours,
            "ours",
            &d,
            &cfg,
            EvalOptions::new(&cfg, k),
        )
        .unwrap();
        let b = evaluate_method(
            &set,
            Method::NoAdapt,
            "no-adapt",
            &d,
            &cfg,
            EvalOptions::new(&cfg, k),
        )
        .unwrap();
        let acc = |r: &EvalReport| r.rows.iter().map(|x| (x.acc1, x.acc5)).collect::<Vec<_>>();
        assert_eq!(acc(&a), acc(&b));
    }
}

#[test]
fn adaptation_sets_are_shared_and_disjoint_from_evaluation() {
    let cfg = small_config();
    let syn = synth(&cfg);
    let d = data(&syn);
    for unit in &syn.split.test_units {
        let (queries, gallery) = evaluation_set(&syn.dataset, &syn.split, unit).unwrap();
        let eval_items: BTreeSet<usize> = queries.iter().chain(&gallery).copied().collect();
        for seed in 0..3 {
            let a = eval_adaptation_set(&d, &cfg, unit, 3, seed).unwrap();
            assert_eq!(a, eval_adaptation_set(&d, &cfg, unit, 3, seed).unwrap());
            for t in &a {
                for i in [t.anchor, t.positive, t.negative] {
                    assert!(!eval_items.contains(&i));
                    assert_eq!(&syn.dataset.item(i).category, unit);
                }
            }
        }
    }
}

#[test]
fn methods_follow_their_recipes() {
    let cfg = small_config();
    let syn = synth(&cfg);
    let d = data(&syn);
    let set = trained(&cfg, &d);
    let unit = &syn.split.test_units[0];
    let ts = eval_adaptation_set(&d, &cfg, unit, 3, 0).unwrap();
    let base = set.baseline.as_ref().unwrap();

    let plain = adapt(base, Method::NoAdapt, &ts, &d, &cfg, 1).unwrap();
    assert_eq!(max_abs_diff(&plain.head.weight, &base.head.weight), 0.0);
    assert_eq!(plain.margin, None);

    let tuned = adapt(base, Method::FineTune, &ts, &d, &cfg, 1).unwrap();
    assert!(max_abs_diff(&tuned.head.weight, &base.head.weight) > 0.0);
    assert!(max_abs_diff(&tuned.encoder.hidden.weight, &base.encoder.hidden.weight) > 0.0);

    let ours_params = set.for_method(Method::Ours).unwrap();
    let ours = adapt(ours_params, Method::Ours, &ts, &d, &cfg, 1).unwrap();
    assert!(!ours.margin_fallback);
    assert_eq!(
        max_abs_diff(
            &ours.encoder.hidden.weight,
            &ours_params.encoder.hidden.weight
        ),
        0.0
    );
    assert!(max_abs_diff(&ours.head.weight, &ours_params.head.weight) > 0.0);
    let m = ours.margin.unwrap();
    assert!(m > 0.0 && m < 1.0);

    let fixed = adapt(
        set.for_method(Method::FixedMargin).unwrap(),
        Method::FixedMargin,
        &ts,
        &d,
        &cfg,
        1,
    )
    .unwrap();
    assert_eq!(fixed.margin, Some(cfg.train.fixed_margin));

    let maml_params = set.for_method(Method::MamlFull).unwrap();
    let maml = adapt(maml_params, Method::MamlFull, &ts, &d, &cfg, 1).unwrap();
    assert!(
        max_abs_diff(
            &maml.encoder.hidden.weight,
            &maml_params.encoder.hidden.weight
        ) > 0.0
    );
}

#[test]
fn one_shot_falls_back_to_the_fixed_margin() {
    let cfg = small_config();
    let syn = synth(&cfg);
    let d = data(&syn);
    let p = init_params(&d, &cfg);
    let unit = &syn.split.test_units[0];
    let ts = eval_adaptation_set(&d, &cfg, unit, 1, 0).unwrap();
    let a = adapt(&p, Method::Ours, &ts, &d, &cfg, 1).unwrap();
    assert!(a.margin_fallback);
    assert_eq!(a.margin, Some(cfg.train.fixed_margin));
}

#[test]
fn missing_checkpoints_are_reported_per_method() {
    let set = ModelSet::default();
    for m in Method::ALL {
        assert!(
            matches!(set.for_method(m), Err(Error::MissingCheckpoint(_))),
            "{m}"
        );
    }
}

#[test]
fn empty_adaptation_set_is_rejected() {
    let cfg = small_config();
    let syn = synth(&cfg);
    let d = data(&syn);
    let p = init_params(&d, &cfg);
    assert!(matches!(
        adapt(&p, Method::Ours, &[], &d, &cfg, 1),
        Err(Error::Invalid(_))
    ));
}

#[test]
fn reports_are_well_formed_and_formats_agree() {
    let cfg = small_config();
    let syn = synth(&cfg);
    let d = data(&syn);
    let set = trained(&cfg, &d);
    let mut reports = Vec::new();
    for m in [Method::Ours, Method::NoAdapt, Method::FineTune] {
        for &k in &cfg.eval.ks {
            reports.push(
                evaluate_method(&set, m, m.name(), &d, &cfg, EvalOptions::new(&cfg, k)).unwrap(),
            );
        }
    }
    for r in &reports {
        assert_eq!(r.rows.len(), cfg.eval.seeds);
        assert_eq!(r.config_hash, cfg.hash());
        for row in &r.rows {
            assert!((0.0..=100.0).contains(&row.acc1));
            assert!(row.acc5 >= row.acc1 && row.acc5 <= 100.0);
            assert_eq!(row.adapt_ms, None);
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("r.csv");
    let json = dir.path().join("r.json");
    emit_report(&reports, &csv, ReportFormat::Csv).unwrap();
    emit_report(&reports, &json, ReportFormat::Json).unwrap();
    let from_csv = read_report(&csv, ReportFormat::Csv).unwrap();
    let from_json = read_report(&json, ReportFormat::Json).unwrap();
    let rows: Vec<_> = reports.iter().flat_map(|r| r.rows.clone()).collect();
    assert_eq!(from_csv, rows);
    assert_eq!(from_json, rows);

    let first = fs::read(&csv).unwrap();
    emit_report(&reports, &csv, ReportFormat::Csv).unwrap();
    assert_eq!(fs::read(&csv).unwrap(), first);

    let again = evaluate_method(
        &set,
        Method::Ours,
        "ours",
        &d,
        &cfg,
        EvalOptions::new(&cfg, 2),
    )
    .unwrap();
    assert_eq!(again, reports[1]);
}

#[test]
fn empty_reports_give_a_header_only_file() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("e.csv");
    let json = dir.path().join("e.json");
    emit_report(&[], &csv, ReportFormat::Csv).unwrap();
    emit_report(&[], &json, ReportFormat::Json).unwrap();
    assert_eq!(
        fs::read_to_string(&csv).unwrap(),
        "method,mode,k,seed,acc1,acc5,adapt_ms\n"
    );
    assert!(read_report(&csv, ReportFormat::Csv).unwrap().is_empty());
    assert!(read_report(&json, ReportFormat::Json).unwrap().is_empty());
    assert!(ReportFormat::from_path(&dir.path().join("x.txt")).is_err());
}

#[test]
fn timing_is_recorded_on_request() {
    let mut cfg = small_config();
    cfg.eval.record_timing = true;
    let syn = synth(&cfg);
    let d = data(&syn);
    let set = ModelSet {
        baseline: Some(init_params(&d, &cfg)),
        ..ModelSet::default()
    };
    let r = evaluate_method(
        &set,
        Method::FineTune,
        "fine-tune",
        &d,
        &cfg,
        EvalOptions::new(&cfg, 2),
    )
    .unwrap();
    assert!(r
        .rows
        .iter()
        .all(|row| row.adapt_ms.is_some_and(|ms| ms >= 0.0)));
}

#[test]
fn ablation_suite_covers_every_sweep() {
    let mut cfg = small_config();
    cfg.ablation.steps = vec![1, 2];
    cfg.ablation.embed_dims = vec![4, 6];
    cfg.ablation.meta_epochs = 1;
    let syn = synth(&cfg);
    let d = data(&syn);
    let set = train_models(&d, &cfg, &[Variant::Ours]).unwrap();
    let mut seen = Vec::new();
    let results = ablation_suite(&set, &d, &cfg, |l| seen.push(l.to_string())).unwrap();
    let labels: Vec<&str> = results.reports.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(
        labels,
        [
            "ours@steps=1",
            "ours@steps=2",
            "ours@k=1",
            "ours@k=2",
            "ours@d=4",
            "ours@d=6",
            "ours@reg=all",
            "ours@reg=none",
            "ours@reg=no-domain",
            "ours@reg=no-discriminative",
            "ours@reg=no-semantic",
        ]
    );
    assert_eq!(seen.len(), labels.len());
    assert_eq!(results.margins.len(), syn.split.test_units.len());
    let k2 = &results.reports[3];
    assert!(margin_spread(k2).is_finite());
    assert!(results.margins.iter().all(|m| m.mean > 0.0 && m.mean < 1.0));
}
