mod common;

use common::{bits, data, max_abs_diff, small_config, synth};
use metasbir::checkpoint::{Checkpoint, Stage};
use metasbir::config::{Mode, Variant};
use metasbir::episodes::{TaskSampler, Triplet};
use metasbir::losses::{triplet_loss, Hinge, TripletBatch};
use metasbir::metatrain::{
    init_params, inner_adapt, leaf_mask, meta_train, outer_groups, outer_step, pretrain_baseline,
    task_gradient, InnerSpec, MetaState, Rates, TrainData,
};
use metasbir::model::{embed, encode, project, Group, Linear, ModelParams};
use metasbir::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tapegrad::optim::{Adam, AdamConfig};
use tapegrad::{Graph, Tensor};

fn pretrained(cfg: &metasbir::config::ExperimentConfig, d: &TrainData<'_>) -> ModelParams<Tensor> {
    let mut p = init_params(d, cfg);
    pretrain_baseline(d, cfg, &mut p, |_| {}).unwrap();
    p
}

fn episodes(
    d: &TrainData<'_>,
    k: usize,
    n: usize,
    seed: u64,
) -> Vec<metasbir::episodes::TaskEpisode> {
    let sampler = TaskSampler::new(d.dataset, d.split).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| sampler.sample(k, &mut rng).unwrap())
        .collect()
}

#[test]
fn pretraining_is_bit_reproducible() {
    let cfg = small_config();
    let syn = synth(&cfg);
    let d = data(&syn);
    let a = pretrained(&cfg, &d);
    let b = pretrained(&cfg, &d);
    for ((_, x), (_, y)) in a.leaves().iter().zip(b.leaves()) {
        assert_eq!(bits(x), bits(y));
    }
}

#[test]
fn pretraining_separates_noiseless_data() {
    let mut cfg = metasbir::config::ExperimentConfig::default();
    cfg.generator.noise = 0.0;
    cfg.generator.style_strength = 0.0;
    cfg.generator.clutter = 0.0;
    let syn = synth(&cfg);
    let d = data(&syn);
    let mut p = init_params(&d, &cfg);
    let history = pretrain_baseline(&d, &cfg, &mut p, |_| {}).unwrap();
    let first = history.first().unwrap().triplet;
    let last = history.last().unwrap().triplet;
    assert!(last < first);
    assert!(last < 0.01, "final triplet loss {last}");
}

#[test]
fn pretraining_divergence_is_reported() {
    let mut cfg = small_config();
    cfg.train.pretrain_lr = 1e300;
    cfg.train.pretrain_epochs = 5;
    let syn = synth(&cfg);
    let d = data(&syn);
    let mut p = init_params(&d, &cfg);
    let r = pretrain_baseline(&d, &cfg, &mut p, |_| {});
    assert!(matches!(r, Err(Error::Diverged(_))));
}

/// Support features stacked as anchors, positives, negatives.
fn support_rows(ts: &[Triplet]) -> Vec<usize> {
    ts.iter()
        .map(|t| t.anchor)
        .chain(ts.iter().map(|t| t.positive))
        .chain(ts.iter().map(|t| t.negative))
        .collect()
}

#[test]
fn zero_rates_leave_the_head_unchanged() {
    let cfg = small_config();
    let syn = synth(&cfg);
    let d = data(&syn);
    let mut p = init_params(&d, &cfg);
    p.alpha = p.alpha.map(|t| Tensor::zeros(t.shape()));
    let ep = &episodes(&d, 3, 1, 4)[0];
    let g = Graph::new();
    let m = p.to_graph(&g);
    let x = g.constant(syn.dataset.features(&support_rows(&ep.support)));
    let lat = encode(&m.encoder, x).unwrap();
    let spec = InnerSpec::for_variant(Variant::Ours, &cfg.train, 3, true);
    let out = inner_adapt(&m, x, lat, g.scalar(0.3), &spec).unwrap();
    for ((_, a), (_, b)) in out.head.leaves().iter().zip(p.head.leaves()) {
        assert_eq!(bits(&a.value()), bits(b));
    }
    for ((_, a), (_, b)) in m.alpha.leaves().iter().zip(p.alpha.leaves()) {
        assert_eq!(bits(&a.value()), bits(b));
    }
}

fn smooth_loss(head: &Linear<Tensor>, latent: &Tensor, margin: f64, tau: f64) -> f64 {
    let g = Graph::new();
    g.set_grad_enabled(false);
    let h = head.map(|t| g.constant(t.clone()));
    let emb = project(&h, g.constant(latent.clone())).unwrap();
    let [rows, cols] = emb.shape();
    let k = rows / 3;
    triplet_loss(&TripletBatch {
        anchors: emb.slice(0..k, 0..cols).unwrap(),
        positives: emb.slice(k..2 * k, 0..cols).unwrap(),
        negatives: emb.slice(2 * k..3 * k, 0..cols).unwrap(),
        margin: g.scalar(margin),
        hinge: Hinge::Smooth { tau },
    })
    .unwrap()
    .item()
}

#[test]
fn single_inner_step_matches_a_finite_difference_step() {
    let cfg = small_config();
    let syn = synth(&cfg);
    let d = data(&syn);
    let p = init_params(&d, &cfg);
    let ep = &episodes(&d, 3, 1, 8)[0];
    let margin = 0.4;
    let tau = cfg.train.tau;

    let g = Graph::new();
    let m = p.to_graph(&g);
    let x = g.constant(syn.dataset.features(&support_rows(&ep.support)));
    let lat = encode(&m.encoder, x).unwrap();
    let latent = (*lat.value()).clone();
    let spec = InnerSpec::for_variant(Variant::Ours, &cfg.train, 1, false);
    let adapted = inner_adapt(&m, x, lat, g.scalar(margin), &spec).unwrap();

    let h = 1e-6;
    let mut head = p.head.clone();
    let n_leaves = head.leaves().len();
    for leaf in 0..n_leaves {
        let len = head.leaves()[leaf].1.len();
        for i in 0..len {
            let orig = head.leaves()[leaf].1.data()[i];
            head.leaves_mut()[leaf].data_mut()[i] = orig + h;
            let up = smooth_loss(&head, &latent, margin, tau);
            head.leaves_mut()[leaf].data_mut()[i] = orig - h;
            let down = smooth_loss(&head, &latent, margin, tau);
            head.leaves_mut()[leaf].data_mut()[i] = orig;
            let grad = (up - down) / (2.0 * h);
            let rate = p.alpha.leaves()[leaf].1.data()[i];
            let expected = orig - rate * grad;
            let got = adapted.head.leaves()[leaf].1.value().data()[i];
            assert!(
                (got - expected).abs() < 1e-8 * (1.0 + expected.abs()),
                "leaf {leaf} coordinate {i}: {got} vs {expected}"
            );
        }
    }
}

#[test]
fn saturated_triplets_barely_move_the_head() {
    let cfg = small_config();
    let syn = synth(&cfg);
    let d = data(&syn);
    let p = init_params(&d, &cfg);
    let all: Vec<usize> = (0..syn.dataset.len()).collect();
    let emb = {
        let g = Graph::new();
        let m = p.to_graph(&g);
        let e = embed(&m.encoder, &m.head, g.constant(syn.dataset.features(&all))).unwrap();
        (*e.value()).clone()
    };
    let dist = |i: usize, j: usize| {
        emb.row_slice(i)
            .iter()
            .zip(emb.row_slice(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let (far_a, far_n) = all
        .iter()
        .flat_map(|&i| all.iter().map(move |&j| (i, j)))
        .max_by(|x, y| dist(x.0, x.1).total_cmp(&dist(y.0, y.1)))
        .unwrap();
    // anchor == positive, so slack = margin - d(a,n) = -1
    let margin = dist(far_a, far_n) - 1.0;
    assert!(margin >= 0.0, "embeddings too concentrated: {margin}");

    let g = Graph::new();
    let m = p.to_graph(&g);
    let x = g.constant(syn.dataset.features(&[far_a, far_a, far_n]));
    let lat = encode(&m.encoder, x).unwrap();
    let spec = InnerSpec::for_variant(Variant::Ours, &cfg.train, 1, false);
    let out = inner_adapt(&m, x, lat, g.scalar(margin), &spec).unwrap();
    let mut sq = 0.0;
    for ((_, a), (_, b)) in out.head.leaves().iter().zip(p.head.leaves()) {
        sq += a
            .value()
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>();
    }
    assert!(sq > 0.0);
    assert!(sq.sqrt() < 1e-6, "update norm {}", sq.sqrt());
}

#[test]
fn fixed_rates_adapt_the_encoder_for_maml() {
    let cfg = small_config();
    let syn = synth(&cfg);
    let d = data(&syn);
    let p = init_params(&d, &cfg);
    let ep = &episodes(&d, 3, 1, 6)[0];
    let g = Graph::new();
    let m = p.to_graph(&g);
    let x = g.constant(syn.dataset.features(&support_rows(&ep.support)));
    let lat = encode(&m.encoder, x).unwrap();
    let spec = InnerSpec::for_variant(Variant::MamlFull, &cfg.train, 1, false);
    assert_eq!(spec.rates, Rates::Fixed(cfg.train.alpha_init));
    assert_eq!(spec.hinge, Hinge::Hard);
    let out = inner_adapt(&m, x, lat, g.scalar(0.9), &spec).unwrap();
    let moved = out
        .encoder
        .leaves()
        .iter()
        .zip(p.encoder.leaves())
        .any(|((_, a), (_, b))| max_abs_diff(&a.value(), b) > 0.0);
    assert!(moved);
    // the base parameters on the graph are untouched
    for ((_, a), (_, b)) in m.encoder.leaves().iter().zip(p.encoder.leaves()) {
        assert_eq!(bits(&a.value()), bits(b));
    }
}

fn grads_of(
    p: &ModelParams<Tensor>,
    ep: &metasbir::episodes::TaskEpisode,
    d: &TrainData<'_>,
    t: &metasbir::config::TrainConfig,
    create_graph: bool,
) -> Vec<Tensor> {
    let mask = leaf_mask(p, &outer_groups(t, d.mode()));
    task_gradient(p, ep, d, t, &mask, create_graph).unwrap().0
}

#[test]
fn zero_lambda_gives_regularizer_heads_zero_gradient() {
    let cfg = small_config();
    let syn = synth(&cfg);
    let d = data(&syn);
    let p = init_params(&d, &cfg);
    let ep = &episodes(&d, 2, 1, 1)[0];
    let mut t = cfg.train.clone();
    t.lambda = 0.0;
    let zero = grads_of(&p, ep, &d, &t, true);
    t.lambda = 0.5;
    let weighted = grads_of(&p, ep, &d, &t, true);
    let names: Vec<String> = p.leaves().into_iter().map(|(n, _)| n).collect();
    let mut reg_nonzero = false;
    for ((name, z), w) in names.iter().zip(&zero).zip(&weighted) {
        if Group::of(name).unwrap().is_regularizer() {
            assert!(z.data().iter().all(|v| *v == 0.0), "{name}");
            reg_nonzero |= w.data().iter().any(|v| *v != 0.0);
        }
    }
    assert!(reg_nonzero);
}

#[test]
fn second_order_gradient_differs_from_first_order() {
    let cfg = small_config();
    let syn = synth(&cfg);
    let d = data(&syn);
    let p = init_params(&d, &cfg);
    let ep = &episodes(&d, 2, 1, 5)[0];
    let first = grads_of(&p, ep, &d, &cfg.train, false);
    let second = grads_of(&p, ep, &d, &cfg.train, true);
    let names: Vec<String> = p.leaves().into_iter().map(|(n, _)| n).collect();
    let mut diff: f64 = 0.0;
    for ((name, a), b) in names.iter().zip(&first).zip(&second) {
        if Group::of(name) == Some(Group::Margin) {
            assert!(
                a.data().iter().all(|v| *v == 0.0),
                "first-order {name} should be zero"
            );
        }
        diff = diff.max(max_abs_diff(a, b));
    }
    assert!(diff > 1e-8, "max difference {diff}");
}

#[test]
fn meta_batch_gradient_is_the_mean_of_task_gradients() {
    let cfg = small_config();
    let syn = synth(&cfg);
    let d = data(&syn);
    let p = init_params(&d, &cfg);
    let eps = episodes(&d, 2, 2, 3);
    let adam = || {
        let mut a = Adam::new(AdamConfig {
            lr: cfg.train.outer_lr,
            ..AdamConfig::default()
        });
        a.init(
            &p.leaves()
                .iter()
                .map(|(_, t)| t.shape())
                .collect::<Vec<_>>(),
        );
        a
    };

    let mut stepped = p.clone();
    let mut opt = adam();
    outer_step(&mut stepped, &mut opt, &eps, &d, &cfg.train).unwrap();

    let g0 = grads_of(&p, &eps[0], &d, &cfg.train, true);
    let g1 = grads_of(&p, &eps[1], &d, &cfg.train, true);
    let mean: Vec<Tensor> = g0
        .iter()
        .zip(&g1)
        .map(|(a, b)| {
            let mut m = a.clone();
            m.axpy(1.0, b).unwrap();
            m.data_mut().iter_mut().for_each(|v| *v *= 0.5);
            m
        })
        .collect();
    let mut manual = p.clone();
    let mut opt = adam();
    opt.step(&mut manual.leaves_mut(), &mean).unwrap();
    for ((name, a), (_, b)) in stepped.leaves().iter().zip(manual.leaves()) {
        assert_eq!(bits(a), bits(b), "{name}");
    }
}

#[test]
fn regularizers_can_be_switched_off() {
    let mut cfg = small_config();
    cfg.train.regularizers.domain = false;
    cfg.train.regularizers.discriminative = false;
    cfg.train.regularizers.semantic = false;
    let syn = synth(&cfg);
    let d = data(&syn);
    let p = init_params(&d, &cfg);
    let ep = &episodes(&d, 2, 1, 1)[0];
    let names: Vec<String> = p.leaves().into_iter().map(|(n, _)| n).collect();
    for (name, g) in names.iter().zip(grads_of(&p, ep, &d, &cfg.train, true)) {
        if Group::of(name).unwrap().is_regularizer() {
            assert!(g.data().iter().all(|v| *v == 0.0), "{name}");
        }
    }
}

fn assert_same_params(a: &ModelParams<Tensor>, b: &ModelParams<Tensor>) {
    for ((name, x), (_, y)) in a.leaves().iter().zip(b.leaves()) {
        assert_eq!(bits(x), bits(y), "{name}");
    }
}

#[test]
fn resumed_meta_training_matches_an_uninterrupted_run() {
    let cfg = small_config();
    let syn = synth(&cfg);
    let d = data(&syn);
    let base = pretrained(&cfg, &d);
    let start = || MetaState {
        params: base.clone(),
        optimizer: None,
        epoch: 0,
    };
    let (full, _) = meta_train(&d, &cfg, start(), |_, _| Ok(())).unwrap();

    let mut first_leg = cfg.clone();
    first_leg.train.meta_epochs = 1;
    let (half, _) = meta_train(&d, &first_leg, start(), |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("meta.ckpt");
    Checkpoint {
        stage: Stage::Meta,
        variant: Some(Variant::Ours),
        epoch: half.epoch,
        config: first_leg,
        params: half.params,
        optimizer: half.optimizer,
    }
    .save(&path)
    .unwrap();
    let cp = Checkpoint::load(&path).unwrap();
    let resumed_start = MetaState {
        params: cp.params,
        optimizer: cp.optimizer,
        epoch: cp.epoch,
    };
    let (resumed, history) = meta_train(&d, &cfg, resumed_start, |_, _| Ok(())).unwrap();
    assert_eq!(history.len(), 1);
    assert_eq!(resumed.epoch, full.epoch);
    assert_same_params(&resumed.params, &full.params);
}

#[test]
fn meta_training_is_thread_count_independent() {
    let cfg = small_config();
    let syn = synth(&cfg);
    let d = data(&syn);
    let base = init_params(&d, &cfg);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| {
            let start = MetaState {
                params: base.clone(),
                optimizer: None,
                epoch: 0,
            };
            meta_train(&d, &cfg, start, |_, _| Ok(())).unwrap().0
        })
    };
    assert_same_params(&run(1).params, &run(3).params);
}

#[test]
fn reloaded_checkpoint_reproduces_forward_outputs() {
    let cfg = small_config();
    let syn = synth(&cfg);
    let d = data(&syn);
    let p = pretrained(&cfg, &d);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("base.ckpt");
    let cp = Checkpoint {
        stage: Stage::Baseline,
        variant: None,
        epoch: cfg.train.pretrain_epochs,
        config: cfg.clone(),
        params: p.clone(),
        optimizer: None,
    };
    cp.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, cp);
    let forward = |params: &ModelParams<Tensor>| {
        let g = Graph::new();
        let m = params.to_graph(&g);
        let idx: Vec<usize> = (0..syn.dataset.len()).collect();
        let e = embed(&m.encoder, &m.head, g.constant(syn.dataset.features(&idx))).unwrap();
        bits(&e.value())
    };
    assert_eq!(forward(&back.params), forward(&p));
}

#[test]
fn checkpoint_errors_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    assert!(matches!(Checkpoint::load(&missing), Err(Error::Io { .. })));
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, "hello\n").unwrap();
    assert!(matches!(Checkpoint::load(&junk), Err(Error::Parse { .. })));
}

#[test]
fn user_mode_meta_training_runs() {
    let mut cfg = small_config();
    cfg.generator.mode = Mode::User;
    cfg.generator.users = 5;
    cfg.generator.train_users = 3;
    cfg.train.meta_epochs = 1;
    let syn = synth(&cfg);
    let d = data(&syn);
    let p = init_params(&d, &cfg);
    let start = MetaState {
        params: p,
        optimizer: None,
        epoch: 0,
    };
    let (state, history) = meta_train(&d, &cfg, start, |_, _| Ok(())).unwrap();
    assert_eq!(state.epoch, 1);
    assert!(history[0].loss.is_finite());
    assert!(history[0].reg > 0.0);
}

#[test]
fn category_regularizer_without_semantics_is_a_config_error() {
    let cfg = small_config();
    let syn = synth(&cfg);
    let d = TrainData {
        semantic: None,
        ..data(&syn)
    };
    let start = MetaState {
        params: init_params(&data(&syn), &cfg),
        optimizer: None,
        epoch: 0,
    };
    assert!(matches!(
        meta_train(&d, &cfg, start, |_, _| Ok(())),
        Err(Error::Config(_))
    ));
}
