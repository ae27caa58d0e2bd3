use std::path::Path;

use partseg_core::model::Ablation;
use partseg_core::numeric::{Graph, ParamGroup, ParamStore, Tensor};
use partseg_core::synth::{generate_corpus, CorpusConfig, Dataset, Split};
use partseg_core::train::checkpoint::{PARAMS_DIR, RUN_FILE};
use partseg_core::train::losses::{bce_loss, cls_loss, dice_loss, total_loss, DICE_EPS};
use partseg_core::train::sampling::sample_uncertain_points;
use partseg_core::train::trainer::METRICS_FILE;
use partseg_core::train::{
    calibrate_threshold, evaluate, load_checkpoint, save_checkpoint, train, AdamW, LossWeights, LrMultipliers,
    LrSchedule, RunConfig,
};
use partseg_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn value(f: impl FnOnce(&mut Graph) -> partseg_core::Result<partseg_core::Var>) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g).unwrap();
    g.value(v).data()[0]
}

fn input(g: &mut Graph, v: &[f64]) -> partseg_core::Var {
    g.input(Tensor::new(vec![v.len()], v.to_vec()).unwrap())
}

// ---- losses ----

#[test]
fn bce_examples() {
    let y = [1.0, 0.0, 1.0, 0.0];
    assert!(value(|g| {
        let p = input(g, &y);
        bce_loss(g, p, &y)
    }) <= 1.2e-6);
    let half = value(|g| {
        let p = input(g, &[0.5; 4]);
        bce_loss(g, p, &y)
    });
    assert!((half - std::f64::consts::LN_2).abs() < 1e-12);
    let v = value(|g| {
        let p = input(g, &[0.9, 0.2]);
        bce_loss(g, p, &[1.0, 0.0])
    });
    assert!((v + (0.9f64.ln() + 0.8f64.ln()) / 2.0).abs() < 1e-12);
    let mut g = Graph::new();
    let p = input(&mut g, &[0.5; 3]);
    assert!(bce_loss(&mut g, p, &[1.0; 2]).is_err());
}

#[test]
fn dice_examples() {
    let y = [1.0, 0.0, 1.0, 1.0];
    assert!(value(|g| {
        let p = input(g, &y);
        dice_loss(g, p, &y)
    }) <= 1e-6);
    let disjoint = value(|g| {
        let p = input(g, &[0.0, 1.0, 0.0, 0.0]);
        dice_loss(g, p, &y)
    });
    assert!((disjoint - 1.0).abs() < 1e-12);
    let v = value(|g| {
        let p = input(g, &[1.0, 1.0, 0.0, 0.0]);
        dice_loss(g, p, &[1.0, 0.0, 0.0, 0.0])
    });
    assert!((v - (1.0 - 2.0 / (3.0 + DICE_EPS))).abs() < 1e-12);
    assert!((v - 1.0 / 3.0).abs() < 1e-6);
}

#[test]
fn cls_examples() {
    let onehot = Tensor::from_fn(&[3, 13], |i| if i % 13 == (i / 13) * 4 { 1.0 } else { 0.0 });
    let w = [1.0; 13];
    let perfect = value(|g| {
        let p = g.input(onehot.clone());
        cls_loss(g, p, &[0, 4, 8], &w)
    });
    assert!(perfect <= 1e-6);

    let uniform = Tensor::full(&[2, 13], 1.0 / 13.0);
    let v = value(|g| {
        let p = g.input(uniform.clone());
        cls_loss(g, p, &[3, 7], &w)
    });
    assert!((v - 13f64.ln()).abs() < 1e-12);

    // Doubling one class weight doubles only that item's term.
    let probs = Tensor::from_fn(&[2, 13], |i| if i % 13 == 3 { 0.4 } else { 0.6 / 12.0 });
    let run = |w: &[f64]| {
        value(|g| {
            let p = g.input(probs.clone());
            cls_loss(g, p, &[3, 5], w)
        })
    };
    let base = run(&w);
    let mut w2 = w;
    w2[3] = 2.0;
    let term3 = -0.4f64.ln() / 2.0;
    assert!((run(&w2) - base - term3).abs() < 1e-12);
}

#[test]
fn total_examples_and_gradient() {
    let w = LossWeights::default();
    let total = |v: [f64; 3]| {
        value(|g| {
            let (a, b, c) = (input(g, &[v[0]]), input(g, &[v[1]]), input(g, &[v[2]]));
            total_loss(g, a, b, c, &w)
        })
    };
    assert_eq!(total([0.0; 3]), 0.0);
    assert!((total([0.1, 0.2, 0.3]) - 2.1).abs() < 1e-12);

    let mut store = ParamStore::new();
    let ids: Vec<_> = (0..3)
        .map(|i| store.add(format!("l{i}"), ParamGroup::Head, Tensor::scalar(0.3)))
        .collect();
    let mut g = Graph::with_params(&store);
    let vs: Vec<_> = ids.iter().map(|&id| g.param(id)).collect();
    let t = total_loss(&mut g, vs[0], vs[1], vs[2], &w).unwrap();
    let grads = g.backward(t);
    let got: Vec<f64> = vs.iter().map(|&v| grads.get(v).unwrap()[0]).collect();
    assert_eq!(got, vec![5.0, 5.0, 2.0]);
}

// ---- point sampling ----

#[test]
fn equal_logits_sample_uniformly_and_reproducibly() {
    let logits = vec![0.7; 400];
    let draw = |seed| sample_uncertain_points(&logits, 32, 3.0, 0.75, &mut ChaCha8Rng::seed_from_u64(seed));
    assert_eq!(draw(3), draw(3));
    assert_ne!(draw(3), draw(4));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut counts = [0usize; 4];
    for _ in 0..2000 {
        for i in sample_uncertain_points(&logits, 32, 3.0, 0.75, &mut rng) {
            counts[i / 100] += 1;
        }
    }
    // 64 000 draws over four equal quarters.
    for c in counts {
        assert!((c as f64 - 16_000.0).abs() < 600.0, "{counts:?}");
    }
}

#[test]
fn most_uncertain_pixel_is_always_selected() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut logits: Vec<f64> = (0..64).map(|i| if i % 2 == 0 { 8.0 } else { -9.0 }).collect();
    logits[37] = 0.0;
    for _ in 0..200 {
        // Oversampling covers the map, so the candidate set holds pixel 37.
        let pts = sample_uncertain_points(&logits, 24, 3.0, 0.5, &mut rng);
        assert_eq!(pts.len(), 24);
        assert_eq!(pts[0], 37);
    }
}

#[test]
fn uncertain_half_gets_its_share() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits: Vec<f64> = (0..256).map(|i| if i < 128 { 0.05 * (i % 7) as f64 } else { 6.0 }).collect();
    let (mut uncertain, mut total) = (0usize, 0usize);
    for _ in 0..10_000 {
        let pts = sample_uncertain_points(&logits, 16, 3.0, 0.75, &mut rng);
        uncertain += pts.iter().filter(|&&i| i < 128).count();
        total += pts.len();
    }
    let frac = uncertain as f64 / total as f64;
    assert!(frac >= 0.75, "uncertain fraction {frac}");
}

proptest! {
    #[test]
    fn sampled_points_are_in_range(
        logits in proptest::collection::vec(-5.0f64..5.0, 1..200),
        n in 0usize..300,
        over in 1.0f64..4.0,
        imp in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let pts = sample_uncertain_points(&logits, n, over, imp, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(pts.len(), n.min(logits.len()));
        prop_assert!(pts.iter().all(|&i| i < logits.len()));
    }
}

// ---- optimisation ----

#[test]
fn schedule_warms_up_then_steps_down() {
    let s = LrSchedule {
        base: 1e-3,
        warmup: 10,
        milestones: vec![50, 80],
        gamma: 0.1,
    };
    assert_eq!(s.lr(0), 0.0);
    assert!((s.lr(5) - 5e-4).abs() < 1e-15);
    assert_eq!(s.lr(10), 1e-3);
    assert_eq!(s.lr(49), 1e-3);
    assert!((s.lr(50) - 1e-4).abs() < 1e-15);
    assert!((s.lr(80) - 1e-5).abs() < 1e-15);
    assert!(LrSchedule {
        milestones: vec![80, 50],
        ..s
    }
    .validate()
    .is_err());
}

#[test]
fn adamw_first_step_and_decoupled_decay() {
    let mut store = ParamStore::new();
    let w = store.add("w", ParamGroup::Head, Tensor::full(&[2, 2], 1.0));
    let b = store.add("b", ParamGroup::Backbone, Tensor::full(&[2], 1.0));
    let mut opt = AdamW::new(&store, 0.5);
    let grads = vec![(w, vec![3.0, -0.2, 0.0, 1.0]), (b, vec![-2.0, 5.0])];
    let mult = LrMultipliers {
        backbone: 0.5,
        ..LrMultipliers::default()
    };
    opt.step(&mut store, &grads, 0.1, &mult);
    // First bias-corrected step is lr·g/(|g|+ε); matrices also decay by lr·λ.
    let wv = store.get(w).data();
    let decayed = 1.0 - 0.1 * 0.5;
    for (got, g) in wv.iter().zip([3.0f64, -0.2, 0.0, 1.0]) {
        let step = if g == 0.0 { 0.0 } else { 0.1 * g.signum() };
        assert!((got - (decayed - step)).abs() < 1e-6, "{got}");
    }
    let bv = store.get(b).data();
    assert!((bv[0] - 1.05).abs() < 1e-6 && (bv[1] - 0.95).abs() < 1e-6, "{bv:?}");
}

// ---- presence calibration ----

#[test]
fn calibration_examples() {
    let scores = [0.1, 0.9, 0.3, 0.8, -1.0];
    let truth = [false, true, false, true, false];
    let t = calibrate_threshold(&scores, &truth);
    assert!(t > 0.3 && t < 0.8, "{t}");
    assert!(calibrate_threshold(&scores, &[false; 5]) > 0.9);
    assert!(calibrate_threshold(&scores, &[true; 5]) < -1.0);
    assert_eq!(calibrate_threshold(&[], &[]), 0.0);
}

proptest! {
    #[test]
    fn separable_scores_calibrate_perfectly(
        pos in proptest::collection::vec(1.0f64..5.0, 1..20),
        neg in proptest::collection::vec(-5.0f64..0.5, 1..20),
    ) {
        let scores: Vec<f64> = pos.iter().chain(&neg).copied().collect();
        let truth: Vec<bool> = (0..scores.len()).map(|i| i < pos.len()).collect();
        let t = calibrate_threshold(&scores, &truth);
        for (s, y) in scores.iter().zip(&truth) {
            prop_assert_eq!(*s > t, *y);
        }
    }
}

// ---- configuration ----

#[test]
fn run_config_rejects_unknown_keys_and_bad_values() {
    let ok: RunConfig = toml::from_str("[train]\nepochs = 3\n[model]\nrefs = 1\n").unwrap();
    assert_eq!((ok.train.epochs, ok.model.refs), (3, 1));
    ok.validate().unwrap();
    assert!(toml::from_str::<RunConfig>("[train]\nepoch = 3\n").is_err());
    assert!(toml::from_str::<RunConfig>("[model.gat]\nlayers = 2\nextra = 1\n").is_err());

    let mut bad = RunConfig::default();
    bad.train.milestones = vec![5, 3];
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let mut bad = RunConfig::default();
    bad.model.gat.heads = vec![4, 4];
    assert!(bad.validate().is_err());
    let mut bad = RunConfig::default();
    bad.train.loss.mask = -1.0;
    assert!(bad.validate().is_err());
    bad.train.loss.mask = f64::INFINITY;
    assert!(bad.validate().is_err());
    let mut bad = RunConfig::default();
    bad.train.lr = 0.0;
    assert!(bad.validate().is_err());
}

// ---- training ----

fn smoke_data() -> Dataset {
    generate_corpus(&CorpusConfig {
        count: 24,
        seed: 11,
        ..Default::default()
    })
    .unwrap()
}

fn smoke_run(ablation: Ablation) -> RunConfig {
    let mut run = RunConfig::default();
    run.model.ablation = ablation;
    run.train.epochs = 2;
    run.train.warmup_iters = 0;
    run.train.milestones = vec![];
    run.train.points = 64;
    run.train.reid.steps = 4;
    run.train.seed = 9;
    run
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn smoke_training_is_finite_decreasing_and_deterministic() {
    let data = smoke_data();
    assert_eq!(data.split(Split::Train).len(), 16);
    let run = smoke_run(Ablation::FULL);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let out = train(&run, &data, Some(a.path())).unwrap();
    assert_eq!(out.metrics.len(), 2);
    assert!(out.metrics.iter().all(|m| m.loss.is_finite()));
    assert!(out.metrics[1].loss < out.metrics[0].loss, "{:?}", out.metrics);
    assert_eq!(out.reid_losses.len(), 4);
    let log = std::fs::read_to_string(a.path().join(METRICS_FILE)).unwrap();
    assert_eq!(log.lines().count(), 2);

    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| train(&run, &data, Some(b.path()))).unwrap();
    assert_eq!(
        read_dir_bytes(&a.path().join(PARAMS_DIR)),
        read_dir_bytes(&b.path().join(PARAMS_DIR))
    );
    assert_eq!(
        std::fs::read(a.path().join(RUN_FILE)).unwrap(),
        std::fs::read(b.path().join(RUN_FILE)).unwrap()
    );

    // The checkpoint reproduces the trained model's predictions.
    let (loaded, loaded_run) = load_checkpoint(a.path()).unwrap();
    assert_eq!(loaded_run, run);
    assert_eq!(loaded.presence_threshold, out.model.presence_threshold);
    let val = data.split(Split::Val);
    let want = evaluate(&out.model, Some(&out.bank), &val).unwrap();
    let got = evaluate(&loaded, Some(&out.bank), &val).unwrap();
    assert_eq!(got, want);
}

#[test]
fn checkpoint_round_trip_of_an_untrained_base_model() {
    let data = smoke_data();
    let run = smoke_run(Ablation::BASE);
    let model = partseg_core::train::init_model(&run, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &model, &run).unwrap();
    let (loaded, _) = load_checkpoint(dir.path()).unwrap();
    let img = &data.samples[0].image;
    let (a, b) = (model.predict(img, &[]).unwrap(), loaded.predict(img, &[]).unwrap());
    assert_eq!(a.masks, b.masks);
    assert_eq!(loaded.ontology, model.ontology);

    std::fs::remove_file(dir.path().join(RUN_FILE)).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Io { .. })));
}

#[test]
fn divergence_is_reported() {
    let data = smoke_data();
    let mut run = smoke_run(Ablation::BASE);
    // The first update moves weights by ~lr; the next forward overflows.
    run.train.lr = 1e300;
    let dir = tempfile::tempdir().unwrap();
    match train(&run, &data, Some(dir.path())) {
        Err(Error::Diverged { .. }) => assert!(dir.path().join("last_good").join(RUN_FILE).exists()),
        Ok(o) => panic!("lr 1e300 trained to loss {:?}", o.metrics.last().map(|m| m.loss)),
        Err(e) => panic!("unexpected error {e}"),
    }
}
