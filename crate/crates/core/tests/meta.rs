use std::sync::OnceLock;

use face_core::data::{sample_episode, synth_generate, Dataset, ElectrodeMap, FeatureSet, QuerySize, SynthParams};
use face_core::eval::{evaluate_split, train_split, RunConfig, TrialResult};
use face_core::meta::{
    adapt_views, inner_update, load_checkpoint, meta_train, outer_gradient, pretrain, save_checkpoint, test_adapt,
    EpisodeBatch, InnerConfig, MetaConfig, MetaState, PretrainConfig,
};
use face_core::model::{argmax_rows, Batch, Model, ModelConfig};
use face_core::norm::BnMode;
use face_diffcore::finite_diff::close;
use face_diffcore::nn::smooth_cross_entropy;
use face_diffcore::{Graph, ParamSet, Partition, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two channels, one band, two classes: 41 parameters in total.
fn tiny_config() -> ModelConfig {
    ModelConfig {
        channels: 2,
        bands: 1,
        num_classes: 2,
        kernel: 1,
        reduction: 2,
        bottleneck: 1,
        cvf: false,
        fsa: true,
        ..ModelConfig::default()
    }
}

fn tiny_data(seed: u64) -> Vec<FeatureSet> {
    synth_generate(&SynthParams {
        num_subjects: 3,
        samples_per_class: 20,
        num_classes: 2,
        channels: 2,
        bands: 1,
        seed,
        ..SynthParams::default()
    })
    .unwrap()
}

/// Tiny model with every parameter drawn at random, so no gradient
/// vanishes because of a zero initialization.
fn tiny_model(seed: u64) -> Model {
    let mut model = Model::new(tiny_config(), &ElectrodeMap::default_for(2).unwrap(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in model.params.names() {
        let t = model.params.get(&name).unwrap();
        let (lo, hi) = if name.ends_with("gamma") {
            (0.5, 1.5)
        } else if name == "gcn.a0" {
            (0.05, 1.0)
        } else {
            (-1.0, 1.0)
        };
        let r = Tensor::from_fn(t.shape(), |_| rng.gen_range(lo..hi));
        model.params.set(&name, r).unwrap();
    }
    model
}

fn episode(model: &Model, fs: &FeatureSet, k: usize, q: usize, seed: u64) -> EpisodeBatch {
    let ep = sample_episode(fs, k, QuerySize::Count(q), seed).unwrap();
    EpisodeBatch {
        subject: fs.subject.clone(),
        support: model.batch(fs, &ep.support).unwrap(),
        query: model.batch(fs, &ep.query).unwrap(),
    }
}

fn inner(alpha: f64, steps: usize) -> InnerConfig {
    InnerConfig {
        alpha,
        steps,
        first_order: false,
        smoothing: 0.1,
    }
}

fn with_entry(p: &ParamSet<f64>, name: &str, i: usize, delta: f64) -> ParamSet<f64> {
    let mut t = p.get(name).unwrap().clone();
    t.data_mut()[i] += delta;
    let mut q = p.clone();
    q.set(name, t).unwrap();
    q
}

#[test]
fn outer_gradient_matches_finite_differences() {
    let h = 1e-5;
    for (seed, steps, n) in [(0, 1, 1), (1, 2, 1), (2, 1, 2), (3, 2, 2)] {
        let model = tiny_model(seed);
        assert!(model.params.count(None) <= 100);
        let data = tiny_data(seed);
        let episodes: Vec<EpisodeBatch> = (0..n).map(|i| episode(&model, &data[i], 3, 6, seed + 10 * i as u64)).collect();
        let p = model.params.cast::<f64>();
        let cfg = inner(0.3, steps);
        let loss = |q: &ParamSet<f64>| {
            outer_gradient(&model.config, q, &model.bn, &episodes, &cfg, BnMode::Batch).unwrap().loss
        };
        let og = outer_gradient(&model.config, &p, &model.bn, &episodes, &cfg, BnMode::Batch).unwrap();
        for (name, grad) in &og.grads {
            for (i, &a) in grad.data().iter().enumerate() {
                let fd = (loss(&with_entry(&p, name, i, h)) - loss(&with_entry(&p, name, i, -h))) / (2.0 * h);
                assert!(close(a, fd, 1e-4, 1e-7), "seed {seed} m={steps} n={n} {name}[{i}]: {a} vs {fd}");
            }
        }
    }
}

/// Gradient of the pooled query loss at the unadapted parameters.
fn plain_gradient(model: &Model, p: &ParamSet<f64>, episodes: &[EpisodeBatch]) -> Vec<(String, Tensor<f64>)> {
    let mut g = Graph::<f64>::new();
    let nodes = p.bind(&mut g).unwrap();
    let mut total = None;
    for ep in episodes {
        let (x, s) = ep.query.nodes(&mut g);
        let mut bn = face_core::norm::BnContext::new(BnMode::Batch, &model.bn);
        let v = model.config.encode_views(&mut g, &nodes, &mut bn, x, s).unwrap();
        let probs = model.config.meta_forward(&mut g, &nodes, &mut bn, &v).unwrap();
        let l = smooth_cross_entropy(&mut g, probs, &ep.query.labels, 0.1).unwrap().loss;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l).unwrap(),
        });
    }
    let names = p.names();
    let ids = nodes.ids(&names).unwrap();
    let grads = g.grad(total.unwrap(), &ids).unwrap();
    names.into_iter().zip(grads.iter().map(|&d| g.value(d).clone())).collect()
}

fn assert_grads_close(a: &[(String, Tensor<f64>)], b: &[(String, Tensor<f64>)], tol: f64) {
    assert_eq!(a.len(), b.len());
    for ((na, ta), (nb, tb)) in a.iter().zip(b) {
        assert_eq!(na, nb);
        assert!(ta.max_abs_diff(tb) <= tol, "{na}: {}", ta.max_abs_diff(tb));
    }
}

#[test]
fn zero_rate_or_zero_steps_reduce_to_the_plain_gradient() {
    for seed in 0..3 {
        let model = tiny_model(seed);
        let data = tiny_data(seed);
        let episodes = vec![episode(&model, &data[0], 2, 5, seed), episode(&model, &data[1], 2, 5, seed + 1)];
        let p = model.params.cast::<f64>();
        let want = plain_gradient(&model, &p, &episodes);
        for cfg in [inner(0.0, 3), inner(0.5, 0)] {
            let og = outer_gradient(&model.config, &p, &model.bn, &episodes, &cfg, BnMode::Batch).unwrap();
            assert_grads_close(&og.grads, &want, 1e-12);
        }
    }
}

#[test]
fn two_episode_gradient_is_the_sum_of_single_episode_gradients() {
    for seed in 0..3 {
        let model = tiny_model(seed);
        let data = tiny_data(seed);
        let e1 = episode(&model, &data[0], 3, 6, seed);
        let e2 = episode(&model, &data[2], 3, 6, seed + 7);
        let p = model.params.cast::<f64>();
        let cfg = inner(0.2, 2);
        let og = |eps: &[EpisodeBatch]| outer_gradient(&model.config, &p, &model.bn, eps, &cfg, BnMode::Batch).unwrap();
        let both = og(&[e1.clone(), e2.clone()]);
        let (a, b) = (og(&[e1]), og(&[e2]));
        assert!((both.loss - a.loss - b.loss).abs() < 1e-12);
        let sum: Vec<(String, Tensor<f64>)> = a
            .grads
            .iter()
            .zip(&b.grads)
            .map(|((n, x), (_, y))| {
                let d: Vec<f64> = x.data().iter().zip(y.data()).map(|(u, v)| u + v).collect();
                (n.clone(), Tensor::new(x.shape().to_vec(), d).unwrap())
            })
            .collect();
        assert_grads_close(&both.grads, &sum, 1e-12);
    }
}

/// Small model with both modules, big enough to exercise every partition.
fn small_model(seed: u64) -> (Model, Vec<FeatureSet>) {
    let cfg = ModelConfig {
        channels: 8,
        filters: 2,
        head_dim: 4,
        bottleneck: 6,
        ..ModelConfig::default()
    };
    let data = synth_generate(&SynthParams {
        num_subjects: 2,
        samples_per_class: 30,
        channels: 8,
        seed,
        ..SynthParams::default()
    })
    .unwrap();
    (Model::new(cfg, &ElectrodeMap::default_for(8).unwrap(), seed).unwrap(), data)
}

#[test]
fn inner_updates_never_touch_base_parameters() {
    let (model, data) = small_model(0);
    let fs = &data[0];
    let all: Vec<usize> = (0..fs.len()).collect();
    let views = model.encode(&model.batch(fs, &all).unwrap(), BnMode::Batch).unwrap();
    let base = model.params.names_in(Partition::Base);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut moved = 0;
    for trial in 0..1000 {
        let k = rng.gen_range(1..=5);
        let ep = sample_episode(fs, k, QuerySize::Count(1), rng.gen()).unwrap();
        let cfg = inner(rng.gen_range(0.001..0.5), rng.gen_range(1..=3));
        let adapted = adapt_views(&model, &views.select(&ep.support), &cfg).unwrap();
        for name in &base {
            let (a, b) = (adapted.get(name).unwrap(), model.params.get(name).unwrap());
            let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "trial {trial}: `{name}` changed");
        }
        if adapted != model.params {
            moved += 1;
        }
    }
    assert!(moved > 900, "meta parameters moved in only {moved} trials");
}

#[test]
fn on_graph_inner_loop_only_replaces_meta_nodes() {
    let (model, data) = small_model(1);
    let fs = &data[1];
    let ep = sample_episode(fs, 2, QuerySize::Count(1), 3).unwrap();
    let views = model.encode(&model.batch(fs, &ep.support).unwrap(), BnMode::Batch).unwrap();
    let mut g = Graph::<f32>::new();
    let p = model.params.bind(&mut g).unwrap();
    let v = views.nodes(&mut g);
    let names = model.meta_names();
    let res = inner_update(&mut g, &model.config, &p, &names, &model.bn, &v, &views.labels, &inner(0.1, 4)).unwrap();
    assert_eq!(res.losses.len(), 4);
    for name in model.params.names() {
        let same = res.adapted.get(&name).unwrap() == p.get(&name).unwrap();
        assert_eq!(same, model.params.partition_of(&name).unwrap() == Partition::Base, "{name}");
    }
}

#[test]
fn zero_inner_rate_is_the_identity() {
    let (model, data) = small_model(2);
    let fs = &data[0];
    for seed in 0..5 {
        let ep = sample_episode(fs, 3, QuerySize::Count(1), seed).unwrap();
        let support = model.batch(fs, &ep.support).unwrap();
        let adapted = test_adapt(&model, &support, &inner(0.0, 10), BnMode::Batch).unwrap();
        assert_eq!(adapted, model.params);
    }
}

#[test]
fn empty_inputs_are_errors() {
    let (model, data) = small_model(3);
    assert!(model.batch(&data[0], &[]).is_err());
    let one = model.batch(&data[0], &[0]).unwrap();
    let empty = Batch {
        labels: Vec::new(),
        ..one
    };
    assert!(test_adapt(&model, &empty, &inner(0.01, 1), BnMode::Batch).is_err());
    let p = model.params.clone();
    assert!(outer_gradient(&model.config, &p, &model.bn, &[], &inner(0.01, 1), BnMode::Batch).is_err());
    let ep = EpisodeBatch {
        subject: "x".into(),
        support: empty.clone(),
        query: model.batch(&data[0], &[0, 1]).unwrap(),
    };
    assert!(outer_gradient(&model.config, &p, &model.bn, &[ep], &inner(0.01, 1), BnMode::Batch).is_err());
    assert!(sample_episode(&data[0], 0, QuerySize::Remaining, 0).is_err());
}

fn quick_meta() -> MetaConfig {
    MetaConfig {
        episodes: 3,
        inner_steps: 2,
        query: 6,
        shots: 2,
        ..MetaConfig::default()
    }
}

#[test]
fn zero_epochs_and_zero_episodes_change_nothing() {
    let (model, data) = small_model(4);
    let mut m = model.clone();
    let cfg = PretrainConfig {
        epochs: 0,
        ..PretrainConfig::default()
    };
    let log = pretrain(&mut m, &data, &cfg, 0.1, 0.1).unwrap();
    assert!(log.losses.is_empty());
    assert_eq!(m.params, model.params);
    assert_eq!(m.bn, model.bn);

    let mcfg = MetaConfig {
        episodes: 0,
        ..quick_meta()
    };
    let mut state = MetaState::new(model.clone(), &mcfg);
    let log = meta_train(&mut state, &data, &mcfg).unwrap();
    assert!(log.losses.is_empty());
    assert_eq!(state.model.params, model.params);
    assert_eq!(state.model.bn, model.bn);
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let run = |seed: u64| {
        let (mut model, data) = small_model(5);
        let cfg = PretrainConfig {
            epochs: 1,
            seed,
            ..PretrainConfig::default()
        };
        let plog = pretrain(&mut model, &data, &cfg, 0.1, 0.1).unwrap();
        let mcfg = MetaConfig { seed, ..quick_meta() };
        let mut state = MetaState::new(model, &mcfg);
        let mlog = meta_train(&mut state, &data, &mcfg).unwrap();
        (plog, mlog, state.model.params, state.model.bn)
    };
    let (a, b) = (run(11), run(11));
    assert_eq!(a, b);
    let c = run(12);
    assert_ne!(a.2, c.2);
}

#[test]
fn one_epoch_fits_a_separable_two_class_set() {
    let data = synth_generate(&SynthParams {
        num_subjects: 2,
        samples_per_class: 100,
        num_classes: 2,
        channels: 8,
        shift_strength: 0.0,
        prototype_scale: 2.0,
        seed: 6,
        ..SynthParams::default()
    })
    .unwrap();
    let cfg = ModelConfig {
        num_classes: 2,
        ..small_model(6).0.config
    };
    let mut model = Model::new(cfg, &ElectrodeMap::default_for(8).unwrap(), 6).unwrap();
    let pcfg = PretrainConfig {
        epochs: 1,
        rate: 1e-2,
        ..PretrainConfig::default()
    };
    pretrain(&mut model, &data, &pcfg, 0.1, 0.1).unwrap();
    for fs in &data {
        let all: Vec<usize> = (0..fs.len()).collect();
        let probs = model.probs(&model.batch(fs, &all).unwrap(), BnMode::Running).unwrap();
        let hits = argmax_rows(&probs).iter().zip(fs.labels()).filter(|(a, b)| a == b).count();
        let acc = hits as f64 / fs.len() as f64;
        assert!(acc > 0.9, "{}: accuracy {acc}", fs.subject);
    }
}

#[test]
fn checkpoint_round_trip_preserves_the_model() {
    let (model, data) = small_model(7);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &model).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back.config, model.config);
    assert_eq!(back.params, model.params);
    assert_eq!(back.bn, model.bn);
    let batch = model.batch(&data[0], &[0, 5, 9, 40]).unwrap();
    assert_eq!(
        back.probs(&batch, BnMode::Running).unwrap(),
        model.probs(&batch, BnMode::Running).unwrap()
    );
}

#[test]
fn default_settings_are_accepted() {
    MetaConfig::default().validate().unwrap();
    PretrainConfig::default().validate().unwrap();
    RunConfig::default().validate().unwrap();
    tiny_config().validate().unwrap();
    assert!(MetaConfig {
        inner_rate: 0.0,
        ..MetaConfig::default()
    }
    .validate()
    .is_err());
}

/// Trials of one trained split on a three-subject shifted set.
fn split_trials() -> &'static Vec<TrialResult> {
    static TRIALS: OnceLock<Vec<TrialResult>> = OnceLock::new();
    TRIALS.get_or_init(|| {
        let channels = 16;
        let subjects = synth_generate(&SynthParams {
            num_subjects: 3,
            channels,
            seed: 8,
            ..SynthParams::default()
        })
        .unwrap();
        let ds = Dataset {
            subjects,
            electrodes: ElectrodeMap::default_for(channels).unwrap(),
        };
        let mut cfg = RunConfig::default().with_seed(8);
        cfg.model = ModelConfig {
            channels,
            filters: 4,
            head_dim: 8,
            bottleneck: 16,
            ..ModelConfig::default()
        };
        cfg.pretrain.epochs = 3;
        cfg.meta.episodes = 20;
        cfg.eval.repeats = 50;
        cfg.eval.shots = vec![5];
        let split = train_split(&ds, 0, &cfg).unwrap();
        let (trials, audit) = evaluate_split(&ds, &split, &cfg).unwrap();
        assert!(audit.is_clean());
        trials
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn adaptation_does_not_hurt_on_average() {
    let trials = split_trials();
    assert!(trials.len() >= 50);
    let post = mean(trials.iter().map(|t| t.accuracy));
    let pre = mean(trials.iter().map(|t| t.unadapted_accuracy));
    assert!(post >= pre, "adapted {post} vs unadapted {pre}");
}

#[test]
fn meta_trained_model_beats_pretraining_alone_at_five_shots() {
    let trials = split_trials();
    assert!(trials.len() >= 20);
    let face = mean(trials.iter().map(|t| t.accuracy));
    let base = mean(trials.iter().map(|t| t.pretrain_accuracy));
    assert!(face > base, "adapted {face} vs pretrained {base}");
}
