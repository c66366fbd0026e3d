use face_core::backbone::{
    classify, conv3_encode, conv3_width, dgcn_encode, dgcn_encode_parts, dynamic_adjacency, laplacian, Activation,
};
use face_core::model::ModelConfig;
use face_core::norm::{BnContext, BnMode, BnRegistry, BN_EPS};
use face_diffcore::finite_diff::{central_gradient, close};
use face_diffcore::nn::{conv2d, smooth_cross_entropy, sum_all};
use face_diffcore::{Graph, NodeId, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn toy(channels: usize, bands: usize, reduction: usize, kernel: usize) -> ModelConfig {
    ModelConfig {
        channels,
        bands,
        reduction,
        kernel,
        filters: 2,
        head_dim: 2,
        bottleneck: 1,
        ..ModelConfig::default()
    }
}

/// Parameters of `cfg` with every entry drawn at random; the base
/// adjacency stays strictly positive.
fn random_params(cfg: &ModelConfig, seed: u64) -> (ParamSet<f64>, BnRegistry) {
    let (p, bn) = cfg.init(seed).unwrap();
    let mut p = p.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    for name in p.names() {
        let shape = p.get(&name).unwrap().shape().to_vec();
        let t = if name == "gcn.a0" {
            rand_tensor(&mut rng, &shape, 0.05, 1.0)
        } else if name.ends_with(".gamma") {
            rand_tensor(&mut rng, &shape, 0.5, 1.5)
        } else {
            rand_tensor(&mut rng, &shape, -0.8, 0.8)
        };
        p.set(&name, t).unwrap();
    }
    (p, bn)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `σ1(W2 σ2(W1 A0))` with sigmoid/ReLU, by explicit loops.
fn adjacency_loops(a0: &[f64], w1: &[f64], w2: &[f64], c: usize, r: usize) -> Vec<f64> {
    let k = c / r;
    let mut inner = vec![0.0; k * c];
    for i in 0..k {
        for j in 0..c {
            let mut s = 0.0;
            for m in 0..c {
                s += w1[i * c + m] * a0[m * c + j];
            }
            inner[i * c + j] = s.max(0.0);
        }
    }
    let mut out = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            let mut s = 0.0;
            for m in 0..k {
                s += w2[i * k + m] * inner[m * c + j];
            }
            out[i * c + j] = sigmoid(s);
        }
    }
    out
}

#[test]
fn adjacency_extents_and_zero_projection() {
    let cfg = ModelConfig::default();
    let (p, _) = cfg.init(0).unwrap();
    let mut g = Graph::<f32>::new();
    let n = p.bind(&mut g).unwrap();
    let a = dynamic_adjacency(
        &mut g,
        n.get("gcn.a0").unwrap(),
        n.get("gcn.w1").unwrap(),
        n.get("gcn.w2").unwrap(),
        Activation::Sigmoid,
        Activation::Relu,
    )
    .unwrap();
    assert_eq!(g.shape(a), &[62, 62]);
    assert!(g.value(a).is_finite());

    let w2 = g.constant(Tensor::zeros(&[62, 31]));
    let a = dynamic_adjacency(
        &mut g,
        n.get("gcn.a0").unwrap(),
        n.get("gcn.w1").unwrap(),
        w2,
        Activation::Sigmoid,
        Activation::Relu,
    )
    .unwrap();
    assert!(g.value(a).data().iter().all(|&v| v == 0.5));
}

#[test]
fn four_channel_adjacency_matches_loops() {
    let cfg = toy(4, 2, 2, 1);
    let (p, _) = random_params(&cfg, 0);
    let mut g = Graph::<f64>::new();
    let n = p.bind(&mut g).unwrap();
    let a = dynamic_adjacency(
        &mut g,
        n.get("gcn.a0").unwrap(),
        n.get("gcn.w1").unwrap(),
        n.get("gcn.w2").unwrap(),
        Activation::Sigmoid,
        Activation::Relu,
    )
    .unwrap();
    let want = adjacency_loops(
        p.get("gcn.a0").unwrap().data(),
        p.get("gcn.w1").unwrap().data(),
        p.get("gcn.w2").unwrap().data(),
        4,
        2,
    );
    for (x, y) in g.value(a).data().iter().zip(&want) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn laplacian_is_row_stochastic_and_fixes_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::<f64>::new();
    for c in [1, 3, 7, 62] {
        let a = g.constant(rand_tensor(&mut rng, &[c, c], 1e-3, 2.0));
        let l = laplacian(&mut g, a).unwrap();
        for row in g.value(l).data().chunks(c) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let eye = g.constant(Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 }));
        let l = laplacian(&mut g, eye).unwrap();
        assert_eq!(g.value(l), g.value(eye));
    }
    let mut zero_row = vec![1.0; 9];
    zero_row[3..6].iter_mut().for_each(|v| *v = 0.0);
    let a = g.constant(Tensor::new(vec![3, 3], zero_row).unwrap());
    assert!(laplacian(&mut g, a).is_err());
}

/// Per-feature batch norm over the batch axis of `rows` (`n` rows of `f`).
fn bn_loops(x: &[f64], n: usize, f: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * f];
    for j in 0..f {
        let mean = (0..n).map(|i| x[i * f + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x[i * f + j] - mean).powi(2)).sum::<f64>() / n as f64;
        for i in 0..n {
            out[i * f + j] = (x[i * f + j] - mean) / (var + BN_EPS).sqrt() * gamma[j] + beta[j];
        }
    }
    out
}

/// Zero-padded `1×K` correlation along the band axis of `n×C×B`.
fn band_conv_loops(x: &[f64], n: usize, c: usize, b: usize, k: &[f64]) -> Vec<f64> {
    let half = k.len() / 2;
    let mut out = vec![0.0; n * c * b];
    for s in 0..n {
        for ch in 0..c {
            for j in 0..b {
                let mut acc = 0.0;
                for (t, &w) in k.iter().enumerate() {
                    let src = j as isize + t as isize - half as isize;
                    if src >= 0 && (src as usize) < b {
                        acc += w * x[(s * c + ch) * b + src as usize];
                    }
                }
                out[(s * c + ch) * b + j] = acc;
            }
        }
    }
    out
}

/// The whole graph branch on batch statistics, by explicit loops.
fn dgcn_loops(p: &ParamSet<f64>, x: &[f64], n: usize, c: usize, b: usize, r: usize) -> Vec<f64> {
    let get = |name: &str| p.get(name).unwrap().data().to_vec();
    let a = adjacency_loops(&get("gcn.a0"), &get("gcn.w1"), &get("gcn.w2"), c, r);
    let mut lap = a.clone();
    for i in 0..c {
        let d: f64 = a[i * c..(i + 1) * c].iter().sum();
        lap[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= d);
    }
    let f = c * b;
    let h = band_conv_loops(x, n, c, b, &get("gcn.theta1"));
    let h = bn_loops(&h, n, f, &get("gcn.bn1.gamma"), &get("gcn.bn1.beta"));
    let h: Vec<f64> = h.iter().map(|v| v.max(0.0)).collect();
    let h = band_conv_loops(&h, n, c, b, &get("gcn.theta2"));
    let h = bn_loops(&h, n, f, &get("gcn.bn2.gamma"), &get("gcn.bn2.beta"));
    let mut agg = vec![0.0; n * f];
    for s in 0..n {
        for i in 0..c {
            for j in 0..b {
                let mut acc = x[(s * c + i) * b + j];
                for m in 0..c {
                    acc += lap[i * c + m] * h[(s * c + m) * b + j];
                }
                agg[(s * c + i) * b + j] = acc;
            }
        }
    }
    bn_loops(&agg, n, f, &get("gcn.bn3.gamma"), &get("gcn.bn3.beta"))
}

#[test]
fn graph_branch_matches_loop_implementation() {
    let mut case = 0;
    for (c, r) in [(1, 1), (2, 1), (2, 2), (3, 1), (3, 3), (4, 2), (4, 4)] {
        for b in [1, 2] {
            for (k, n) in [(1, 2), (3, 2), (5, 3)] {
                case += 1;
                let cfg = toy(c, b, r, k);
                let (p, bn) = random_params(&cfg, case);
                let mut rng = ChaCha8Rng::seed_from_u64(case);
                let x = rand_tensor(&mut rng, &[n, c, b], -2.0, 2.0);
                let mut g = Graph::<f64>::new();
                let nodes = p.bind(&mut g).unwrap();
                let xn = g.constant(x.clone());
                let mut ctx = BnContext::new(BnMode::Batch, &bn);
                let z = dgcn_encode(&mut g, &nodes, &mut ctx, xn, &cfg.dgcn()).unwrap();
                assert_eq!(g.shape(z), &[n, c * b]);
                let want = dgcn_loops(&p, x.data(), n, c, b, r);
                for (got, want) in g.value(z).data().iter().zip(&want) {
                    assert!((got - want).abs() < 1e-5, "C={c} B={b} K={k}: {got} vs {want}");
                }
            }
        }
    }
}

#[test]
fn toy_batch_of_two_three_channels_two_bands() {
    let cfg = toy(3, 2, 3, 3);
    let (p, bn) = random_params(&cfg, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = rand_tensor(&mut rng, &[2, 3, 2], -1.0, 1.0);
    let mut g = Graph::<f64>::new();
    let nodes = p.bind(&mut g).unwrap();
    let xn = g.constant(x.clone());
    let mut ctx = BnContext::new(BnMode::Batch, &bn);
    let parts = dgcn_encode_parts(&mut g, &nodes, &mut ctx, xn, &cfg.dgcn()).unwrap();
    // the aggregate is L·H + X with the branch's own Laplacian
    let (l, h) = (g.value(parts.laplacian).clone(), g.value(parts.h).clone());
    for s in 0..2 {
        for i in 0..3 {
            for j in 0..2 {
                let mut want = x.data()[(s * 3 + i) * 2 + j];
                for m in 0..3 {
                    want += l.data()[i * 3 + m] * h.data()[(s * 3 + m) * 2 + j];
                }
                let got = g.value(parts.aggregate).data()[(s * 3 + i) * 2 + j];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }
    let want = dgcn_loops(&p, x.data(), 2, 3, 2, 3);
    for (got, want) in g.value(parts.z).data().iter().zip(&want) {
        assert!((got - want).abs() < 1e-5);
    }
}

#[test]
fn spatial_encoder_width_and_zero_propagation() {
    assert_eq!(conv3_width(32), 2048);
    let cfg = ModelConfig::default();
    let (p, bn) = cfg.init(0).unwrap();
    let mut g = Graph::<f32>::new();
    let nodes = p.bind(&mut g).unwrap();
    let s = g.constant(Tensor::zeros(&[2, 5, 32, 32]));
    let pre = conv2d(&mut g, s, nodes.get("cnn.conv1.w").unwrap(), Some(nodes.get("cnn.conv1.b").unwrap()), (1, 1))
        .unwrap();
    assert!(g.value(pre).data().iter().all(|&v| v == 0.0));
    let mut ctx = BnContext::new(BnMode::Running, &bn);
    let z = conv3_encode(&mut g, &nodes, &mut ctx, s).unwrap();
    assert_eq!(g.shape(z), &[2, 2048]);
    assert!(g.value(z).data().iter().all(|&v| v == 0.0));

    let bad = g.constant(Tensor::zeros(&[1, 5, 16, 16]));
    assert!(conv3_encode(&mut g, &nodes, &mut ctx, bad).is_err());
}

#[test]
fn single_channel_convolution_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = rand_tensor(&mut rng, &[1, 1, 8, 8], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[1, 1, 3, 3], -1.0, 1.0);
    let bias = 0.25;
    let mut g = Graph::<f64>::new();
    let (xn, wn) = (g.constant(x.clone()), g.constant(w.clone()));
    let bn = g.constant(Tensor::new(vec![1], vec![bias]).unwrap());
    let y = conv2d(&mut g, xn, wn, Some(bn), (1, 1)).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 8, 8]);
    for i in 0..8 {
        for j in 0..8 {
            let mut want = bias;
            for di in 0..3 {
                for dj in 0..3 {
                    let (si, sj) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                    if (0..8).contains(&si) && (0..8).contains(&sj) {
                        want += w.data()[di * 3 + dj] * x.data()[si as usize * 8 + sj as usize];
                    }
                }
            }
            assert!((g.value(y).data()[i * 8 + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn classifier_closed_forms() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0]).unwrap());
    let w = g.constant(Tensor::zeros(&[3, 4]));
    let b = g.constant(Tensor::zeros(&[4]));
    let p = classify(&mut g, z, w, b).unwrap();
    assert!(g.value(p).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    // logits (1, 0) through an identity head
    let z = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
    let eye = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let zero = g.constant(Tensor::zeros(&[2]));
    let p = classify(&mut g, z, eye, zero).unwrap();
    let v = g.value(p).data().to_vec();
    assert!((v[0] - 0.7311).abs() < 1e-4 && (v[1] - 0.2689).abs() < 1e-4);

    // a shared shift of every logit changes nothing
    let shifted = g.constant(Tensor::new(vec![2], vec![7.5, 7.5]).unwrap());
    let q = classify(&mut g, z, eye, shifted).unwrap();
    for (a, b) in g.value(q).data().iter().zip(&v) {
        assert!((a - b).abs() < 1e-12);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = g.constant(rand_tensor(&mut rng, &[16, 6], -30.0, 30.0));
    let w = g.constant(rand_tensor(&mut rng, &[6, 5], -3.0, 3.0));
    let b = g.constant(rand_tensor(&mut rng, &[5], -3.0, 3.0));
    let p = classify(&mut g, z, w, b).unwrap();
    for row in g.value(p).data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn smoothed_cross_entropy_closed_forms() {
    let mut g = Graph::<f64>::new();
    let perfect = g.constant(Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
    let l = smooth_cross_entropy(&mut g, perfect, &[0, 2], 0.0).unwrap();
    assert_eq!(g.value(l.loss).item(), 0.0);
    assert!(!l.clamped);

    let uniform = g.constant(Tensor::full(&[4, 3], 1.0 / 3.0));
    let l = smooth_cross_entropy(&mut g, uniform, &[0, 1, 2, 1], 0.0).unwrap();
    assert!((g.value(l.loss).item() - 3f64.ln()).abs() < 1e-12);

    let p = g.constant(Tensor::new(vec![1, 3], vec![0.8, 0.1, 0.1]).unwrap());
    let l = smooth_cross_entropy(&mut g, p, &[0], 0.1).unwrap();
    let want = -((0.9 + 0.1 / 3.0) * 0.8f64.ln() + 2.0 * (0.1 / 3.0) * 0.1f64.ln());
    assert!((g.value(l.loss).item() - want).abs() < 1e-12);
    assert!((g.value(l.loss).item() - 0.3617).abs() < 1e-4);

    // a zero at a smoothed target is clamped and flagged
    let l = smooth_cross_entropy(&mut g, perfect, &[0, 2], 0.1).unwrap();
    assert!(l.clamped && g.value(l.loss).item().is_finite());
}

/// Random weighting, so batch-normalized outputs do not sum to a constant.
fn weighted_loss(g: &mut Graph<f64>, out: NodeId, rng: &mut ChaCha8Rng) -> NodeId {
    let shape = g.shape(out).to_vec();
    let w = g.constant(rand_tensor(rng, &shape, -1.0, 1.0));
    let y = g.mul(out, w).unwrap();
    sum_all(g, y).unwrap()
}

fn check_all(g: &mut Graph<f64>, loss: NodeId, names: &[String], h: f64, context: &str) {
    let ids: Vec<NodeId> = names.iter().map(|n| g.named(n).unwrap()).collect();
    let grads = g.grad(loss, &ids).unwrap();
    let analytic: Vec<Tensor<f64>> = grads.iter().map(|&d| g.value(d).clone()).collect();
    for (name, a) in names.iter().zip(&analytic) {
        let fd = central_gradient(g, loss, name, h).unwrap();
        for (i, (&x, &y)) in a.data().iter().zip(fd.data()).enumerate() {
            assert!(close(x, y, 1e-3, 1e-6), "{context} {name}[{i}]: {x} vs {y}");
        }
    }
}

#[test]
fn encoders_match_finite_differences() {
    for seed in 0..6 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, b) = (rng.gen_range(2..5), rng.gen_range(1..4));
        let cfg = toy(c, b, if c % 2 == 0 { 2 } else { 1 }, 3);
        let (p, bn) = random_params(&cfg, seed);
        let mut g = Graph::<f64>::new();
        let nodes = p.bind(&mut g).unwrap();
        let x = g.param("x", rand_tensor(&mut rng, &[6, c, b], -1.0, 1.0)).unwrap();
        let mut ctx = BnContext::new(BnMode::Batch, &bn);
        let z = dgcn_encode(&mut g, &nodes, &mut ctx, x, &cfg.dgcn()).unwrap();
        let loss = weighted_loss(&mut g, z, &mut rng);
        let mut names: Vec<String> = p.names().into_iter().filter(|n| n.starts_with("gcn.")).collect();
        names.push("x".into());
        check_all(&mut g, loss, &names, 1e-3, "graph branch");
    }
    for seed in 0..2 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let cfg = ModelConfig { bands: 1, ..toy(2, 1, 1, 1) };
        let (p, bn) = random_params(&cfg, seed);
        let mut g = Graph::<f64>::new();
        let nodes = p.bind(&mut g).unwrap();
        let s = g.constant(rand_tensor(&mut rng, &[2, 1, 32, 32], -1.0, 1.0));
        let mut ctx = BnContext::new(BnMode::Batch, &bn);
        let z = conv3_encode(&mut g, &nodes, &mut ctx, s).unwrap();
        let loss = weighted_loss(&mut g, z, &mut rng);
        let names: Vec<String> = p
            .names()
            .into_iter()
            .filter(|n| n.starts_with("cnn.") && !n.starts_with("cnn.align"))
            .collect();
        // thousands of ReLU and pooling kinks: a step of 1e-3 would cross some
        check_all(&mut g, loss, &names, 1e-6, "spatial branch");
    }
}
