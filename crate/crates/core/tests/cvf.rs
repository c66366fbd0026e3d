use face_core::cvf::{align_view, cross_view_attention, fuse, self_attention, HeadNodes};
use face_diffcore::finite_diff::{central_gradient, close};
use face_diffcore::nn::sum_all;
use face_diffcore::{Graph, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn heads(g: &mut Graph<f64>, rng: &mut ChaCha8Rng, f: usize, dh: usize, l: usize) -> (Vec<HeadNodes>, NodeId) {
    let hs = (0..l)
        .map(|i| HeadNodes {
            q: g.param(&format!("q{i}"), rand_tensor(rng, &[f, dh])).unwrap(),
            k: g.param(&format!("k{i}"), rand_tensor(rng, &[f, dh])).unwrap(),
            v: g.param(&format!("v{i}"), rand_tensor(rng, &[f, dh])).unwrap(),
        })
        .collect();
    let wo = g.param("wo", rand_tensor(rng, &[l * dh, f])).unwrap();
    (hs, wo)
}

#[test]
fn alignment_zero_identity_and_hand_example() {
    let mut g = Graph::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let zs = g.constant(rand_tensor(&mut rng, &[3, 4]));
    let w0 = g.constant(Tensor::zeros(&[4, 4]));
    let b0 = g.constant(Tensor::zeros(&[4]));
    let y = align_view(&mut g, zs, w0, b0).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    let eye = g.constant(Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 }));
    let y = align_view(&mut g, zs, eye, b0).unwrap();
    assert_eq!(g.value(y), g.value(zs));

    let zs = g.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let w = g.constant(Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
    let b = g.constant(Tensor::new(vec![2], vec![0.5, -1.0]).unwrap());
    let y = align_view(&mut g, zs, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[1.0 * 3.0 + 2.0 * 5.0 + 0.5, 1.0 * 4.0 + 2.0 * 6.0 - 1.0]);
}

#[test]
fn single_token_attends_to_itself() {
    let mut g = Graph::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = g.constant(rand_tensor(&mut rng, &[5, 6]));
    let (hs, wo) = heads(&mut g, &mut rng, 6, 3, 2);
    let a = self_attention(&mut g, &[x], &hs, wo, &[0]).unwrap();
    for (h, (&w, &o)) in hs.iter().zip(a.weights[0].iter().zip(&a.head_outputs[0])) {
        assert!(g.value(w).data().iter().all(|&v| v == 1.0));
        let v = g.matmul(x, h.v).unwrap();
        assert_eq!(g.value(o), g.value(v));
    }
}

#[test]
fn attention_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let mut g = Graph::<f64>::new();
        let t = rng.gen_range(1..5);
        let tokens: Vec<NodeId> = (0..t)
            .map(|_| {
                let v = rand_tensor(&mut rng, &[4, 5]).map(|v| v * 20.0);
                g.constant(v)
            })
            .collect();
        let l = rng.gen_range(1..4);
        let (hs, wo) = heads(&mut g, &mut rng, 5, 2, l);
        let queries: Vec<usize> = (0..t).collect();
        let a = self_attention(&mut g, &tokens, &hs, wo, &queries).unwrap();
        for per_head in &a.weights {
            for &w in per_head {
                for row in g.value(w).data().chunks(t) {
                    assert!(row.iter().all(|&v| v >= 0.0));
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
                }
            }
        }
    }
}

#[test]
fn two_tokens_one_head_by_hand() {
    let mut g = Graph::<f64>::new();
    let zs = [0.5, -1.0, 2.0];
    let zg = [1.5, 0.25, -0.5];
    let q = [0.2, -0.4, 0.1, 0.3, 0.6, -0.2];
    let k = [-0.3, 0.5, 0.7, 0.1, -0.2, 0.4];
    let v = [0.9, -0.1, 0.3, 0.8, -0.6, 0.2];
    let wo = [1.0, 0.5, -0.5, -1.0, 0.25, 2.0];
    let s = g.constant(Tensor::new(vec![1, 3], zs.to_vec()).unwrap());
    let gn = g.constant(Tensor::new(vec![1, 3], zg.to_vec()).unwrap());
    let h = HeadNodes {
        q: g.constant(Tensor::new(vec![3, 2], q.to_vec()).unwrap()),
        k: g.constant(Tensor::new(vec![3, 2], k.to_vec()).unwrap()),
        v: g.constant(Tensor::new(vec![3, 2], v.to_vec()).unwrap()),
    };
    let o = g.constant(Tensor::new(vec![2, 3], wo.to_vec()).unwrap());
    let delta = cross_view_attention(&mut g, s, gn, &[h], o).unwrap();

    // every product written out, d_h = 2
    let q0 = zs[0] * q[0] + zs[1] * q[2] + zs[2] * q[4];
    let q1 = zs[0] * q[1] + zs[1] * q[3] + zs[2] * q[5];
    let ks0 = zs[0] * k[0] + zs[1] * k[2] + zs[2] * k[4];
    let ks1 = zs[0] * k[1] + zs[1] * k[3] + zs[2] * k[5];
    let kg0 = zg[0] * k[0] + zg[1] * k[2] + zg[2] * k[4];
    let kg1 = zg[0] * k[1] + zg[1] * k[3] + zg[2] * k[5];
    let vs0 = zs[0] * v[0] + zs[1] * v[2] + zs[2] * v[4];
    let vs1 = zs[0] * v[1] + zs[1] * v[3] + zs[2] * v[5];
    let vg0 = zg[0] * v[0] + zg[1] * v[2] + zg[2] * v[4];
    let vg1 = zg[0] * v[1] + zg[1] * v[3] + zg[2] * v[5];
    let root = 2f64.sqrt();
    let e_s = ((q0 * ks0 + q1 * ks1) / root).exp();
    let e_g = ((q0 * kg0 + q1 * kg1) / root).exp();
    let (a_s, a_g) = (e_s / (e_s + e_g), e_g / (e_s + e_g));
    let h0 = a_s * vs0 + a_g * vg0;
    let h1 = a_s * vs1 + a_g * vg1;
    let want = [h0 * wo[0] + h1 * wo[3], h0 * wo[1] + h1 * wo[4], h0 * wo[2] + h1 * wo[5]];
    for (got, want) in g.value(delta).data().iter().zip(want) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn zero_output_projection_gives_plain_concatenation() {
    let mut g = Graph::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = 310;
    let zs = g.constant(rand_tensor(&mut rng, &[2, f]));
    let zg = g.constant(rand_tensor(&mut rng, &[2, f]));
    let (hs, _) = heads(&mut g, &mut rng, f, 155, 2);
    let wo = g.constant(Tensor::zeros(&[310, f]));
    let zu = fuse(&mut g, zs, zg, &hs, wo).unwrap();
    assert_eq!(g.shape(zu), &[2, 620]);
    for i in 0..2 {
        let row = &g.value(zu).data()[i * 620..(i + 1) * 620];
        assert_eq!(&row[..f], &g.value(zs).data()[i * f..(i + 1) * f]);
        assert_eq!(&row[f..], &g.value(zg).data()[i * f..(i + 1) * f]);
    }
}

#[test]
fn batch_permutation_permutes_outputs() {
    let mut g = Graph::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, f) = (6, 5);
    let a = rand_tensor(&mut rng, &[n, f]);
    let b = rand_tensor(&mut rng, &[n, f]);
    let perm = [3, 0, 5, 1, 4, 2];
    let permute = |t: &Tensor<f64>| {
        let mut d = Vec::new();
        for &p in &perm {
            d.extend_from_slice(&t.data()[p * f..(p + 1) * f]);
        }
        Tensor::new(vec![n, f], d).unwrap()
    };
    let (hs, wo) = heads(&mut g, &mut rng, f, 3, 2);
    let (za, zb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = fuse(&mut g, za, zb, &hs, wo).unwrap();
    let (pa, pb) = (g.constant(permute(&a)), g.constant(permute(&b)));
    let pout = fuse(&mut g, pa, pb, &hs, wo).unwrap();
    let w = 2 * f;
    for (i, &p) in perm.iter().enumerate() {
        let x = &g.value(pout).data()[i * w..(i + 1) * w];
        let y = &g.value(out).data()[p * w..(p + 1) * w];
        for (x, y) in x.iter().zip(y) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn fusion_matches_finite_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f64>::new();
        let (n, f, dh, l) = (rng.gen_range(1..4), rng.gen_range(2..5), rng.gen_range(1..4), rng.gen_range(1..3));
        let zs = g.param("zs", rand_tensor(&mut rng, &[n, f])).unwrap();
        let zg = g.param("zg", rand_tensor(&mut rng, &[n, f])).unwrap();
        let (hs, wo) = heads(&mut g, &mut rng, f, dh, l);
        let zu = fuse(&mut g, zs, zg, &hs, wo).unwrap();
        let w = g.constant(rand_tensor(&mut rng, &[n, 2 * f]));
        let y = g.mul(zu, w).unwrap();
        let loss = sum_all(&mut g, y).unwrap();
        let mut names = vec!["zs".to_string(), "zg".into(), "wo".into()];
        for i in 0..l {
            names.extend([format!("q{i}"), format!("k{i}"), format!("v{i}")]);
        }
        let ids: Vec<NodeId> = names.iter().map(|s| g.named(s).unwrap()).collect();
        let grads = g.grad(loss, &ids).unwrap();
        let analytic: Vec<Tensor<f64>> = grads.iter().map(|&d| g.value(d).clone()).collect();
        for (name, a) in names.iter().zip(&analytic) {
            let fd = central_gradient(&mut g, loss, name, 1e-3).unwrap();
            for (x, y) in a.data().iter().zip(fd.data()) {
                assert!(close(*x, *y, 1e-3, 1e-6), "{name}: {x} vs {y}");
            }
        }
    }
}
