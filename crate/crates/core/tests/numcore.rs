use proptest::prelude::*;
use quart_core::numcore::{grad_check, sinusoidal_positions, Graph, NodeId, Tensor};
use quart_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mat(rows: &[&[f64]]) -> Tensor<f64> {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k) = a.dims2().unwrap();
    let (_, n) = b.dims2().unwrap();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(i, p) * b.at(p, j);
            }
        }
    }
    out
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut g = Graph::new();
    let x = Tensor::randn(&[3, 4], 1.0, &mut rng(1));
    let i3 = g.constant(Tensor::identity(3));
    let xi = g.constant(x.clone());
    let y = g.matmul(i3, xi).unwrap();
    assert!(g.value(y).bit_eq(&x));

    let a = g.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let b = g.constant(mat(&[&[1.0], &[1.0]]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).shape(), &[2, 1]);
    assert_eq!(g.value(c).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut r = rng(42);
    let a = Tensor::<f64>::randn(&[5, 4], 1.0, &mut r);
    let b = Tensor::<f64>::randn(&[4, 2], 1.0, &mut r);
    let mut g = Graph::new();
    let (ia, ib) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(ia, ib).unwrap();
    let oracle = triple_loop(&a, &b);
    let diff = g
        .value(c)
        .data()
        .iter()
        .zip(&oracle)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-12, "max abs diff {diff}");
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::zeros(&[4]));
    let s = g.softmax(z, 0).unwrap();
    assert_eq!(g.value(s).data(), &[0.25; 4]);

    let big = g.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
    let s = g.softmax(big, 0).unwrap();
    assert_eq!(g.value(s).data(), &[1.0, 0.0]);

    let x = Tensor::<f64>::randn(&[7], 2.0, &mut rng(3));
    let xi = g.constant(x.clone());
    let s = g.softmax(xi, 0).unwrap();
    let z: f64 = x.data().iter().map(|v| v.exp()).sum();
    for (got, v) in g.value(s).data().iter().zip(x.data()) {
        let want = v.exp() / z;
        assert!(((got - want) / want).abs() < 1e-12);
    }
}

#[test]
fn softmax_along_first_axis_of_matrix() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(mat(&[&[0.0, 1.0], &[0.0, 3.0]]));
    let s = g.softmax(x, 0).unwrap();
    let v = g.value(s);
    assert_eq!(v.at(0, 0), 0.5);
    assert!((v.at(0, 1) + v.at(1, 1) - 1.0).abs() < 1e-15);
    assert!(v.at(1, 1) > v.at(0, 1));
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::<f64>::new();
    let x = Tensor::from_fn(&[6], |i| 0.1 + i as f64 * 0.7);
    let xi = g.constant(x.clone());
    let e = g.exp(xi).unwrap();
    let l = g.log(e).unwrap();
    for (a, b) in g.value(l).data().iter().zip(x.data()) {
        assert!(((a - b) / b).abs() < 1e-12);
    }

    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 3]));
    let c = g.concat(&[a, b], 0).unwrap();
    assert_eq!(g.shape(c), &[6, 3]);
    assert!(matches!(g.concat(&[a, b], 1), Err(Error::Dimension { .. })));

    let ones = g.constant(Tensor::ones(&[3, 5]));
    let s = g.sum(ones, 1).unwrap();
    assert_eq!(g.value(s).data(), &[5.0, 5.0, 5.0]);
    let m = g.mean(ones, 0).unwrap();
    assert_eq!(g.value(m).shape(), &[5]);

    let neg = g.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
    assert!(matches!(g.log(neg), Err(Error::Domain { .. })));
}

#[test]
fn embedding_lookup_rejects_out_of_range_ids() {
    let mut g = Graph::<f64>::new();
    let t = g.constant(Tensor::from_fn(&[4, 2], |i| i as f64));
    let e = g.embedding(t, &[3, 0, 3]).unwrap();
    assert_eq!(g.value(e).data(), &[6.0, 7.0, 0.0, 1.0, 6.0, 7.0]);
    assert!(g.embedding(t, &[4]).is_err());
}

#[test]
fn backward_linear_and_quadratic() {
    let x = Tensor::<f64>::randn(&[3, 2], 1.0, &mut rng(5)).with_requires_grad(true);
    let mut g = Graph::new();
    let xi = g.leaf(x.clone());
    let s = g.sum_all(xi);
    g.backward(s).unwrap();
    assert_eq!(g.grad(xi).unwrap(), &[1.0; 6]);

    let mut g = Graph::new();
    let xi = g.leaf(x.clone());
    let sq = g.mul(xi, xi).unwrap();
    let s = g.sum_all(sq);
    g.backward(s).unwrap();
    for (gv, xv) in g.grad(xi).unwrap().iter().zip(x.data()) {
        assert_eq!(*gv, 2.0 * xv);
    }
}

#[test]
fn backward_requires_scalar_and_accumulates() {
    let mut g = Graph::new();
    let xi = g.leaf(Tensor::<f64>::ones(&[3]).with_requires_grad(true));
    assert!(matches!(g.backward(xi), Err(Error::Contract(_))));
    let s = g.sum_all(xi);
    g.backward(s).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(xi).unwrap(), &[2.0; 3]);
    g.zero_grads();
    assert!(g.grad(xi).is_none());
}

#[test]
fn shared_input_sums_both_paths() {
    // f(x) = sum(exp(x) * x) + sum(x)
    let f = |g: &mut Graph<f64>, p: &[NodeId]| -> Result<NodeId> {
        let e = g.exp(p[0])?;
        let m = g.mul(e, p[0])?;
        let a = g.sum_all(m);
        let b = g.sum_all(p[0]);
        g.add(a, b)
    };
    let x = Tensor::<f64>::randn(&[2, 3], 0.5, &mut rng(9));
    let report = grad_check(f, &[x.clone()], 1e-6).unwrap();
    assert!(report.max_rel_err < 1e-8, "{report:?}");

    let mut g = Graph::new();
    let xi = g.leaf(x.clone().with_requires_grad(true));
    let loss = f(&mut g, &[xi]).unwrap();
    g.backward(loss).unwrap();
    for (gv, &xv) in g.grad(xi).unwrap().iter().zip(x.data()) {
        let want = xv.exp() * (1.0 + xv) + 1.0;
        assert!((gv - want).abs() < 1e-12);
    }
}

#[test]
fn grad_check_examples() {
    let sum_sq = |g: &mut Graph<f64>, p: &[NodeId]| -> Result<NodeId> {
        let m = g.mul(p[0], p[0])?;
        Ok(g.sum_all(m))
    };
    let theta = Tensor::<f64>::randn(&[5], 2.0, &mut rng(11));
    assert!(grad_check(sum_sq, &[theta.clone()], 1e-5).unwrap().max_rel_err < 1e-9);

    let xent = |g: &mut Graph<f64>, p: &[NodeId]| -> Result<NodeId> {
        let r = g.reshape(p[0], &[1, 4])?;
        let ls = g.log_softmax(r)?;
        let picked = g.pick(ls, &[2])?;
        let s = g.sum_all(picked);
        Ok(g.scale(s, -1.0))
    };
    let logits = Tensor::<f64>::randn(&[4], 1.0, &mut rng(12));
    assert!(grad_check(xent, &[logits], 1e-5).unwrap().max_rel_err < 1e-7);

    assert!(matches!(grad_check(sum_sq, &[theta.clone()], 1e-2), Err(Error::Input(_))));
    let blowup = |g: &mut Graph<f64>, p: &[NodeId]| -> Result<NodeId> {
        let k = g.scale(p[0], 1e6);
        let e = g.exp(k)?;
        Ok(g.sum_all(e))
    };
    assert!(grad_check(blowup, &[Tensor::ones(&[2])], 1e-5).is_err());
}

type OpFn = fn(&mut Graph<f64>, &[NodeId], &[usize]) -> Result<NodeId>;

/// Each case reduces to a scalar through a fixed random projection, so every
/// output coordinate contributes a distinct weight to the loss.
fn weighted_sum(g: &mut Graph<f64>, x: NodeId, seed: u64) -> Result<NodeId> {
    let w = Tensor::randn(g.shape(x), 1.0, &mut rng(seed ^ 0xabc));
    let wi = g.constant(w);
    let m = g.mul(x, wi)?;
    Ok(g.sum_all(m))
}

fn op_cases() -> Vec<(&'static str, usize, OpFn)> {
    vec![
        ("matmul", 2, |g, p, _| g.matmul(p[0], p[1])),
        ("add", 1, |g, p, _| {
            let y = g.scale(p[0], 0.5);
            g.add(p[0], y)
        }),
        ("sub", 2, |g, p, _| {
            let t = g.transpose(p[1])?;
            let y = g.matmul(p[0], p[1])?;
            let z = g.matmul(y, t)?;
            g.sub(z, p[0])
        }),
        ("mul", 1, |g, p, _| g.mul(p[0], p[0])),
        ("scale", 1, |g, p, _| Ok(g.scale(p[0], -1.7))),
        ("log", 1, |g, p, _| {
            let e = g.exp(p[0])?;
            let one = g.constant(Tensor::ones(g.shape(e)));
            let s = g.add(e, one)?;
            g.log(s)
        }),
        ("exp", 1, |g, p, _| g.exp(p[0])),
        ("relu", 1, |g, p, _| Ok(g.relu(p[0]))),
        ("mean0", 1, |g, p, _| g.mean(p[0], 0)),
        ("max0", 1, |g, p, _| g.max(p[0], 0)),
        ("sum1", 1, |g, p, _| g.sum(p[0], 1)),
        ("concat0", 1, |g, p, _| g.concat(&[p[0], p[0]], 0)),
        ("concat1", 2, |g, p, _| {
            let t = g.transpose(p[1])?;
            g.concat(&[p[0], t, p[0]], 0)
        }),
        ("transpose", 1, |g, p, _| g.transpose(p[0])),
        ("embedding", 1, |g, p, dims| {
            let idx: Vec<usize> = (0..5).map(|i| (i * 3) % dims[0]).collect();
            g.embedding(p[0], &idx)
        }),
        ("softmax1", 1, |g, p, _| g.softmax(p[0], 1)),
        ("softmax0", 1, |g, p, _| g.softmax(p[0], 0)),
        ("masked_softmax", 1, |g, p, dims| {
            let keep: Vec<bool> = (0..dims[0] * dims[1]).map(|i| i % dims[1] == 0 || i % 3 != 0).collect();
            g.masked_softmax(p[0], &keep)
        }),
        ("log_softmax", 1, |g, p, _| g.log_softmax(p[0])),
        ("layer_norm", 1, |g, p, dims| {
            let gain = g.constant(Tensor::from_fn(&[dims[1]], |i| 1.0 + 0.1 * i as f64));
            let bias = g.constant(Tensor::from_fn(&[dims[1]], |i| 0.05 * i as f64));
            g.layer_norm(p[0], gain, bias, 1e-5)
        }),
        ("slice", 1, |g, p, dims| {
            let r = g.slice_rows(p[0], 0, dims[0].max(2) - 1)?;
            let c = g.slice_cols(r, 1.min(dims[1] - 1), dims[1])?;
            Ok(c)
        }),
        ("pick", 1, |g, p, dims| {
            let idx: Vec<usize> = (0..dims[0]).map(|i| i % dims[1]).collect();
            g.pick(p[0], &idx)
        }),
        ("xlogx", 1, |g, p, _| {
            let s = g.softmax(p[0], 1)?;
            g.xlogx_sum(s)
        }),
    ]
}

#[test]
fn every_op_passes_grad_check_on_seeded_inputs() {
    for (name, arity, op) in op_cases() {
        for seed in 0..5u64 {
            let mut r = rng(100 + seed);
            let m = r.gen_range(2..=8);
            let k = r.gen_range(2..=8);
            let n = r.gen_range(2..=8);
            let dims = [m, k];
            let params: Vec<Tensor<f64>> = match arity {
                1 => vec![Tensor::randn(&[m, k], 1.0, &mut r)],
                _ => vec![Tensor::randn(&[m, k], 1.0, &mut r), Tensor::randn(&[k, n], 1.0, &mut r)],
            };
            let f = |g: &mut Graph<f64>, p: &[NodeId]| -> Result<NodeId> {
                let out = op(g, p, &dims)?;
                weighted_sum(g, out, seed)
            };
            let report = grad_check(f, &params, 1e-6).unwrap();
            assert!(report.max_rel_err < 1e-5, "{name} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn identical_op_sequences_are_bit_identical() {
    let run = || {
        let mut r = rng(77);
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::randn(&[6, 5], 1.0, &mut r).with_requires_grad(true));
        let b = g.leaf(Tensor::randn(&[5, 4], 1.0, &mut r).with_requires_grad(true));
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax(c, 1).unwrap();
        let l = g.xlogx_sum(s).unwrap();
        g.backward(l).unwrap();
        (g.value(s).clone(), g.grad(a).unwrap().to_vec())
    };
    let (s1, g1) = run();
    let (s2, g2) = run();
    assert!(s1.bit_eq(&s2));
    assert_eq!(
        g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn positional_code_at_origin() {
    let pe = sinusoidal_positions::<f64>(&[0, 1], 8);
    for j in 0..8 {
        assert_eq!(pe.at(0, j), if j % 2 == 0 { 0.0 } else { 1.0 });
    }
    assert_eq!(pe.at(1, 0), 1f64.sin());
}

proptest! {
    #[test]
    fn softmax_rows_lie_on_simplex(vals in prop::collection::vec(-50.0f64..50.0, 12), axis in 0usize..2) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 4], vals).unwrap());
        let s = g.softmax(x, axis).unwrap();
        let sums = g.sum(s, axis).unwrap();
        for v in g.value(sums).data() {
            prop_assert!((v - 1.0).abs() < 1e-6);
        }
        prop_assert!(g.value(s).data().iter().all(|&v| v >= 0.0));
    }
}
