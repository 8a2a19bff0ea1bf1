//! Tape gradients versus the central-difference oracle, plus the analytic
//! forward cases of every differentiable op.

use lmim::ndtensor::gradcheck::{check, finite_diff_grad};
use lmim::ndtensor::kernels;
use lmim::{Error, Graph, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
const SINGLE_OP_TOL: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut rng(seed))
}

/// Contracts an arbitrary-shaped output with fixed random weights so every
/// output element contributes to the scalar root.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> lmim::Result<Var> {
    let w = g.constant(Tensor::randn(g.shape(y).to_vec(), 1.0, &mut rng(seed)));
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let a = randn(&[5, 7], 1);
    let b = randn(&[7, 3], 2);
    let r = check(&[a, b], H, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        weighted_sum(g, y, 3)
    })
    .unwrap();
    assert!(r.max_rel_err <= SINGLE_OP_TOL, "{r:?}");

    let bt = randn(&[3, 7], 4);
    let r = check(&[randn(&[5, 7], 5), bt], H, |g, v| {
        let y = g.matmul_nt(v[0], v[1])?;
        weighted_sum(g, y, 6)
    })
    .unwrap();
    assert!(r.max_rel_err <= SINGLE_OP_TOL, "{r:?}");
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    match err {
        Error::Shape { op, lhs, rhs } => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn softmax_rows_sum_to_one_and_gradient() {
    let x = randn(&[4, 6], 7);
    let y = kernels::softmax(&x, 1).unwrap();
    for r in 0..4 {
        let s: f64 = y.row(r).iter().sum();
        assert!((s - 1.0).abs() <= 1e-7);
    }
    for axis in 0..2 {
        let r = check(&[x.clone()], H, |g, v| {
            let y = g.softmax(v[0], axis)?;
            weighted_sum(g, y, 8)
        })
        .unwrap();
        assert!(r.max_rel_err <= SINGLE_OP_TOL, "axis {axis}: {r:?}");
    }
}

#[test]
fn log_softmax_gradient() {
    let r = check(&[randn(&[3, 5], 9)], H, |g, v| {
        let y = g.log_softmax(v[0])?;
        weighted_sum(g, y, 10)
    })
    .unwrap();
    assert!(r.max_rel_err <= SINGLE_OP_TOL, "{r:?}");
}

#[test]
fn layer_norm_analytic_cases() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(vec![1, 2], &[1.0, 3.0]).unwrap());
    let gamma = g.constant(Tensor::ones(vec![2]));
    let beta = g.constant(Tensor::zeros(vec![2]));
    let y = g.layer_norm(x, gamma, beta, 0.0).unwrap();
    assert_eq!(g.value(y).data(), &[-1.0, 1.0]);

    let c = g.constant(Tensor::full(vec![2, 4], 3.25));
    let gamma = g.constant(Tensor::ones(vec![4]));
    let beta = g.constant(Tensor::zeros(vec![4]));
    let y = g.layer_norm(c, gamma, beta, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_gradient() {
    let x = randn(&[3, 6], 11);
    let gamma = randn(&[6], 12);
    let beta = randn(&[6], 13);
    let r = check(&[x, gamma, beta], H, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(g, y, 14)
    })
    .unwrap();
    assert!(r.max_rel_err <= 1e-5, "{r:?}");
}

/// Standard normal CDF by composite Simpson quadrature of the density.
fn phi_by_quadrature(x: f64) -> f64 {
    let (lo, n) = (-12.0, 200_000);
    let h = (x - lo) / n as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut acc = pdf(lo) + pdf(x);
    for i in 1..n {
        let t = lo + i as f64 * h;
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(t);
    }
    acc * h / 3.0
}

#[test]
fn gelu_values_and_gradient() {
    assert_eq!(kernels::gelu_scalar(0.0f64), 0.0);
    assert!((kernels::gelu_scalar(12.0f64) - 12.0).abs() < 1e-6);
    let oracle = 1.0 * phi_by_quadrature(1.0);
    assert!((kernels::gelu_scalar(1.0f64) - oracle).abs() < 1e-12, "{oracle}");

    let r = check(&[randn(&[4, 5], 15)], H, |g, v| {
        let y = g.gelu(v[0])?;
        weighted_sum(g, y, 16)
    })
    .unwrap();
    assert!(r.max_rel_err <= SINGLE_OP_TOL, "{r:?}");
}

#[test]
fn elementwise_op_gradients() {
    let a = randn(&[3, 4], 17);
    // keep |b| away from zero so abs() stays differentiable under the probe
    let b = randn(&[3, 4], 18).map(|v| if v.abs() < 0.1 { v.signum() * 0.5 + v } else { v });
    let cases: Vec<(&str, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> lmim::Result<Var>>)> = vec![
        ("add", Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", Box::new(|g, v| g.mul(v[0], v[1]))),
        ("square", Box::new(|g, v| g.square(v[0]))),
        ("abs", Box::new(|g, v| g.abs(v[1]))),
        ("scale", Box::new(|g, v| g.scale(v[0], -2.5))),
        ("add_scalar", Box::new(|g, v| g.add_scalar(v[0], 0.75))),
        ("select", Box::new(|g, v| g.select((0..12).map(|i| i % 3 == 0).collect(), v[0], v[1]))),
    ];
    for (name, f) in cases {
        let r = check(&[a.clone(), b.clone()], H, |g, v| {
            let y = f(g, v)?;
            weighted_sum(g, y, 19)
        })
        .unwrap();
        assert!(r.max_rel_err <= SINGLE_OP_TOL, "{name}: {r:?}");
    }
}

#[test]
fn structural_op_gradients() {
    let a = randn(&[4, 3], 20);
    let b = randn(&[2, 3], 21);
    let bias = randn(&[3], 22);
    let sq = randn(&[4, 4], 23);
    let r = check(&[a, b, bias, sq], H, |g, v| {
        let c = g.concat_rows(v[0], v[1])?;
        let s = g.slice_rows(c, 1, 5)?;
        let gathered = g.gather_rows(c, &[5, 0, 0, 3])?;
        let t = g.add(s, gathered)?;
        let t = g.add_row(t, v[2])?;
        let rows = g.sum_rows(t)?;
        let d = g.diag(v[3])?;
        let m = g.mul(rows, d)?;
        let n = g.normalize_rows(t)?;
        let nm = g.mean_all(n)?;
        let sm = g.sum_all(m)?;
        g.add(sm, nm)
    })
    .unwrap();
    assert!(r.max_rel_err <= SINGLE_OP_TOL, "{r:?}");
}

#[test]
fn attention_gradient() {
    let q = randn(&[6, 8], 24);
    let k = randn(&[4, 8], 25);
    let v = randn(&[4, 8], 26);
    for (heads, groups) in [(1, 1), (2, 2), (4, 1)] {
        let r = check(&[q.clone(), k.clone(), v.clone()], H, |g, vars| {
            let y = g.attention(vars[0], vars[1], vars[2], heads, groups)?;
            weighted_sum(g, y, 27)
        })
        .unwrap();
        assert!(r.max_rel_err <= SINGLE_OP_TOL, "heads {heads} groups {groups}: {r:?}");
    }
}

#[test]
fn attention_groups_are_isolated() {
    let q = randn(&[4, 4], 28);
    let k = randn(&[6, 4], 29);
    let v = randn(&[6, 4], 30);
    let mut g = Graph::<f64>::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let packed = g.attention(qv, kv, vv, 2, 2).unwrap();
    let packed = g.value(packed).clone();
    for grp in 0..2 {
        let mut h = Graph::<f64>::new();
        let qs = h.constant(q.gather_rows(&[2 * grp, 2 * grp + 1]).unwrap());
        let ks = h.constant(k.gather_rows(&[3 * grp, 3 * grp + 1, 3 * grp + 2]).unwrap());
        let vs = h.constant(v.gather_rows(&[3 * grp, 3 * grp + 1, 3 * grp + 2]).unwrap());
        let single = h.attention(qs, ks, vs, 2, 1).unwrap();
        let expect = h.value(single);
        let got = packed.gather_rows(&[2 * grp, 2 * grp + 1]).unwrap();
        assert!(got.max_abs_diff(expect) < 1e-14);
    }
}

#[test]
fn backward_simple_roots() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap());
    let unused = g.param(Tensor::ones(vec![2]));
    let s = g.sum_all(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).data(), &[1.0, 1.0, 1.0]);
    assert_eq!(grads.get(unused).data(), &[0.0, 0.0]);

    let sq = g.square(x).unwrap();
    let n2 = g.sum_all(sq).unwrap();
    let grads = g.backward(n2).unwrap();
    assert_eq!(grads.get(x).data(), &[2.0, -4.0, 1.0]);

    assert!(matches!(g.backward(sq), Err(Error::Contract(_))));
}

#[test]
fn finite_diff_agrees_with_backward_on_composite() {
    let x = randn(&[3, 4], 31);
    let w = randn(&[4, 4], 32);
    let f = |t: &Tensor<f64>| -> lmim::Result<f64> {
        let mut g = Graph::new();
        let xv = g.constant(t.clone());
        let wv = g.constant(w.clone());
        let y = g.matmul(xv, wv)?;
        let y = g.gelu(y)?;
        let y = g.softmax(y, 1)?;
        let y = g.square(y)?;
        let s = g.sum_all(y)?;
        Ok(g.value(s).item())
    };
    let numeric = finite_diff_grad(f, &x, H).unwrap();
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let wv = g.constant(w.clone());
    let y = g.matmul(xv, wv).unwrap();
    let y = g.gelu(y).unwrap();
    let y = g.softmax(y, 1).unwrap();
    let y = g.square(y).unwrap();
    let root = g.sum_all(y).unwrap();
    let analytic = g.backward(root).unwrap().get(xv);
    assert!(analytic.max_abs_diff(&numeric) < 1e-8);
}

#[test]
fn nan_is_reported_with_op_name() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(vec![1, 2], &[1e308, 1e308]).unwrap());
    let err = g.add(x, x).unwrap_err();
    assert!(matches!(err, Error::NonFinite { op: "add" }), "{err:?}");
}

#[test]
fn detach_cuts_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap());
    let d = g.detach(x);
    let p = g.mul(x, d).unwrap();
    let s = g.sum_all(p).unwrap();
    // d/dx (x * stopgrad(x)) = stopgrad(x)
    assert_eq!(g.backward(s).unwrap().get(x).data(), &[1.0, 2.0]);
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let q = g.constant(Tensor::randn(vec![8, 16], 1.0, &mut rng(40)));
        let k = g.constant(Tensor::randn(vec![8, 16], 1.0, &mut rng(41)));
        let a = g.attention(q, k, k, 4, 2).unwrap();
        let y = g.gelu(a).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}

proptest! {
    #[test]
    fn softmax_extreme_rows_are_distributions(vals in prop::collection::vec(-1e4f64..1e4, 2..12)) {
        let n = vals.len();
        let x = Tensor::new(vec![1, n], vals).unwrap();
        let y = kernels::softmax(&x, 1).unwrap();
        prop_assert!(y.data().iter().all(|&v| v >= 0.0));
        prop_assert!((y.sum() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn cosine_is_scale_invariant(
        a in prop::collection::vec(-5.0f64..5.0, 6),
        b in prop::collection::vec(-5.0f64..5.0, 6),
        alpha in 0.01f64..100.0,
        beta in 0.01f64..100.0,
    ) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let base = lmim::ndtensor::cosine_sim(&a, &b).unwrap();
        let sa: Vec<f64> = a.iter().map(|v| v * alpha).collect();
        let sb: Vec<f64> = b.iter().map(|v| v * beta).collect();
        let scaled = lmim::ndtensor::cosine_sim(&sa, &sb).unwrap();
        prop_assert!((base - scaled).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&base));
    }
}
