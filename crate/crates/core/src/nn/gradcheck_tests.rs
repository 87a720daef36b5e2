//! Central finite-difference checks for every differentiable op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Keeps values at least `gap` away from zero (kinks of relu/clamp/min).
fn away_from_zero(t: Tensor, gap: f64) -> Tensor {
    t.map(|x| if x.abs() < gap { x.signum() * gap + x } else { x })
}

/// Scalar objective `sum(f(inputs) * weights)`; weights make every output
/// coordinate matter with a different coefficient.
fn objective<'g>(g: &'g Graph, out: Var<'g>, seed: u64) -> Var<'g> {
    let shape = out.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
    (out * w).sum()
}

fn max_rel_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = objective(&g, f(&g, &vars), 99);
    let grads = g.backward(loss);

    let eval = |perturbed: &[Tensor]| {
        let g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        objective(&g, f(&g, &vars), 99).item()
    };

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut numeric = vec![0.0; input.len()];
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            numeric[j] = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
        }
        let diff: f64 = analytic.data().iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nn).max(1e-12));
    }
    worst
}

fn assert_grad<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let err = max_rel_error(inputs, f);
    assert!(err < TOL, "{name}: relative gradient error {err:e}");
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
    let b = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
    let pos = rand_tensor(&mut rng, &[3, 4], 0.2, 3.0);
    assert_grad("add", &[a.clone(), b.clone()], |_, v| v[0] + v[1]);
    assert_grad("sub", &[a.clone(), b.clone()], |_, v| v[0] - v[1]);
    assert_grad("mul", &[a.clone(), b.clone()], |_, v| v[0] * v[1]);
    assert_grad("square", std::slice::from_ref(&a), |_, v| v[0] * v[0]);
    assert_grad("scale", std::slice::from_ref(&a), |_, v| v[0].scale(-1.7).add_scalar(0.3));
    assert_grad("tanh", std::slice::from_ref(&a), |_, v| v[0].tanh());
    assert_grad("sigmoid", std::slice::from_ref(&a), |_, v| v[0].sigmoid());
    assert_grad("exp", std::slice::from_ref(&a), |_, v| v[0].exp());
    assert_grad("ln", &[pos], |_, v| v[0].ln());
    assert_grad("softplus", std::slice::from_ref(&a), |_, v| v[0].softplus());
    let kinked = away_from_zero(a.clone(), 1e-3);
    assert_grad("relu", std::slice::from_ref(&kinked), |_, v| v[0].relu());
    assert_grad("clamp", &[kinked], |_, v| v[0].clamp(-1.0, 1.0));
    let far = b.map(|x| x + 0.05);
    assert_grad("minimum", &[a, far], |_, v| v[0].minimum(v[1]));
}

#[test]
fn matmul_variants() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
    let bt = rand_tensor(&mut rng, &[5, 4], -1.0, 1.0);
    let at = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    assert_grad("matmul", &[a.clone(), b.clone()], |_, v| v[0].matmul(v[1]));
    assert_grad("matmul_tb", &[a.clone(), bt.clone()], |_, v| v[0].matmul_t(v[1], false, true));
    assert_grad("matmul_ta", &[at.clone(), b.clone()], |_, v| v[0].matmul_t(v[1], true, false));
    assert_grad("matmul_tt", &[at, bt], |_, v| v[0].matmul_t(v[1], true, true));
    let ba = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let bb = rand_tensor(&mut rng, &[2, 4, 2], -1.0, 1.0);
    let bk = rand_tensor(&mut rng, &[2, 5, 4], -1.0, 1.0);
    assert_grad("bmm", &[ba.clone(), bb], |_, v| v[0].matmul(v[1]));
    assert_grad("bmm_tb", &[ba.clone(), bk], |_, v| v[0].matmul_t(v[1], false, true));
    assert_grad("bmm_shared_rhs", &[ba, b], |_, v| v[0].matmul(v[1]));
}

#[test]
fn affine_and_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[3, 2], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[2], -1.0, 1.0);
    assert_grad("affine", &[x.clone(), w, b.clone()], |_, v| layers::affine(v[0], v[1], v[2]));
    let s = rand_tensor(&mut rng, &[3], -1.0, 1.0);
    assert_grad("mul_broadcast", &[x, s], |_, v| v[0].mul_broadcast(v[1]));
    let cube = rand_tensor(&mut rng, &[2, 3, 3], -1.0, 1.0);
    let sq = rand_tensor(&mut rng, &[3, 3], -1.0, 1.0);
    assert_grad("add_broadcast_3d", &[cube, sq], |_, v| v[0].add_broadcast(v[1]));
}

#[test]
fn normalization_and_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[3, 6], -2.0, 2.0);
    let gain = rand_tensor(&mut rng, &[6], 0.5, 1.5);
    let shift = rand_tensor(&mut rng, &[6], -0.5, 0.5);
    assert_grad("layer_norm", &[x.clone(), gain, shift], |_, v| v[0].layer_norm(v[1], v[2]));
    assert_grad("softmax", std::slice::from_ref(&x), |_, v| v[0].softmax());
    let cube = rand_tensor(&mut rng, &[2, 3, 4], -2.0, 2.0);
    assert_grad("softmax_3d", &[cube], |_, v| v[0].softmax());
    assert_grad("mean", std::slice::from_ref(&x), |_, v| v[0].mean());
    let targets = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
    let logits = rand_tensor(&mut rng, &[6, 1], -3.0, 3.0);
    assert_grad("bce", &[logits], move |_, v| v[0].bce_with_logits(&targets));
}

#[test]
fn reshaping_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[6, 8], -1.0, 1.0);
    assert_grad("split_heads", std::slice::from_ref(&x), |_, v| v[0].split_heads(2, 3, 4));
    let y = rand_tensor(&mut rng, &[8, 3, 2], -1.0, 1.0);
    assert_grad("merge_heads", &[y], |_, v| v[0].merge_heads(2, 3, 4));
    assert_grad("gather_rows", std::slice::from_ref(&x), |_, v| v[0].gather_rows(&[5, 2, 2]));
    assert_grad("slice_cols", std::slice::from_ref(&x), |_, v| v[0].slice_cols(2, 3));
    let z = rand_tensor(&mut rng, &[6, 2], -1.0, 1.0);
    assert_grad("concat_cols", &[x.clone(), z], |_, v| v[0].concat_cols(v[1]));
    assert_grad("reshape", &[x], |_, v| v[0].reshape(&[4, 12]).tanh());
}

#[test]
fn attention_with_bias_gradients_over_seeds() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let q = rand_tensor(&mut rng, &[5, 4], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[5, 4], -1.0, 1.0);
        let v = rand_tensor(&mut rng, &[5, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[5, 5], -1.0, 0.0);
        assert_grad("attention", &[q, k, v, b], |_, x| attention_with_bias(x[0], x[1], x[2], Some(x[3])));
    }
}

#[test]
fn attention_zero_bias_matches_plain_and_single_token_returns_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let q = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    let k = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    let v = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    let g = Graph::new();
    let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v.clone()));
    let plain = attention_with_bias(qv, kv, vv, None).value();
    let zero = attention_with_bias(qv, kv, vv, Some(g.constant(Tensor::zeros(&[4, 4])))).value();
    assert_eq!(plain, zero);

    let one = |t: &Tensor| Tensor::new(&[1, 3], t.row(0).to_vec()).unwrap();
    let out = attention_with_bias(g.constant(one(&v)), g.constant(one(&v)), g.constant(one(&v)), None);
    assert_eq!(out.value().data(), v.row(0));
}

#[test]
fn softmax_rows_sum_to_one_and_sigmoid_midpoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[10, 7], -30.0, 30.0);
    let y = softmax_rows(&x);
    for r in 0..10 {
        assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert_eq!(sigmoid(0.0), 0.5);
    let g = Graph::new();
    let s = g.constant(Tensor::new(&[3], vec![-800.0, 0.0, 800.0]).unwrap()).sigmoid().value();
    assert!(s.data().iter().all(|p| (0.0..=1.0).contains(p)));
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let g = Graph::new();
    let x = g.constant(Tensor::full(&[2, 5], 3.25));
    let y = x.layer_norm(g.constant(Tensor::full(&[5], 1.0)), g.constant(Tensor::zeros(&[5]))).value();
    assert!(y.data().iter().all(|v| *v == 0.0));
}

#[test]
fn frozen_binding_receives_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "l", 3, 2, &mut rng);
    let g = Graph::new();
    let p = Bound::frozen(&g, &store);
    let x = g.input(rand_tensor(&mut rng, &[4, 3], -1.0, 1.0));
    let loss = lin.forward(&p, x).sum();
    let grads = g.backward(loss);
    assert_eq!(p.grads(&grads).max_abs(), 0.0);
    assert!(grads.get(x).is_some());
}
