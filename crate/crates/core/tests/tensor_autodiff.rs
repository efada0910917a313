mod common;

use common::{max_rel_diff, naive_conv, rng, uniform};
use deepmoe::gradcheck::{finite_diff_gradcheck, finite_diff_gradcheck_with, GradCheckable, GradcheckOptions, NumericPrecision};
use deepmoe::kernels::{conv2d_direct, conv2d_im2col};
use deepmoe::optim::Sgd;
use deepmoe::{Graph, ParamGroup, ParamSet, Result, Scalar, Tensor, Var};
use proptest::prelude::*;

#[test]
fn conv_matches_six_loop_oracle_on_fixed_case() {
    let mut r = rng(1);
    let x = uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut r);
    let k = uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut r);
    let want = naive_conv(&x, &k, 1, 0);
    let mut g = Graph::new();
    let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
    let y = g.conv2d(xv, kv, 1, 0).unwrap();
    assert_eq!(g.shape(y), [1, 3, 2, 2]);
    assert!(max_rel_diff(g.value(y), &want) < 1e-5);
}

fn conv_case() -> impl Strategy<Value = (Vec<usize>, usize, usize, usize, usize, u64)> {
    (1usize..=4, 1usize..=4, 1usize..=4, 1usize..=4, 1usize..=4, 1usize..=2, 0usize..=2, any::<u64>()).prop_filter_map(
        "kernel must fit",
        |(b, c, h, w, k, stride, pad, seed)| {
            let (co, kk) = (1 + (seed % 4) as usize, k.min(h + 2 * pad).min(w + 2 * pad));
            (kk >= 1 && pad < kk).then_some((vec![b, c, h, w], kk, co, stride, pad, seed))
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn conv_paths_agree_with_oracle((shape, k, co, stride, pad, seed) in conv_case()) {
        let mut r = rng(seed);
        let x = uniform(&shape, -1.0, 1.0, &mut r);
        let kern = uniform(&[shape[1], k, k, co], -1.0, 1.0, &mut r);
        let want = naive_conv(&x, &kern, stride, pad);
        prop_assert!(max_rel_diff(&conv2d_im2col(&x, &kern, stride, pad).unwrap(), &want) < 1e-5);
        prop_assert!(max_rel_diff(&conv2d_direct(&x, &kern, stride, pad).unwrap(), &want) < 1e-5);
        let x32 = x.cast::<f32>();
        let k32 = kern.cast::<f32>();
        prop_assert!(max_rel_diff(&conv2d_im2col(&x32, &k32, stride, pad).unwrap().cast(), &want) < 1e-5);
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..8, seed in any::<u64>()) {
        let mut r = rng(seed);
        let logits = uniform(&[rows, cols], -30.0, 30.0, &mut r).cast::<f32>();
        let mut g = Graph::inference();
        let v = g.constant(logits);
        let p = g.softmax(v).unwrap();
        for row in g.value(p).data().chunks(cols) {
            prop_assert!((row.iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn relu_is_nonnegative_and_idempotent(v in proptest::collection::vec(-5.0f64..5.0, 1..32)) {
        let n = v.len();
        let mut g = Graph::inference();
        let x = g.constant(Tensor::new(vec![n], v).unwrap());
        let a = g.relu(x);
        let b = g.relu(a);
        prop_assert!(g.value(a).data().iter().all(|&y| y >= 0.0));
        prop_assert_eq!(g.value(a), g.value(b));
    }
}

#[test]
fn linear_matches_hand_loop() {
    let mut r = rng(3);
    let x = uniform(&[1, 3], -1.0, 1.0, &mut r);
    let w = uniform(&[3, 2], -1.0, 1.0, &mut r);
    let b = uniform(&[2], -1.0, 1.0, &mut r);
    let mut g = Graph::inference();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.linear(xv, wv, Some(bv)).unwrap();
    for m in 0..2 {
        let want: f64 = (0..3).map(|d| x.data()[d] * w.data()[d * 2 + m]).sum::<f64>() + b.data()[m];
        assert!((g.value(y).data()[m] - want).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_matches_explicit_formula() {
    let mut r = rng(4);
    let z = uniform(&[2, 3], -2.0, 2.0, &mut r);
    let labels = [2, 0];
    let mut g = Graph::inference();
    let v = g.constant(z.clone());
    let l = g.softmax_cross_entropy(v, &labels).unwrap();
    let want: f64 = z
        .data()
        .chunks(3)
        .zip(labels)
        .map(|(row, y)| row.iter().map(|v| v.exp()).sum::<f64>().ln() - row[y])
        .sum::<f64>()
        / 2.0;
    assert!((g.value(l).item() - want).abs() < 1e-12);
}

/// `sum(relu(x · W))`.
struct ReluNet;

impl GradCheckable for ReluNet {
    fn loss<S: Scalar>(&self, g: &mut Graph<S>, p: &ParamSet<S>, input: &Tensor<S>) -> Result<Var> {
        let x = g.constant(input.clone());
        let w = g.param(p, "w")?;
        let z = g.linear(x, w, None)?;
        let a = g.relu(z);
        Ok(g.sum(a))
    }
}

/// Two convs with a ReLU between, summed.
struct TwoConv;

impl GradCheckable for TwoConv {
    fn loss<S: Scalar>(&self, g: &mut Graph<S>, p: &ParamSet<S>, input: &Tensor<S>) -> Result<Var> {
        let x = g.constant(input.clone());
        let k1 = g.param(p, "k1")?;
        let k2 = g.param(p, "k2")?;
        let h = g.conv2d(x, k1, 1, 1)?;
        let h = g.relu(h);
        let y = g.conv2d(h, k2, 1, 0)?;
        let y = g.relu(y);
        Ok(g.sum(y))
    }
}

fn param_set(entries: &[(&str, Tensor<f64>)]) -> ParamSet<f64> {
    let mut p = ParamSet::default();
    for (n, t) in entries {
        p.insert(n, t.clone(), ParamGroup::Base, true);
    }
    p
}

#[test]
fn relu_net_gradients_match_central_differences_at_f32() {
    let mut r = rng(5);
    let p = param_set(&[("w", uniform(&[4, 3], -1.0, 1.0, &mut r))]).cast::<f32>();
    let x = uniform(&[5, 4], -1.0, 1.0, &mut r).cast::<f32>();
    // f32 analytic gradients against f64 central differences.
    let report = finite_diff_gradcheck_with(&ReluNet, &p, &x, GradcheckOptions::new(12, 1e-3, 2)).unwrap();
    assert_eq!(report.checked(), 12);
    assert!(report.max_rel_error < 1e-3, "{report:?}");
    // Same-precision differences are limited by f32 cancellation, large gradients still agree.
    let mut opts = GradcheckOptions::new(12, 1e-3, 2);
    opts.numeric = NumericPrecision::Native;
    let native = finite_diff_gradcheck_with(&ReluNet, &p, &x, opts).unwrap();
    assert!(native.checks.iter().filter(|c| c.analytic.abs() > 0.5).all(|c| c.rel_error < 1e-3), "{native:?}");
}

#[test]
fn two_layer_conv_gradients_match_central_differences() {
    let mut r = rng(6);
    let p = param_set(&[("k1", uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut r)), ("k2", uniform(&[3, 2, 2, 2], -1.0, 1.0, &mut r))]);
    let x = uniform(&[2, 2, 4, 4], -1.0, 1.0, &mut r);
    assert!(finite_diff_gradcheck(&TwoConv, &p, &x, 9, 5, 1e-5).unwrap() < 1e-6);
    let p32 = p.cast::<f32>();
    assert!(finite_diff_gradcheck(&TwoConv, &p32, &x.cast(), 9, 5, 1e-3).unwrap() < 1e-3);
}

fn train_steps(seed: u64, steps: usize) -> ParamSet<f32> {
    let mut r = rng(seed);
    let mut p = param_set(&[("k1", uniform(&[2, 3, 3, 3], -0.5, 0.5, &mut r)), ("k2", uniform(&[3, 2, 2, 2], -0.5, 0.5, &mut r))])
        .cast::<f32>();
    let x = uniform(&[2, 2, 4, 4], -1.0, 1.0, &mut r).cast::<f32>();
    let mut opt = Sgd::new(0.9, 5e-4);
    for _ in 0..steps {
        let mut g = Graph::new();
        let l = TwoConv.loss(&mut g, &p, &x).unwrap();
        g.backward(l).unwrap();
        let grads = g.param_grads(&p);
        opt.step(&mut p, grads, 0.01).unwrap();
    }
    p
}

#[test]
fn identical_seeds_give_bitwise_identical_parameters() {
    let a = train_steps(11, 7);
    let b = train_steps(11, 7);
    for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), tb.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
    assert_ne!(a.checksum(None), train_steps(12, 7).checksum(None));
}
