mod common;

use common::{max_abs_diff, max_rel_diff, naive_conv, rng, uniform};
use deepmoe::moe::{gate_forward, gate_vector, gated_conv_dense, gated_conv_sparse, l1_gate_penalty, moe_oracle, GateHead};
use deepmoe::{Graph, ParamSet, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn dense(x: &Tensor<f64>, k: &Tensor<f64>, gates: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let mut g = Graph::new();
    let (xv, kv, gv) = (g.constant(x.clone()), g.constant(k.clone()), g.constant(gates.clone()));
    let y = gated_conv_dense(&mut g, xv, kv, gv, stride, pad).unwrap();
    g.value(y).clone()
}

/// Per-example oracle outputs stacked to `[B, C_out, H', W']`.
fn oracle(x: &Tensor<f64>, k: &Tensor<f64>, gates: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let b = x.shape()[0];
    let parts: Vec<Tensor<f64>> = (0..b)
        .map(|i| {
            let xi = Tensor::new(x.shape()[1..].to_vec(), x.slab(i).to_vec()).unwrap();
            moe_oracle(&xi, k, gates.slab(i), stride, pad).unwrap()
        })
        .collect();
    Tensor::stack(&parts.iter().collect::<Vec<_>>()).unwrap()
}

/// Gate pattern: 0 = random positive, 1 = random with exact zeros, 2 = all zero, 3 = all one.
fn gates_for(b: usize, c: usize, pattern: u8, r: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(&[b, c], |_| match pattern {
        0 => r.random_range(0.01..2.0),
        1 => {
            if r.random_bool(0.5) {
                0.0
            } else {
                r.random_range(0.01..2.0)
            }
        }
        2 => 0.0,
        _ => 1.0,
    })
}

type Case = (Vec<usize>, usize, usize, usize, usize, u8, u64);

fn case() -> impl Strategy<Value = Case> {
    (1usize..=4, 1usize..=4, 1usize..=4, 1usize..=4, 1usize..=4, 1usize..=4, 1usize..=2, 0usize..=1, 0u8..4, any::<u64>())
        .prop_filter_map("kernel must fit", |(b, c, h, w, k, co, stride, pad, pat, seed)| {
            let k = k.min(h + 2 * pad).min(w + 2 * pad);
            (pad < k).then_some((vec![b, c, h, w], k, co, stride, pad, pat, seed))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn dense_equals_mixture_oracle_and_sparse_equals_dense((shape, k, co, stride, pad, pat, seed) in case()) {
        let mut r = rng(seed);
        let x = uniform(&shape, -1.0, 1.0, &mut r);
        let kern = uniform(&[shape[1], k, k, co], -1.0, 1.0, &mut r);
        let gates = gates_for(shape[0], shape[1], pat, &mut r);
        let d = dense(&x, &kern, &gates, stride, pad);
        prop_assert!(max_rel_diff(&d, &oracle(&x, &kern, &gates, stride, pad)) < 1e-5);
        let s = gated_conv_sparse(&x, &kern, &gates, stride, pad).unwrap();
        prop_assert!(max_abs_diff(&s.output, &d) < 1e-6);
        for (b, &n) in s.active.iter().enumerate() {
            prop_assert_eq!(n, gates.slab(b).iter().filter(|&&v| v > 0.0).count());
        }
        // f32 dense path against the f64 oracle
        let mut g = Graph::<f32>::new();
        let (xv, kv, gv) = (g.constant(x.cast()), g.constant(kern.cast()), g.constant(gates.cast()));
        let y = gated_conv_dense(&mut g, xv, kv, gv, stride, pad).unwrap();
        prop_assert!(max_rel_diff(&g.value(y).cast(), &d) < 1e-5);
    }

    #[test]
    fn scaling_a_channel_and_its_gate_inversely_is_invariant(seed in any::<u64>(), c in 1usize..4, ch in 0usize..4, scale in 0.1f64..10.0) {
        let ch = ch % c;
        let mut r = rng(seed);
        let x = uniform(&[2, c, 4, 4], -1.0, 1.0, &mut r);
        let kern = uniform(&[c, 3, 3, 2], -1.0, 1.0, &mut r);
        let gates = gates_for(2, c, 0, &mut r);
        let mut x2 = x.clone();
        let mut g2 = gates.clone();
        for b in 0..2 {
            for v in &mut x2.data_mut()[(b * c + ch) * 16..(b * c + ch + 1) * 16] {
                *v *= scale;
            }
            g2.data_mut()[b * c + ch] /= scale;
        }
        prop_assert!(max_rel_diff(&dense(&x, &kern, &gates, 1, 1), &dense(&x2, &kern, &g2, 1, 1)) < 1e-5);
    }

    #[test]
    fn gate_heads_are_nonnegative_and_equal_relu_of_linear(seed in any::<u64>(), d in 1usize..6, width in 1usize..6) {
        let mut r = rng(seed);
        let head = GateHead { name: "h".into(), layer: 0, embed_dim: d, width, bias: false };
        let mut p = ParamSet::<f64>::default();
        head.init(&mut p, seed);
        let w = uniform(&[d, width], -1.0, 1.0, &mut r);
        *p.get_mut(&head.weight_name()).unwrap() = w.clone();
        let e = uniform(&[3, d], -2.0, 2.0, &mut r);
        let mut g = Graph::new();
        let ev = g.constant(e.clone());
        let out = gate_forward(&mut g, &p, &head, ev).unwrap();
        for b in 0..3 {
            for j in 0..width {
                let z: f64 = (0..d).map(|i| e.data()[b * d + i] * w.data()[i * width + j]).sum();
                prop_assert_eq!(g.value(out).data()[b * width + j], z.max(0.0));
            }
            let single = gate_vector(&p, &head, &Tensor::new(vec![d], e.slab(b).to_vec()).unwrap()).unwrap();
            prop_assert!(single.values.iter().all(|&v| v >= 0.0));
            prop_assert_eq!(&single.values[..], &g.value(out).data()[b * width..(b + 1) * width]);
        }
    }

    #[test]
    fn l1_penalty_is_abs_sum_with_unit_gradient_on_positive_gates(v in proptest::collection::vec(0.0f64..3.0, 1..12), split in 0usize..12) {
        let split = split % v.len();
        let (a, b) = v.split_at(split);
        let mut g = Graph::new();
        let mut vars = Vec::new();
        for part in [a, b] {
            if !part.is_empty() {
                vars.push(g.leaf(Tensor::new(vec![1, part.len()], part.to_vec()).unwrap()));
            }
        }
        let l = l1_gate_penalty(&mut g, &vars).unwrap();
        prop_assert!((g.value(l).item() - v.iter().map(|x| x.abs()).sum::<f64>()).abs() < 1e-12);
        g.backward(l).unwrap();
        for &var in &vars {
            for (&gv, &val) in g.grad(var).unwrap().data().iter().zip(g.value(var).data()) {
                if val > 0.0 {
                    prop_assert_eq!(gv, 1.0);
                }
            }
        }
    }
}

#[test]
fn two_channel_example_matches_explicit_per_channel_sum() {
    let mut r = rng(21);
    let x = uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut r);
    let kern = uniform(&[2, 3, 3, 2], -1.0, 1.0, &mut r);
    let gates = Tensor::new(vec![1, 2], vec![0.5, 2.0]).unwrap();
    let mut want = Tensor::zeros(&[1, 2, 2, 2]);
    for (i, gi) in [0.5, 2.0].into_iter().enumerate() {
        let xi = Tensor::new(vec![1, 1, 4, 4], x.slab(0)[i * 16..(i + 1) * 16].to_vec()).unwrap();
        let ki = Tensor::new(vec![1, 3, 3, 2], kern.data()[i * 18..(i + 1) * 18].to_vec()).unwrap();
        for (w, v) in want.data_mut().iter_mut().zip(naive_conv(&xi, &ki, 1, 0).data()) {
            *w += gi * v;
        }
    }
    assert!(max_rel_diff(&dense(&x, &kern, &gates, 1, 0), &want) < 1e-12);
}

#[test]
fn one_hot_gate_selects_a_single_expert() {
    let mut r = rng(22);
    let x = uniform(&[3, 4, 4], -1.0, 1.0, &mut r);
    let kern = uniform(&[3, 3, 3, 2], -1.0, 1.0, &mut r);
    let z = moe_oracle(&x, &kern, &[0.0, 1.0, 0.0], 1, 1).unwrap();
    let xj = Tensor::new(vec![1, 1, 4, 4], x.data()[16..32].to_vec()).unwrap();
    let kj = Tensor::new(vec![1, 3, 3, 2], kern.data()[18..36].to_vec()).unwrap();
    assert!(max_rel_diff(&z.reshape(&[1, 2, 4, 4]).unwrap(), &naive_conv(&xj, &kj, 1, 1)) < 1e-12);
}

#[test]
fn half_zero_gates_halve_active_count() {
    let mut r = rng(23);
    let x = uniform(&[2, 4, 5, 5], -1.0, 1.0, &mut r);
    let kern = uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut r);
    let gates = Tensor::new(vec![2, 4], vec![0.0, 1.5, 0.0, 0.7, 0.3, 0.0, 0.9, 0.0]).unwrap();
    let s = gated_conv_sparse(&x, &kern, &gates, 1, 1).unwrap();
    assert_eq!(s.active, vec![2, 2]);
    assert!(max_abs_diff(&s.output, &dense(&x, &kern, &gates, 1, 1)) < 1e-6);
}

#[test]
fn negative_gates_are_rejected_by_both_paths() {
    let x = Tensor::<f64>::zeros(&[1, 2, 3, 3]);
    let kern = Tensor::<f64>::zeros(&[2, 1, 1, 1]);
    let gates = Tensor::new(vec![1, 2], vec![1.0, -0.1]).unwrap();
    assert!(gated_conv_sparse(&x, &kern, &gates, 1, 0).is_err());
    let mut g = Graph::new();
    let (xv, kv, gv) = (g.constant(x), g.constant(kern), g.constant(gates));
    assert!(gated_conv_dense(&mut g, xv, kv, gv, 1, 0).is_err());
}
