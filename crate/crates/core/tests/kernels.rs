mod common;

use common::*;
use proptest::prelude::*;
use salmod::graph::Graph;
use salmod::ops;
use salmod::rng::Rng;
use salmod::Tensor;

const INSTANCES: usize = 50;

#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = Rng::new(11);
    for _ in 0..INSTANCES {
        let c = 1 + rng.below(4);
        let f = 1 + rng.below(4);
        let k = [1, 3, 5][rng.below(3)];
        let stride = 1 + rng.below(2);
        let pad = rng.below(k / 2 + 1);
        let h = k + rng.below(8);
        let w = k + rng.below(8);
        let x = random_tensor(&mut rng, &[c, h, w], -1.0, 1.0);
        let wt = random_tensor(&mut rng, &[f, c, k, k], -1.0, 1.0);
        let b = random_tensor(&mut rng, &[f], -1.0, 1.0);
        let got = ops::conv2d(&x, &wt, &b, stride, pad).unwrap();
        let want = conv2d_oracle(&x, &wt, &b, stride, pad);
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_abs_diff(&want) <= 1e-12, "{:e}", got.max_abs_diff(&want));
    }
}

#[test]
fn maxpool_matches_window_max() {
    let mut rng = Rng::new(12);
    for _ in 0..INSTANCES {
        let shape = [1 + rng.below(4), 2 * (1 + rng.below(6)), 2 * (1 + rng.below(6))];
        let x = random_tensor(&mut rng, &shape, -3.0, 3.0);
        let got = ops::maxpool2d(&x).unwrap();
        assert!(got.max_abs_diff(&maxpool_oracle(&x)) <= 1e-12);
    }
}

#[test]
fn upsample_matches_coordinate_sampling() {
    let mut rng = Rng::new(13);
    for _ in 0..INSTANCES {
        let (h, w) = (1 + rng.below(8), 1 + rng.below(8));
        let (oh, ow) = (h + rng.below(20), w + rng.below(20));
        let c = 1 + rng.below(3);
        let x = random_tensor(&mut rng, &[c, h, w], -1.0, 1.0);
        let got = ops::bilinear_upsample(&x, oh, ow).unwrap();
        let want = bilinear_oracle(&x, oh, ow);
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_abs_diff(&want) <= 1e-12, "{h}x{w} -> {oh}x{ow}");
    }
}

#[test]
fn cross_entropy_matches_log_sum_exp() {
    let mut rng = Rng::new(14);
    for _ in 0..INSTANCES {
        let m = 2 + rng.below(10);
        let scale = [1.0, 10.0, 300.0][rng.below(3)];
        let z = random_tensor(&mut rng, &[m], -scale, scale);
        let label = rng.below(m);
        let (loss, probs) = ops::softmax_cross_entropy(&z, label).unwrap();
        assert!((loss - cross_entropy_oracle(z.data(), label)).abs() <= 1e-10);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn upsample_refuses_to_shrink() {
    let x = Tensor::zeros(&[1, 4, 4]);
    assert!(ops::bilinear_upsample(&x, 3, 4).is_err());
}

fn graph_grad_check(
    seed: u64,
    shapes: &[Vec<usize>],
    build: impl Fn(&mut Graph<'_>, &[salmod::graph::Var]) -> salmod::graph::Var,
) -> f64 {
    let mut rng = Rng::new(seed);
    let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s, -1.0, 1.0)).collect();
    let eval = |xs: &[Tensor]| -> (f64, Vec<Tensor>) {
        let mut g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|x| g.input(x.clone(), true)).collect();
        let out = build(&mut g, &vars);
        let value = g.value(out).data()[0];
        let mut grads = g.backward(out).unwrap();
        (value, vars.iter().map(|v| grads.take(*v).unwrap()).collect())
    };
    let (_, analytic) = eval(&inputs);
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        let numeric = numeric_grad(
            |probe| {
                let mut xs = inputs.clone();
                xs[i] = probe.clone();
                eval(&xs).0
            },
            &inputs[i],
            1e-5,
        );
        worst = worst.max(max_rel_err(&analytic[i], &numeric, 1e-3));
    }
    worst
}

fn weights(shape: &[usize], seed: u64) -> Tensor {
    random_tensor(&mut Rng::new(seed ^ 0x5eed), shape, -1.0, 1.0)
}

#[test]
fn per_op_gradients_match_finite_differences() {
    for seed in 0..20 {
        let conv = graph_grad_check(seed, &[vec![2, 5, 5], vec![3, 2, 3, 3], vec![3]], |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 1, 1).unwrap();
            g.dot(y, weights(&[3, 5, 5], seed)).unwrap()
        });
        let pool = graph_grad_check(seed, &[vec![2, 4, 4]], |g, v| {
            let y = g.maxpool2d(v[0]).unwrap();
            g.dot(y, weights(&[2, 2, 2], seed)).unwrap()
        });
        let up = graph_grad_check(seed, &[vec![1, 3, 3]], |g, v| {
            let y = g.bilinear_upsample(v[0], 7, 8).unwrap();
            g.dot(y, weights(&[1, 7, 8], seed)).unwrap()
        });
        let lin = graph_grad_check(seed, &[vec![6], vec![4, 6], vec![4]], |g, v| {
            let y = g.linear(v[0], v[1], v[2]).unwrap();
            g.softmax_cross_entropy(y, seed as usize % 4).unwrap()
        });
        let modulate = graph_grad_check(seed, &[vec![3, 4, 4], vec![1, 4, 4]], |g, v| {
            let y = g.modulate(v[0], v[1]).unwrap();
            g.dot(y, weights(&[3, 4, 4], seed)).unwrap()
        });
        for (name, err) in [("conv", conv), ("pool", pool), ("upsample", up), ("linear+ce", lin), ("modulate", modulate)] {
            assert!(err < 1e-6, "{name} seed {seed}: {err:e}");
        }
    }
}

fn tensor_strategy(shape: [usize; 3]) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-5.0f64..5.0, n).prop_map(move |v| Tensor::new(&shape, v).unwrap())
}

proptest! {
    #[test]
    fn upsample_is_linear(a in tensor_strategy([2, 3, 4]), b in tensor_strategy([2, 3, 4]), alpha in -3.0f64..3.0) {
        let combo = a.scale(alpha).add(&b);
        let lhs = ops::bilinear_upsample(&combo, 9, 10).unwrap();
        let rhs = ops::bilinear_upsample(&a, 9, 10).unwrap().scale(alpha)
            .add(&ops::bilinear_upsample(&b, 9, 10).unwrap());
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
    }

    #[test]
    fn upsample_to_same_size_is_identity(a in tensor_strategy([2, 5, 6])) {
        prop_assert!(ops::bilinear_upsample(&a, 5, 6).unwrap().bit_eq(&a));
    }

    #[test]
    fn identity_kernel_reproduces_input(x in tensor_strategy([3, 6, 5])) {
        let mut w = Tensor::zeros(&[3, 3, 3, 3]);
        for c in 0..3 {
            w.set(&[c, c, 1, 1], 1.0);
        }
        let y = ops::conv2d(&x, &w, &Tensor::zeros(&[3]), 1, 1).unwrap();
        prop_assert!(y.bit_eq(&x));
    }

    #[test]
    fn cross_entropy_is_nonnegative(z in prop::collection::vec(-50.0f64..50.0, 2..12), pick in 0usize..100) {
        let label = pick % z.len();
        let (loss, _) = ops::softmax_cross_entropy(&Tensor::from_vec(z), label).unwrap();
        prop_assert!(loss >= 0.0);
    }

    #[test]
    fn modulation_superposes_in_the_feature(
        f1 in tensor_strategy([3, 4, 4]),
        f2 in tensor_strategy([3, 4, 4]),
        s in prop::collection::vec(0.0f64..2.0, 16),
    ) {
        let s = Tensor::new(&[1, 4, 4], s).unwrap();
        let lhs = ops::modulate(&f1.add(&f2), &s).unwrap();
        let rhs = ops::modulate(&f1, &s).unwrap().add(&ops::modulate(&f2, &s).unwrap());
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
    }

    #[test]
    fn zero_saliency_passes_features_through(f in tensor_strategy([4, 3, 3])) {
        let out = ops::modulate(&f, &Tensor::zeros(&[1, 3, 3])).unwrap();
        prop_assert!(out.bit_eq(&f));
    }

    #[test]
    fn relu_backward_masks_nonpositive_inputs(x in tensor_strategy([2, 3, 3]), g in tensor_strategy([2, 3, 3])) {
        let dx = ops::relu_backward(&g, &x);
        for ((d, xi), gi) in dx.data().iter().zip(x.data()).zip(g.data()) {
            prop_assert_eq!(*d, if *xi > 0.0 { *gi } else { 0.0 });
        }
    }
}
