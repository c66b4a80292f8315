use indexnet::batchnorm::{BatchNorm, BnMode};
use indexnet::cnn::{conv2d, ConvPath, PoolKind, PoolLayer};
use indexnet::nn_math::{loss, rng_from_seed, softmax, ActivationKind, LossKind};
use indexnet::rnn::{CellKind, RecurrentNetwork, RecurrentSpec};
use indexnet::tensor::{col2im, im2col, pad2d, ConvGeometry};
use indexnet::nn_math::InitLaw;
use indexnet::Tensor;
use proptest::prelude::*;

fn tensor(shape: Vec<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec(lo..hi, n).prop_map(move |v| Tensor::from_vec(&shape, v).unwrap())
}

/// `(N, M, R, S, P)` with an integral output.
fn geometry() -> impl Strategy<Value = ConvGeometry> {
    (1usize..=3, 1usize..=2, 0usize..=2, 1usize..=4, 1usize..=4).prop_filter_map("integral", |(r, s, p, on, om)| {
        let (n, m) = ((on - 1) * s + r, (om - 1) * s + r);
        if 2 * p > n.min(m) {
            return None;
        }
        ConvGeometry::new(n - 2 * p, m - 2 * p, r, s, p).ok()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gemm_convolution_matches_loops(
        (g, x, theta) in (geometry(), 1usize..=2, 1usize..=3, 1usize..=3).prop_flat_map(|(g, t, fi, fo)| {
            let r = g.receptive_field;
            (Just(g), tensor(vec![t, fi, g.in_width, g.in_height], -1.0, 1.0), tensor(vec![fo, fi, r, r], -1.0, 1.0))
        })
    ) {
        let reference = indexnet_oracles::convolve(&x, &theta, g.stride, g.padding);
        let fast = conv2d(&pad2d(&x, g.padding), &theta, &g, ConvPath::Gemm).unwrap();
        prop_assert!(fast.max_abs_diff(&reference).unwrap() <= 1e-12);
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col(
        (g, x, c) in (geometry(), 1usize..=3).prop_flat_map(|(g, f)| {
            let cols = f * g.receptive_field * g.receptive_field;
            (Just(g), tensor(vec![f, g.padded_width(), g.padded_height()], -1.0, 1.0), tensor(vec![g.out_positions(), cols], -1.0, 1.0))
        })
    ) {
        let lhs = im2col(&x, &g).unwrap().dot(&c).unwrap();
        let rhs = x.dot(&col2im(&c, &g).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn geometry_accepts_exactly_integral_outputs(n in 1usize..12, r in 1usize..6, s in 1usize..4, p in 0usize..3) {
        let span = n + 2 * p;
        let ok = r <= span && (span - r) % s == 0;
        let g = ConvGeometry::new(n, n, r, s, p);
        prop_assert_eq!(g.is_ok(), ok);
        if let Ok(g) = g {
            prop_assert_eq!(g.out_width, (span - r) / s + 1);
        }
        if r % 2 == 1 && r <= n {
            let same = ConvGeometry::same(n, n + 1, r).unwrap();
            prop_assert_eq!((same.out_width, same.out_height), (n, n + 1));
        }
    }

    #[test]
    fn softmax_normalizes_and_ignores_shifts(a in prop::collection::vec(-30.0f64..30.0, 1..12), c in -50.0f64..50.0) {
        let p = softmax(&a);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let shifted: Vec<f64> = a.iter().map(|x| x + c).collect();
        let q = softmax(&shifted);
        for (x, y) in p.iter().zip(&q) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn losses_are_non_negative(h in tensor(vec![3, 4], 0.0, 1.0), y in tensor(vec![3, 4], 0.0, 1.0)) {
        prop_assert!(loss(LossKind::Mse, &h, &y, 3).unwrap().value >= 0.0);
        prop_assert!(loss(LossKind::CrossEntropy, &h, &y, 3).unwrap().value >= 0.0);
    }

    #[test]
    fn activation_derivatives_match_differences(x in -4.0f64..4.0, k in 0usize..6) {
        let kind = ActivationKind::ALL_DEFAULT[k];
        prop_assume!(!kind.has_kink() || x.abs() > 1e-4);
        let h = 1e-6;
        let numeric = (kind.apply(x + h) - kind.apply(x - h)) / (2.0 * h);
        let analytic = kind.derivative(x);
        prop_assert!((analytic - numeric).abs() <= 1e-7 * analytic.abs().max(numeric.abs()).max(1e-3), "{kind:?} at {x}");
    }

    #[test]
    fn max_pool_deposits_only_at_winners(x in tensor(vec![2, 2, 6, 6], -1.0, 1.0), up in tensor(vec![2, 2, 3, 3], -1.0, 1.0)) {
        let mut pool = PoolLayer::new(2, 2, PoolKind::Max);
        pool.forward(&x).unwrap();
        let routed = pool.route(&up).unwrap();
        prop_assert!((routed.sum() - up.sum()).abs() <= 1e-12);
        let winners = pool.argmax().unwrap().to_vec();
        let mut hit = Tensor::zeros(x.shape());
        for t in 0..2 {
            for f in 0..2 {
                for l in 0..3 {
                    for m in 0..3 {
                        let (j, k) = winners[((t * 2 + f) * 3 + l) * 3 + m];
                        hit[[t, f, 2 * l + j, 2 * m + k]] = 1.0;
                    }
                }
            }
        }
        for (r, h) in routed.data().iter().zip(hit.data()) {
            prop_assert!(*h == 1.0 || *r == 0.0);
        }
    }

    #[test]
    fn batch_norm_eval_is_per_sample(h in tensor(vec![4, 3], -2.0, 2.0), batch in tensor(vec![5, 3], -2.0, 2.0)) {
        let mut bn = BatchNorm::new(3, BnMode::PerFeature);
        bn.forward_train(&batch).unwrap();
        bn.update_running().unwrap();
        let whole = bn.forward_eval(&h).unwrap();
        let rows: Vec<Tensor> = (0..4).map(|t| bn.forward_eval(&h.select_outer(&[t])).unwrap().slice_outer(0)).collect();
        prop_assert_eq!(whole, Tensor::stack(&rows).unwrap());
    }

    #[test]
    fn lstm_gates_stay_in_range(seed in 0u64..1000, x in tensor(vec![3, 2, 4], -3.0, 3.0)) {
        let spec = RecurrentSpec {
            kind: CellKind::Lstm,
            input: 2,
            hidden: vec![3, 2],
            outputs: 2,
            steps: 4,
            loss: LossKind::Mse,
            batch_norm: seed % 2 == 0,
            law: InitLaw::Normal,
            diagonal_init: true,
        };
        let mut net = RecurrentNetwork::build(&spec, &mut rng_from_seed(seed)).unwrap();
        net.forward(&x, true).unwrap();
        for k in 0..2 {
            for tau in 0..4 {
                let g = net.gates(k, tau).unwrap();
                for gate in &g[..3] {
                    prop_assert!(gate.data().iter().all(|&v| v > 0.0 && v < 1.0));
                }
                prop_assert!(g[3].data().iter().all(|&v| v > -1.0 && v < 1.0));
            }
        }
    }
}
