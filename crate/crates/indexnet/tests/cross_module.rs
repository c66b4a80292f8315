use indexnet::fnn::{DenseLayer, FnnNetwork, OutputLayer};
use indexnet::nn_math::{rng_from_seed, ActivationKind, InitLaw, LossKind};
use indexnet::rnn::{CellKind, RecurrentNetwork, RecurrentSpec};
use indexnet::Tensor;
use indexnet_oracles::suites::{one_hot, random};

/// A one-step tanh RNN is a one-hidden-layer dense network with the same weights.
#[test]
fn single_step_rnn_is_a_dense_network() {
    for loss in [LossKind::Mse, LossKind::CrossEntropy] {
        let mut rng = rng_from_seed(9);
        let spec = RecurrentSpec {
            kind: CellKind::Rnn,
            input: 3,
            hidden: vec![5],
            outputs: 4,
            steps: 1,
            loss,
            batch_norm: false,
            law: InitLaw::Normal,
            diagonal_init: false,
        };
        let mut rnn = RecurrentNetwork::build(&spec, &mut rng).unwrap();
        let hidden = DenseLayer::from_theta(rnn.layers[0].spatial[0].clone(), ActivationKind::Tanh, false, true).unwrap();
        let output = OutputLayer::from_theta(rnn.output.clone(), loss, rnn.output_bias);
        let mut fnn = FnnNetwork::new(vec![hidden], output).unwrap();

        let x = random(&[6, 3], &mut rng);
        let y = match loss {
            LossKind::Mse => random(&[6, 4], &mut rng),
            _ => one_hot(6, 4, &mut rng),
        };
        let seq = |t: &Tensor| t.clone().reshape(&[t.dim(0), t.dim(1), 1]).unwrap();
        let h_rnn = rnn.forward(&seq(&x), true).unwrap();
        let h_fnn = fnn.forward(&x, true, &mut rng).unwrap();
        assert!(h_rnn.max_abs_diff(&seq(&h_fnn)).unwrap() <= 1e-12);
        assert!((rnn.loss(&seq(&y)).unwrap().value - fnn.loss(&y).unwrap().value).abs() <= 1e-12);

        let gr = rnn.backward(&seq(&y)).unwrap().grads;
        let gf = fnn.backward(&y).unwrap().grads;
        assert!(gr[0].max_abs_diff(&gf[0]).unwrap() <= 1e-12);
        assert_eq!(gr[1].max_abs(), 0.0);
        assert!(gr[2].max_abs_diff(&gf[1]).unwrap() <= 1e-12);
    }
}
