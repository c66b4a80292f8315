mod common;

use std::path::Path;

use indexnet::nn_math::rng_from_seed;
use indexnet::Tensor;
use indexnet_cli::checkpoint::Checkpoint;
use indexnet_cli::config::RunConfig;
use indexnet_cli::data::{load_source, Splits};
use indexnet_cli::model::is_weight;
use indexnet_cli::trainer::Trainer;
use indexnet_cli::CliError;

fn setup(dir: &Path, edit: impl FnOnce(&mut RunConfig)) -> (Trainer, Splits) {
    let mut config = RunConfig::load(&common::rich_config(dir, 6)).unwrap();
    edit(&mut config);
    let data = load_source(&config.data.source, &config.model).unwrap();
    let (splits, center) = Splits::prepare(&config, data).unwrap();
    (Trainer::new(config, center).unwrap(), splits)
}

/// Runs one epoch step by step, returning each step's loss bits.
fn epoch_losses(t: &mut Trainer, splits: &Splits) -> Vec<u64> {
    let mut losses = Vec::new();
    for batch in t.sampler().epoch_batches(t.epoch, splits.train.len()).unwrap() {
        let (x, y) = splits.train.batch(&batch);
        losses.push(t.train_step(&x, &y).unwrap().to_bits());
    }
    t.optimizer.end_epoch();
    t.epoch += 1;
    losses
}

fn state(t: &Trainer) -> Vec<u8> {
    Checkpoint::capture(t).to_bytes()
}

#[test]
fn resumed_training_matches_every_step() {
    let dir = tempfile::tempdir().unwrap();
    let (mut straight, splits) = setup(dir.path(), |_| {});
    for _ in 0..3 {
        epoch_losses(&mut straight, &splits);
    }
    let path = dir.path().join("mid.ckpt");
    Checkpoint::capture(&straight).save(&path).unwrap();

    let (mut resumed, _) = setup(dir.path(), |_| {});
    Checkpoint::load(&path).unwrap().restore(&mut resumed).unwrap();
    assert_eq!(state(&resumed), state(&straight));
    for _ in 3..6 {
        assert_eq!(epoch_losses(&mut resumed, &splits), epoch_losses(&mut straight, &splits));
        assert_eq!(state(&resumed), state(&straight));
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (mut t, splits) = setup(dir.path(), |_| {});
    t.run_epoch(&splits.train).unwrap();
    let bytes = state(&t);
    let reread = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(reread.to_bytes(), bytes);
    assert_eq!(state(&reread.into_trainer().unwrap()), bytes);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (t, _) = setup(dir.path(), |_| {});
    let bytes = state(&t);
    let is_ckpt_err = |b: &[u8]| matches!(Checkpoint::from_bytes(b), Err(CliError::Checkpoint(_)));
    assert!(is_ckpt_err(&bytes[..bytes.len() - 1]));
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(is_ckpt_err(&longer));
    let text = String::from_utf8_lossy(&bytes).into_owned();
    let version = text.replacen("INDEXNET-CHECKPOINT 1", "INDEXNET-CHECKPOINT 9", 1);
    assert!(is_ckpt_err(version.as_bytes()));
    assert!(is_ckpt_err(b"not a checkpoint"));
}

#[test]
fn digest_mismatch_leaves_the_trainer_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let (mut donor, splits) = setup(dir.path(), |_| {});
    donor.run_epoch(&splits.train).unwrap();
    let ckpt = Checkpoint::capture(&donor);

    let (mut other, _) = setup(dir.path(), |c| c.seed = 20);
    let (mut wider, _) = setup(dir.path(), |c| {
        if let indexnet_cli::config::ModelConfig::Fnn { hidden, .. } = &mut c.model {
            hidden[1].width = 7;
        }
    });
    let before = state(&wider);
    assert!(matches!(ckpt.restore(&mut wider), Err(CliError::Checkpoint(_))));
    assert_eq!(state(&wider), before);

    // A different seed keeps the digest: only the model section is hashed.
    ckpt.restore(&mut other).unwrap();
    assert_eq!(other.model.params(), donor.model.params());
    assert_eq!((other.epoch, other.step), (donor.epoch, donor.step));
}

#[test]
fn fixed_seed_runs_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run = || {
        let (mut t, splits) = setup(dir.path(), |_| {});
        let mut rows = Vec::new();
        t.train(&splits, 4, |_, m| {
            rows.push(m.csv_row());
            Ok(())
        })
        .unwrap();
        (rows, state(&t))
    };
    assert_eq!(run(), run());
}

#[test]
fn clipping_holds_after_every_step() {
    let dir = tempfile::tempdir().unwrap();
    let (mut t, splits) = setup(dir.path(), |c| {
        c.optimizer.learning_rate = Some(0.5);
        c.regularizer.clip = Some(0.4);
    });
    let c = 0.4 * (1.0 + 1e-12);
    for _ in 0..3 {
        for batch in t.sampler().epoch_batches(t.epoch, splits.train.len()).unwrap() {
            let (x, y) = splits.train.batch(&batch);
            t.train_step(&x, &y).unwrap();
            for (name, p) in t.model.params() {
                if is_weight(&name) {
                    assert!(p.norm_l2() <= c, "{name} norm {} after step {}", p.norm_l2(), t.step);
                }
            }
        }
        t.optimizer.end_epoch();
        t.epoch += 1;
    }
}

#[test]
fn penalty_gradient_enters_before_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let (mut t, splits) = setup(dir.path(), |c| {
        c.optimizer.kind = indexnet::optim::OptimizerKind::Sgd;
        c.optimizer.learning_rate = Some(0.1);
        c.regularizer.clip = None;
        c.regularizer.l2 = 0.05;
        c.regularizer.l1 = 0.01;
        if let indexnet_cli::config::ModelConfig::Fnn { hidden, input_dropout, .. } = &mut c.model {
            *input_dropout = None;
            hidden[0].dropout = None;
        }
    });
    let batch: Vec<usize> = (0..6).collect();
    let (x, y) = splits.train.batch(&batch);

    let mut reference = t.model.clone();
    let net = reference.net_mut();
    net.forward(&x, true, &mut rng_from_seed(0)).unwrap();
    let grads = net.gradients(&y).unwrap();
    let expected: Vec<(String, Tensor)> = reference
        .params()
        .into_iter()
        .zip(&grads)
        .map(|((name, p), g)| {
            let shrink = if is_weight(&name) { (0.05, 0.01) } else { (0.0, 0.0) };
            let stepped = p.zip_map(g, |w, g| {
                let sign = if w > 0.0 { 1.0 } else if w < 0.0 { -1.0 } else { 0.0 };
                w - 0.1 * (g + 2.0 * shrink.0 * w + shrink.1 * sign)
            })
            .unwrap();
            (name, stepped)
        })
        .collect();

    t.train_step(&x, &y).unwrap();
    for ((name, got), (_, want)) in t.model.params().into_iter().zip(&expected) {
        let gap = got.data().iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap <= 1e-15, "{name}: gap {gap:e}");
    }
}
