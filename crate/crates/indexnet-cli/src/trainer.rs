//! The training loop and evaluation.
//!
//! Every random stream is derived from the run seed and a counter: the
//! initial weights from the seed, the sample order from the epoch, dropout
//! masks from the optimizer step. A trainer's whole state is therefore its
//! tensors plus `(epoch, step)`, which is what a checkpoint stores.

use indexnet::data::{BatchSampler, CenterStats, Dataset};
use indexnet::nn_math::{rng_from_seed, LossKind};
use indexnet::optim::{clip_weights, penalty_grad, OptimizerKind, OptimizerState, RegularizerConfig};
use indexnet::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, RunConfig};
use crate::data::Splits;
use crate::error::{CliError, CliResult};
use crate::model::{is_weight, Model};

pub const METRICS_HEADER: &str = "epoch,train_loss,train_accuracy,eval_loss,eval_accuracy,learning_rate";

/// Samples per evaluation forward.
const EVAL_CHUNK: usize = 256;

const ORDER_SALT: u64 = 0x5151_0001;
const DROPOUT_SALT: u64 = 0x5151_0002;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// `None` for regression.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    /// Completed epochs, from 1.
    pub epoch: u64,
    pub train: Evaluation,
    pub eval: Option<Evaluation>,
    /// The rate used during this epoch.
    pub learning_rate: f64,
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.train.loss,
            cell(self.train.accuracy),
            cell(self.eval.map(|e| e.loss)),
            cell(self.eval.and_then(|e| e.accuracy)),
            self.learning_rate
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub optimizer: OptimizerState,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps over the whole run.
    pub step: u64,
    pub center: Option<CenterStats>,
}

fn dropout_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = rng_from_seed(seed ^ DROPOUT_SALT);
    rng.set_stream(step);
    rng
}

fn add_penalties(reg: &RegularizerConfig, params: &[(String, &Tensor)], grads: &mut [Tensor]) -> indexnet::Result<()> {
    if !reg.is_active() {
        return Ok(());
    }
    for ((name, p), g) in params.iter().zip(grads.iter_mut()) {
        if is_weight(name) {
            g.axpy(1.0, &penalty_grad(reg, p))?;
        }
    }
    Ok(())
}

impl Trainer {
    pub fn new(config: RunConfig, center: Option<CenterStats>) -> CliResult<Self> {
        config.validate()?;
        let model = Model::build(&config.model, config.seed)?;
        let optimizer = OptimizerState::new(config.optimizer).map_err(CliError::config)?;
        Ok(Trainer { config, model, optimizer, epoch: 0, step: 0, center })
    }

    pub fn sampler(&self) -> BatchSampler {
        let mut s = BatchSampler::new(self.config.batch_size, self.config.seed ^ ORDER_SALT);
        s.shuffle = self.config.shuffle;
        if self.config.model.uses_batch_norm() {
            s.min_batch = 2;
        }
        s
    }

    /// One optimizer step on a mini-batch; returns the batch's data loss.
    pub fn train_step(&mut self, x: &Tensor, y: &Tensor) -> CliResult<f64> {
        let seed = self.config.seed;
        let step = self.step;
        let reg = self.config.regularizer;
        let net = self.model.net_mut();
        net.forward(x, true, &mut dropout_rng(seed, step))?;
        let loss = net.loss(y)?.value;
        if !loss.is_finite() {
            return Err(CliError::Numeric(format!("loss is {loss} at epoch {} step {step}", self.epoch + 1)));
        }
        let mut grads = net.gradients(y)?;
        net.update_running()?;
        add_penalties(&reg, &self.model.params(), &mut grads)?;

        let weights: Vec<bool> = self.model.params().iter().map(|(n, _)| is_weight(n)).collect();
        if self.optimizer.config.kind == OptimizerKind::Nesterov {
            let mut probe = self.model.clone();
            let mut look_ahead = |shifted: &[Tensor]| -> indexnet::Result<Vec<Tensor>> {
                for (p, s) in probe.net_mut().params_mut().into_iter().zip(shifted) {
                    p.data_mut().copy_from_slice(s.data());
                }
                let net = probe.net_mut();
                net.forward(x, true, &mut dropout_rng(seed, step))?;
                let mut g = net.gradients(y)?;
                add_penalties(&reg, &probe.params(), &mut g)?;
                Ok(g)
            };
            let mut params = self.model.net_mut().params_mut();
            self.optimizer.step(&mut params, &grads, Some(&mut look_ahead))?;
        } else {
            let mut params = self.model.net_mut().params_mut();
            self.optimizer.step(&mut params, &grads, None)?;
        }

        if let Some(c) = reg.clip {
            let mut params = self.model.net_mut().params_mut();
            let mut clipped: Vec<&mut Tensor> = params.drain(..).zip(&weights).filter(|(_, w)| **w).map(|(p, _)| p).collect();
            for p in clipped.iter_mut() {
                clip_weights(p, c);
            }
            if !clipped.is_empty() {
                let k = (step as usize) % clipped.len();
                let norm = clipped[k].norm_l2();
                if norm > c * (1.0 + 1e-12) {
                    return Err(CliError::Numeric(format!("weight norm {norm} exceeds the clip threshold {c}")));
                }
            }
        }
        self.step += 1;
        Ok(loss)
    }

    /// Runs one epoch over `train` and decays the learning rate.
    pub fn run_epoch(&mut self, train: &Dataset) -> CliResult<f64> {
        let eta = self.optimizer.learning_rate;
        for batch in self.sampler().epoch_batches(self.epoch, train.len())? {
            let (x, y) = train.batch(&batch);
            self.train_step(&x, &y)?;
        }
        self.optimizer.end_epoch();
        self.epoch += 1;
        Ok(eta)
    }

    pub fn evaluate(&mut self, data: &Dataset) -> CliResult<Evaluation> {
        evaluate(&mut self.model, &self.config.model, data)
    }

    /// Trains until `epochs` epochs are complete, reporting after each one.
    pub fn train(&mut self, splits: &Splits, epochs: u64, mut on_epoch: impl FnMut(&Trainer, &EpochMetrics) -> CliResult<()>) -> CliResult<()> {
        while self.epoch < epochs {
            let eta = self.run_epoch(&splits.train)?;
            let train = self.evaluate(&splits.train)?;
            if !train.loss.is_finite() {
                return Err(CliError::Numeric(format!("training loss is {} after epoch {}", train.loss, self.epoch)));
            }
            let eval = splits.eval.as_ref().map(|e| self.evaluate(e)).transpose()?;
            let m = EpochMetrics { epoch: self.epoch, train, eval, learning_rate: eta };
            on_epoch(self, &m)?;
        }
        Ok(())
    }
}

/// Eval-mode loss and accuracy over `data`, in fixed chunks.
pub fn evaluate(model: &mut Model, config: &ModelConfig, data: &Dataset) -> CliResult<Evaluation> {
    let n = data.len();
    let loss_kind = config.loss();
    let mut loss_sum = 0.0;
    let (mut hits, mut total) = (0usize, 0usize);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = data.batch(chunk);
        let net = model.net_mut();
        let h = net.forward(&x, false, &mut rng_from_seed(0))?;
        loss_sum += net.loss(&y)?.value * chunk.len() as f64;
        if let Some(group) = class_group(loss_kind, config.outputs()) {
            let (a, b) = argmax_hits(&h, &y, group);
            hits += a;
            total += b;
        }
    }
    Ok(Evaluation {
        loss: loss_sum / n as f64,
        accuracy: class_group(loss_kind, config.outputs()).map(|_| hits as f64 / total as f64),
    })
}

fn class_group(loss: LossKind, outputs: usize) -> Option<usize> {
    match loss {
        LossKind::Mse => None,
        LossKind::CrossEntropy => Some(outputs),
        LossKind::BinnedCrossEntropy { bins } => Some(bins),
    }
}

/// Counts groups of `group` consecutive features (at every trailing position)
/// whose largest prediction sits on the target's one.
pub fn argmax_hits(predictions: &Tensor, targets: &Tensor, group: usize) -> (usize, usize) {
    let shape = predictions.shape();
    let (t_mb, f) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let (p, y) = (predictions.data(), targets.data());
    let argmax = |d: &[f64], base: usize| {
        (0..group)
            .map(|k| d[base + k * inner])
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, v)| if v > best.1 { (k, v) } else { best })
            .0
    };
    let mut hits = 0;
    let mut total = 0;
    for t in 0..t_mb {
        for g0 in (0..f).step_by(group) {
            for s in 0..inner {
                let base = (t * f + g0) * inner + s;
                hits += usize::from(argmax(p, base) == argmax(y, base));
                total += 1;
            }
        }
    }
    (hits, total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_hits_walk_groups_and_steps() {
        // Two samples, four features in two groups, two steps.
        let p = Tensor::from_vec(&[2, 4, 2], vec![0.9, 0.1, 0.1, 0.9, 0.2, 0.7, 0.8, 0.3, 0.5, 0.5, 0.5, 0.5, 0.1, 0.3, 0.9, 0.4]).unwrap();
        let y = Tensor::from_vec(&[2, 4, 2], vec![1., 0., 0., 1., 0., 1., 1., 0., 1., 1., 0., 0., 0., 1., 1., 0.]).unwrap();
        assert_eq!(argmax_hits(&p, &y, 2), (7, 8));
        assert_eq!(argmax_hits(&p, &y, 4).1, 4);
    }

    #[test]
    fn metrics_rows_leave_missing_cells_empty() {
        let m = EpochMetrics { epoch: 3, train: Evaluation { loss: 0.5, accuracy: None }, eval: None, learning_rate: 1e-3 };
        assert_eq!(m.csv_row(), "3,0.5,,,,0.001");
        assert_eq!(METRICS_HEADER.split(',').count(), m.csv_row().split(',').count());
    }
}
