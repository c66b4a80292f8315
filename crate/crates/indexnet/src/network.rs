//! The common surface of the feedforward, convolutional and recurrent networks.

use rand::RngCore;

use crate::batchnorm::BatchNorm;
use crate::cnn::CnnNetwork;
use crate::error::Result;
use crate::fnn::FnnNetwork;
use crate::gradcheck::{check, GradCheckConfig, GradCheckReport, Probe};
use crate::nn_math::{rng_from_seed, LossValue};
use crate::params::Parameterized;
use crate::rnn::RecurrentNetwork;
use crate::tensor::Tensor;

pub trait Network: Parameterized {
    fn forward(&mut self, inputs: &Tensor, train: bool, rng: &mut dyn RngCore) -> Result<Tensor>;
    /// Loss of the last forward against `targets`.
    fn loss(&self, targets: &Tensor) -> Result<LossValue>;
    /// Parameter gradients of the last forward, aligned with [`Parameterized::params`].
    fn gradients(&self, targets: &Tensor) -> Result<Vec<Tensor>>;
    /// Values whose sign change marks a non-differentiable point of the loss.
    fn kinks(&self) -> Vec<f64>;
    fn update_running(&mut self) -> Result<()>;
    fn batch_norms(&self) -> Vec<&BatchNorm>;
    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm>;
}

impl Network for FnnNetwork {
    fn forward(&mut self, inputs: &Tensor, train: bool, rng: &mut dyn RngCore) -> Result<Tensor> {
        FnnNetwork::forward(self, inputs, train, rng)
    }
    fn loss(&self, targets: &Tensor) -> Result<LossValue> {
        FnnNetwork::loss(self, targets)
    }
    fn gradients(&self, targets: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.backward(targets)?.grads)
    }
    fn kinks(&self) -> Vec<f64> {
        self.kink_preactivations()
    }
    fn update_running(&mut self) -> Result<()> {
        FnnNetwork::update_running(self)
    }
    fn batch_norms(&self) -> Vec<&BatchNorm> {
        FnnNetwork::batch_norms(self)
    }
    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        FnnNetwork::batch_norms_mut(self)
    }
}

impl Network for CnnNetwork {
    fn forward(&mut self, inputs: &Tensor, train: bool, rng: &mut dyn RngCore) -> Result<Tensor> {
        CnnNetwork::forward(self, inputs, train, rng)
    }
    fn loss(&self, targets: &Tensor) -> Result<LossValue> {
        CnnNetwork::loss(self, targets)
    }
    fn gradients(&self, targets: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.backward(targets)?.grads)
    }
    fn kinks(&self) -> Vec<f64> {
        self.kink_preactivations()
    }
    fn update_running(&mut self) -> Result<()> {
        CnnNetwork::update_running(self)
    }
    fn batch_norms(&self) -> Vec<&BatchNorm> {
        CnnNetwork::batch_norms(self)
    }
    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        CnnNetwork::batch_norms_mut(self)
    }
}

impl Network for RecurrentNetwork {
    fn forward(&mut self, inputs: &Tensor, train: bool, _rng: &mut dyn RngCore) -> Result<Tensor> {
        RecurrentNetwork::forward(self, inputs, train)
    }
    fn loss(&self, targets: &Tensor) -> Result<LossValue> {
        RecurrentNetwork::loss(self, targets)
    }
    fn gradients(&self, targets: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.backward(targets)?.grads)
    }
    fn kinks(&self) -> Vec<f64> {
        Vec::new()
    }
    fn update_running(&mut self) -> Result<()> {
        RecurrentNetwork::update_running(self)
    }
    fn batch_norms(&self) -> Vec<&BatchNorm> {
        RecurrentNetwork::batch_norms(self)
    }
    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        RecurrentNetwork::batch_norms_mut(self)
    }
}

/// Checks every parameter gradient of `net` on one batch. Each evaluation is a
/// training-mode forward with the same dropout seed, so the loss is a fixed
/// function of the parameters.
pub fn gradcheck_network<N: Network>(net: &mut N, inputs: &Tensor, targets: &Tensor, mask_seed: u64, config: &GradCheckConfig) -> Result<GradCheckReport> {
    net.forward(inputs, true, &mut rng_from_seed(mask_seed))?;
    let grads = net.gradients(targets)?;
    check(
        net,
        &grads,
        |n: &mut N| {
            n.forward(inputs, true, &mut rng_from_seed(mask_seed))?;
            Ok(Probe { loss: n.loss(targets)?.value, kinks: n.kinks() })
        },
        config,
    )
}
