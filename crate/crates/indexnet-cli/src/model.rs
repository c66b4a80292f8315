//! Builds the configured network and dispatches to it.

use indexnet::batchnorm::BatchNorm;
use indexnet::cnn::CnnNetwork;
use indexnet::fnn::{FnnNetwork, HiddenSpec};
use indexnet::gradcheck::{GradCheckConfig, GradCheckReport};
use indexnet::network::{gradcheck_network, Network};
use indexnet::nn_math::rng_from_seed;
use indexnet::rnn::{CellKind, RecurrentNetwork, RecurrentSpec};
use indexnet::Tensor;

use crate::config::ModelConfig;
use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Fnn(FnnNetwork),
    Cnn(CnnNetwork),
    Recurrent(RecurrentNetwork),
}

impl Model {
    /// Draws the initial weights from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> CliResult<Model> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let model = match config {
            ModelConfig::Fnn { input, hidden, outputs, loss, init, input_dropout, skips } => {
                let specs: Vec<HiddenSpec> = hidden
                    .iter()
                    .map(|h| HiddenSpec { width: h.width, activation: h.activation, batch_norm: h.batch_norm, dropout: h.dropout })
                    .collect();
                let mut net = FnnNetwork::build(*input, &specs, *outputs, *loss, *init, &mut rng)
                    .and_then(|n| n.with_skips(skips.clone()))
                    .map_err(CliError::config)?;
                net.input_dropout = *input_dropout;
                net.validate().map_err(CliError::config)?;
                Model::Fnn(net)
            }
            ModelConfig::Cnn { input_shape, layers, outputs, loss, init, conv_path } => {
                let mut net = CnnNetwork::build(*input_shape, layers, *outputs, *loss, *init, &mut rng).map_err(CliError::config)?;
                net.set_path(*conv_path);
                Model::Cnn(net)
            }
            ModelConfig::Rnn { input, hidden, outputs, steps, loss, init, batch_norm } => {
                let spec = RecurrentSpec {
                    kind: CellKind::Rnn,
                    input: *input,
                    hidden: hidden.clone(),
                    outputs: *outputs,
                    steps: *steps,
                    loss: *loss,
                    batch_norm: *batch_norm,
                    law: *init,
                    diagonal_init: false,
                };
                Model::Recurrent(RecurrentNetwork::build(&spec, &mut rng).map_err(CliError::config)?)
            }
            ModelConfig::Lstm { input, hidden, outputs, steps, loss, init, batch_norm, diagonal_init, mode } => {
                let spec = RecurrentSpec {
                    kind: CellKind::Lstm,
                    input: *input,
                    hidden: hidden.clone(),
                    outputs: *outputs,
                    steps: *steps,
                    loss: *loss,
                    batch_norm: *batch_norm,
                    law: *init,
                    diagonal_init: *diagonal_init,
                };
                let mut net = RecurrentNetwork::build(&spec, &mut rng).map_err(CliError::config)?;
                net.mode = *mode;
                Model::Recurrent(net)
            }
        };
        Ok(model)
    }

    pub fn net(&self) -> &dyn Network {
        match self {
            Model::Fnn(n) => n,
            Model::Cnn(n) => n,
            Model::Recurrent(n) => n,
        }
    }

    pub fn net_mut(&mut self) -> &mut dyn Network {
        match self {
            Model::Fnn(n) => n,
            Model::Cnn(n) => n,
            Model::Recurrent(n) => n,
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        self.net().params()
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm> {
        self.net().batch_norms()
    }

    pub fn gradcheck(&mut self, inputs: &Tensor, targets: &Tensor, mask_seed: u64, config: &GradCheckConfig) -> CliResult<GradCheckReport> {
        let report = match self {
            Model::Fnn(n) => gradcheck_network(n, inputs, targets, mask_seed, config),
            Model::Cnn(n) => gradcheck_network(n, inputs, targets, mask_seed, config),
            Model::Recurrent(n) => gradcheck_network(n, inputs, targets, mask_seed, config),
        };
        Ok(report?)
    }
}

/// Weight tensors, as opposed to batch-norm scales and shifts. Penalties and
/// clipping act on these only.
pub fn is_weight(name: &str) -> bool {
    !(name.ends_with(".gamma") || name.ends_with(".beta"))
}
