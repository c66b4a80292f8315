//! Pointwise activations, output functions, losses and weight initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Slope of the leaky ReLU on its negative branch.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Floor applied to probabilities before taking a logarithm.
pub const LOG_FLOOR: f64 = 1e-15;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu,
    ParametricRelu { alpha: f64 },
    Elu,
}

impl ActivationKind {
    pub const ALL_DEFAULT: [ActivationKind; 6] = [
        ActivationKind::Sigmoid,
        ActivationKind::Tanh,
        ActivationKind::Relu,
        ActivationKind::LeakyRelu,
        ActivationKind::ParametricRelu { alpha: 0.25 },
        ActivationKind::Elu,
    ];

    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActivationKind::Sigmoid => sigmoid(x),
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Relu => {
                if x >= 0.0 {
                    x
                } else {
                    0.0
                }
            }
            ActivationKind::LeakyRelu => {
                if x >= 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            ActivationKind::ParametricRelu { alpha } => {
                if x >= 0.0 {
                    x
                } else {
                    alpha * x
                }
            }
            ActivationKind::Elu => {
                if x >= 0.0 {
                    x
                } else {
                    x.exp() - 1.0
                }
            }
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            ActivationKind::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            ActivationKind::Tanh => 1.0 - x.tanh().powi(2),
            ActivationKind::Relu => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::LeakyRelu => {
                if x >= 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            ActivationKind::ParametricRelu { alpha } => {
                if x >= 0.0 {
                    1.0
                } else {
                    alpha
                }
            }
            ActivationKind::Elu => {
                if x >= 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
        }
    }

    /// True for kinds whose derivative jumps at 0.
    pub fn has_kink(self) -> bool {
        matches!(
            self,
            ActivationKind::Relu | ActivationKind::LeakyRelu | ActivationKind::ParametricRelu { .. }
        )
    }

    pub fn validate(self) -> Result<()> {
        if let ActivationKind::ParametricRelu { alpha } = self {
            if !(alpha.is_finite() && alpha > 0.0) {
                return Err(Error::Config(format!("PReLU slope must be finite and > 0, got {alpha}")));
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn check_finite(a: &Tensor) -> Result<()> {
    if !a.all_finite() {
        return Err(Error::Numeric("non-finite activation input".into()));
    }
    Ok(())
}

pub fn activate(kind: ActivationKind, a: &Tensor) -> Result<Tensor> {
    check_finite(a)?;
    Ok(a.map(|x| kind.apply(x)))
}

pub fn activate_prime(kind: ActivationKind, a: &Tensor) -> Result<Tensor> {
    check_finite(a)?;
    Ok(a.map(|x| kind.derivative(x)))
}

/// Max-shifted softmax of a slice.
pub fn softmax(a: &[f64]) -> Vec<f64> {
    let max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = a.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Softmax over consecutive groups of `group` entries of the last axis.
pub fn softmax_groups(a: &Tensor, group: usize) -> Result<Tensor> {
    check_finite(a)?;
    let last = *a.shape().last().unwrap_or(&0);
    if group == 0 || last % group != 0 {
        return dim_err(format!("last axis {last} not divisible into groups of {group}"));
    }
    let mut out = a.clone();
    for chunk in out.data_mut().chunks_mut(group) {
        let s = softmax(chunk);
        chunk.copy_from_slice(&s);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
    BinnedCrossEntropy { bins: usize },
}

impl LossKind {
    pub fn validate(self) -> Result<()> {
        if let LossKind::BinnedCrossEntropy { bins } = self {
            if bins < 2 {
                return Err(Error::Config(format!("binned loss needs at least 2 bins, got {bins}")));
            }
        }
        Ok(())
    }

    /// The output function `o` paired with this loss.
    pub fn output(self, a: &Tensor) -> Result<Tensor> {
        match self {
            LossKind::Mse => {
                check_finite(a)?;
                Ok(a.clone())
            }
            LossKind::CrossEntropy => softmax_groups(a, *a.shape().last().unwrap_or(&1)),
            LossKind::BinnedCrossEntropy { bins } => softmax_groups(a, bins),
        }
    }

    pub fn is_classification(self) -> bool {
        !matches!(self, LossKind::Mse)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Number of probabilities raised to [`LOG_FLOOR`].
    pub clamped: usize,
}

/// Loss of a mini-batch of `t_mb` samples.
///
/// Classification targets are one-hot (per bin group for the binned loss).
pub fn loss(kind: LossKind, predictions: &Tensor, targets: &Tensor, t_mb: usize) -> Result<LossValue> {
    predictions.check_same_shape(targets)?;
    if t_mb == 0 {
        return Err(Error::BatchSize("empty mini-batch".into()));
    }
    let n = t_mb as f64;
    match kind {
        LossKind::Mse => {
            let s: f64 = predictions
                .data()
                .iter()
                .zip(targets.data())
                .map(|(h, y)| (y - h) * (y - h))
                .sum();
            Ok(LossValue { value: s / (2.0 * n), clamped: 0 })
        }
        LossKind::CrossEntropy | LossKind::BinnedCrossEntropy { .. } => {
            let mut clamped = 0;
            let mut s = 0.0;
            for (&h, &y) in predictions.data().iter().zip(targets.data()) {
                if y == 0.0 {
                    continue;
                }
                let p = if h < LOG_FLOOR {
                    clamped += 1;
                    LOG_FLOOR
                } else {
                    h
                };
                s += y * p.ln();
            }
            Ok(LossValue { value: -s / n, clamped })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitLaw {
    /// Standard normal draws scaled by `sqrt(6/(F_in+F_out))`.
    #[default]
    Normal,
    /// Uniform draws on `±sqrt(6/(F_in+F_out))`.
    Uniform,
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fills a tensor of any shape with scaled draws for the given fans.
pub fn init_tensor<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, law: InitLaw, rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| match law {
            InitLaw::Normal => bound * rng.sample::<f64, _>(StandardNormal),
            InitLaw::Uniform => rng.gen_range(-bound..bound),
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape product")
}

/// `[fan_out, fan_in]` weights with entries `sqrt(6/(F_in+F_out)) * N(0,1)`.
pub fn init_weights(fan_in: usize, fan_out: usize, rng_seed: u64) -> Tensor {
    let mut rng = rng_from_seed(rng_seed);
    init_tensor(&[fan_out, fan_in], fan_in, fan_out, InitLaw::Normal, &mut rng)
}

/// Half the identity, optionally perturbed on the diagonal.
pub fn init_lstm_diagonal(f_in: usize, f_out: usize, randomize: bool, rng_seed: u64) -> Result<Tensor> {
    if f_in != f_out {
        return dim_err(format!("diagonal init needs a square matrix, got {f_out}x{f_in}"));
    }
    let mut rng = rng_from_seed(rng_seed);
    let scale = (6.0 / (f_in + f_out) as f64).sqrt();
    let mut t = Tensor::zeros(&[f_out, f_in]);
    for f in 0..f_out {
        let noise = if randomize {
            scale * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        t[[f, f]] = 0.5 * (1.0 + noise);
    }
    Ok(t)
}
