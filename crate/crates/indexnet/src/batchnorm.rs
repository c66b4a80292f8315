//! Batch normalization: train/eval forward, running statistics, and the
//! Jacobian contraction used by every backward recursion.
//!
//! The Jacobian of the output for sample `t'` with respect to the input for
//! sample `t` is `γ̃ [δ_tt' - (1 + h̃_t' h̃_t) / D]`, where `D` counts the
//! elements sharing one feature's statistics. It is never materialized:
//! contracting it with an upstream gradient only needs two sums per feature.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Input `[T_mb, F]`, statistics over `t`.
    PerFeature,
    /// Input `[T_mb, F, N, T]`, statistics over `t, l, m`.
    PerFeatureMap,
}

#[derive(Clone, Debug, PartialEq)]
struct BnCache {
    shape: Vec<usize>,
    mean: Vec<f64>,
    var: Vec<f64>,
    h_tilde: Tensor,
    gamma_tilde: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Number of running-statistic updates so far.
    pub epoch: u64,
    pub epsilon: f64,
    pub mode: BnMode,
    /// Mini-batch size of the last training forward, used by the eval variance factor.
    pub batch_size: usize,
    cache: Option<BnCache>,
}

impl BatchNorm {
    pub fn new(features: usize, mode: BnMode) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[features], 1.0),
            beta: Tensor::zeros(&[features]),
            running_mean: vec![0.0; features],
            running_var: vec![0.0; features],
            epoch: 0,
            epsilon: DEFAULT_EPSILON,
            mode,
            batch_size: 0,
            cache: None,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    /// `(T_mb, F, S)` where `S` is the number of spatial positions.
    fn layout(&self, h: &Tensor) -> Result<(usize, usize, usize)> {
        let f = self.features();
        let ok_rank = match self.mode {
            BnMode::PerFeature => h.rank() == 2,
            BnMode::PerFeatureMap => h.rank() == 4,
        };
        if !ok_rank || h.dim(1) != f {
            return dim_err(format!(
                "batch norm over {f} features ({:?}) cannot take shape {:?}",
                self.mode,
                h.shape()
            ));
        }
        let t = h.dim(0);
        Ok((t, f, h.len() / (t * f).max(1)))
    }

    /// Normalizes with the mini-batch statistics and caches them.
    pub fn forward_train(&mut self, h: &Tensor) -> Result<Tensor> {
        let (t, f, s) = self.layout(h)?;
        if t < 2 {
            return Err(Error::BatchSize(format!(
                "batch norm needs at least 2 samples, got {t}"
            )));
        }
        let d = (t * s) as f64;
        let x = h.data();
        let mut mean = vec![0.0; f];
        let mut var = vec![0.0; f];
        for tt in 0..t {
            for ff in 0..f {
                let base = (tt * f + ff) * s;
                mean[ff] += x[base..base + s].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= d);
        for tt in 0..t {
            for ff in 0..f {
                let base = (tt * f + ff) * s;
                var[ff] += x[base..base + s].iter().map(|v| (v - mean[ff]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= d);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect();
        let mut h_tilde = Tensor::zeros(h.shape());
        let mut y = Tensor::zeros(h.shape());
        for tt in 0..t {
            for ff in 0..f {
                let base = (tt * f + ff) * s;
                for i in base..base + s {
                    let n = (x[i] - mean[ff]) * inv_std[ff];
                    h_tilde.data_mut()[i] = n;
                    y.data_mut()[i] = self.gamma.data()[ff] * n + self.beta.data()[ff];
                }
            }
        }
        let gamma_tilde = inv_std
            .iter()
            .zip(self.gamma.data())
            .map(|(is, g)| g * is)
            .collect();
        self.batch_size = t;
        self.cache = Some(BnCache {
            shape: h.shape().to_vec(),
            mean,
            var,
            h_tilde,
            gamma_tilde,
        });
        Ok(y)
    }

    /// Cumulative average `E_{e+1} = (e E_e + ĥ) / (e + 1)`, same for the variance.
    pub fn update_running(&mut self) -> Result<()> {
        let c = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("running update before any training forward".into()))?;
        let e = self.epoch as f64;
        for ff in 0..self.running_mean.len() {
            self.running_mean[ff] = (e * self.running_mean[ff] + c.mean[ff]) / (e + 1.0);
            self.running_var[ff] = (e * self.running_var[ff] + c.var[ff]) / (e + 1.0);
        }
        self.epoch += 1;
        Ok(())
    }

    /// Test-time transform with running statistics and the `T_mb/(T_mb-1)` variance factor.
    pub fn forward_eval(&self, h: &Tensor) -> Result<Tensor> {
        if self.epoch == 0 {
            return Err(Error::State("batch norm running statistics are uninitialized".into()));
        }
        let (t, f, s) = self.layout(h)?;
        let tm = self.batch_size as f64;
        let factor = if self.batch_size > 1 { tm / (tm - 1.0) } else { 1.0 };
        let mut y = h.clone();
        for tt in 0..t {
            for ff in 0..f {
                let scale = self.gamma.data()[ff] / (factor * self.running_var[ff] + self.epsilon).sqrt();
                let base = (tt * f + ff) * s;
                for v in &mut y.data_mut()[base..base + s] {
                    *v = scale * (*v - self.running_mean[ff]) + self.beta.data()[ff];
                }
            }
        }
        Ok(y)
    }

    fn cache_for(&self, upstream: &Tensor) -> Result<&BnCache> {
        let c = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("no cached batch statistics".into()))?;
        if c.shape != upstream.shape() {
            return Err(Error::State(format!(
                "stale cache: forward saw {:?}, upstream is {:?}",
                c.shape,
                upstream.shape()
            )));
        }
        Ok(c)
    }

    /// Per-feature sums `(Σ upstream, Σ upstream·h̃)`.
    pub fn aggregates(&self, upstream: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let c = self.cache_for(upstream)?;
        let (t, f, s) = self.layout(upstream)?;
        let (u, ht) = (upstream.data(), c.h_tilde.data());
        let mut mu1 = vec![0.0; f];
        let mut mu2 = vec![0.0; f];
        for tt in 0..t {
            for ff in 0..f {
                let base = (tt * f + ff) * s;
                for i in base..base + s {
                    mu1[ff] += u[i];
                    mu2[ff] += u[i] * ht[i];
                }
            }
        }
        Ok((mu1, mu2))
    }

    /// `Σ_t' J^(tt') upstream_t'` through the aggregate sums.
    pub fn contract(&self, upstream: &Tensor) -> Result<Tensor> {
        let (mu1, mu2) = self.aggregates(upstream)?;
        let c = self.cache_for(upstream)?;
        let (t, f, s) = self.layout(upstream)?;
        let d = self.divisor_of(t, s);
        let mut out = upstream.clone();
        let ht = c.h_tilde.data();
        for tt in 0..t {
            for ff in 0..f {
                let base = (tt * f + ff) * s;
                for i in base..base + s {
                    out.data_mut()[i] =
                        c.gamma_tilde[ff] * (upstream.data()[i] - (mu1[ff] + mu2[ff] * ht[i]) / d);
                }
            }
        }
        Ok(out)
    }

    /// `(Δγ, Δβ)` from the gradient on the normalized output.
    pub fn coeff_grads(&self, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
        let (mu1, mu2) = self.aggregates(upstream)?;
        let f = self.features();
        Ok((Tensor::from_vec(&[f], mu2)?, Tensor::from_vec(&[f], mu1)?))
    }

    fn divisor_of(&self, t: usize, s: usize) -> f64 {
        (t * s) as f64
    }

    /// Elements sharing one feature's statistics in the cached forward.
    pub fn divisor(&self) -> Option<f64> {
        self.cache.as_ref().map(|c| {
            let t = c.shape[0];
            let s = c.h_tilde.len() / (t * self.features()).max(1);
            self.divisor_of(t, s)
        })
    }

    pub fn h_tilde(&self) -> Option<&Tensor> {
        self.cache.as_ref().map(|c| &c.h_tilde)
    }

    pub fn gamma_tilde(&self) -> Option<&[f64]> {
        self.cache.as_ref().map(|c| c.gamma_tilde.as_slice())
    }

    pub fn batch_mean(&self) -> Option<&[f64]> {
        self.cache.as_ref().map(|c| c.mean.as_slice())
    }

    pub fn batch_var(&self) -> Option<&[f64]> {
        self.cache.as_ref().map(|c| c.var.as_slice())
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}
