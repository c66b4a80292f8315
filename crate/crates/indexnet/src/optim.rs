//! Gradient-descent update rules, learning-rate decay, clipping and penalties.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Nesterov,
    Adagrad,
    Rmsprop,
    Adadelta,
    Adam,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 7] = [
        OptimizerKind::Sgd,
        OptimizerKind::Momentum,
        OptimizerKind::Nesterov,
        OptimizerKind::Adagrad,
        OptimizerKind::Rmsprop,
        OptimizerKind::Adadelta,
        OptimizerKind::Adam,
    ];

    /// Adagrad `1e-2`, everything else `1e-3`. Adadelta ignores it.
    pub fn default_learning_rate(self) -> f64 {
        match self {
            OptimizerKind::Adagrad => 1e-2,
            _ => 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// Falls back to [`OptimizerKind::default_learning_rate`].
    #[serde(default)]
    pub learning_rate: Option<f64>,
    /// Momentum memory, and the averaging factor of RMSprop and Adadelta.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Per-epoch decay exponent `α₀` in `η_e = e^{-α₀} η_{e-1}`.
    #[serde(default)]
    pub decay: f64,
}

fn default_gamma() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimizerConfig {
            kind,
            learning_rate: None,
            gamma: default_gamma(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            decay: 0.0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or_else(|| self.kind.default_learning_rate())
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.learning_rate();
        let ok = lr > 0.0
            && lr.is_finite()
            && (0.0..1.0).contains(&self.gamma)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer hyperparameters {self:?}")))
        }
    }
}

/// Gradient at shifted parameters, used by Nesterov's look-ahead.
pub type GradAt<'a> = dyn FnMut(&[Tensor]) -> Result<Vec<Tensor>> + 'a;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    /// Current (decayed) learning rate.
    pub learning_rate: f64,
    /// Number of completed steps `e`.
    pub step: u64,
    /// Squared-gradient accumulator; Adam keeps the bias-corrected `v̂` here.
    pub v: Vec<Tensor>,
    /// Second accumulator (Adadelta's `m`, Adam's bias-corrected `m̂`).
    pub m: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(OptimizerState { config, learning_rate: config.learning_rate(), step: 0, v: Vec::new(), m: Vec::new() })
    }

    fn ensure_shapes(&mut self, params: &[&mut Tensor]) -> Result<()> {
        if self.v.is_empty() {
            self.v = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.m = self.v.clone();
        }
        if self.v.len() != params.len() || self.v.iter().zip(params).any(|(v, p)| v.shape() != p.shape()) {
            return Err(Error::State("optimizer accumulators do not match the parameters".into()));
        }
        Ok(())
    }

    /// One update of every parameter. `grads` are `∂J/∂Θ` at the current
    /// parameters; Nesterov instead asks `grad_at` for them at `Θ - γ v`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], grad_at: Option<&mut GradAt<'_>>) -> Result<()> {
        self.ensure_shapes(params)?;
        let c = self.config;
        let lookahead;
        let grads = if c.kind == OptimizerKind::Nesterov {
            let f = grad_at.ok_or_else(|| Error::Config("Nesterov needs a gradient callback".into()))?;
            let shifted: Vec<Tensor> = params
                .iter()
                .zip(&self.v)
                .map(|(p, v)| p.zip_map(v, |p, v| p - c.gamma * v))
                .collect::<Result<_>>()?;
            lookahead = f(&shifted)?;
            &lookahead[..]
        } else {
            grads
        };
        if grads.len() != params.len() {
            return Err(Error::Dimension(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (g, p) in grads.iter().zip(params.iter()) {
            g.check_same_shape(p)?;
            if !g.all_finite() {
                return Err(Error::Numeric("non-finite gradient; step refused".into()));
            }
        }
        self.step += 1;
        let e = self.step as i32;
        let eta = self.learning_rate;
        let eps = c.epsilon;
        // m̂_e = m̂_{e-1} + (1-β)/(1-β^e) (Δ - m̂_{e-1}) equals m_e/(1-β^e) for m_e = β m_{e-1} + (1-β) Δ.
        let w1 = (1.0 - c.beta1) / (1.0 - c.beta1.powi(e));
        let w2 = (1.0 - c.beta2) / (1.0 - c.beta2.powi(e));
        for ((p, g), (v, m)) in params.iter_mut().zip(grads).zip(self.v.iter_mut().zip(self.m.iter_mut())) {
            let (p, g, v, m) = (p.data_mut(), g.data(), v.data_mut(), m.data_mut());
            for i in 0..p.len() {
                let d = g[i];
                match c.kind {
                    OptimizerKind::Sgd => p[i] -= eta * d,
                    OptimizerKind::Momentum | OptimizerKind::Nesterov => {
                        v[i] = c.gamma * v[i] + eta * d;
                        p[i] -= v[i];
                    }
                    OptimizerKind::Adagrad => {
                        v[i] += d * d;
                        p[i] -= eta / (v[i] + eps).sqrt() * d;
                    }
                    OptimizerKind::Rmsprop => {
                        v[i] = c.gamma * v[i] + (1.0 - c.gamma) * d * d;
                        p[i] -= eta / (v[i] + eps).sqrt() * d;
                    }
                    OptimizerKind::Adadelta => {
                        v[i] = c.gamma * v[i] + (1.0 - c.gamma) * d * d;
                        let step = (m[i] + eps).sqrt() / (v[i] + eps).sqrt() * d;
                        m[i] = c.gamma * m[i] + (1.0 - c.gamma) * step * step;
                        p[i] -= step;
                    }
                    OptimizerKind::Adam => {
                        // m and v hold the corrected moments; the weight is 1 at e = 1.
                        m[i] += (d - m[i]) * w1;
                        v[i] += (d * d - v[i]) * w2;
                        p[i] -= eta / (v[i] + eps).sqrt() * m[i];
                    }
                }
            }
        }
        Ok(())
    }

    /// Applies one epoch of learning-rate decay.
    pub fn end_epoch(&mut self) {
        self.learning_rate = lr_decay(self.learning_rate, self.config.decay);
    }
}

/// `η_e = e^{-α₀} η_{e-1}`.
pub fn lr_decay(eta: f64, alpha0: f64) -> f64 {
    (-alpha0).exp() * eta
}

/// Rescales `theta` onto the L2 ball of radius `c`; reports whether it did.
pub fn clip_weights(theta: &mut Tensor, c: f64) -> bool {
    let norm = theta.norm_l2();
    if norm > c {
        theta.scale(c / norm);
        true
    } else {
        false
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerConfig {
    #[serde(default)]
    pub l2: f64,
    #[serde(default)]
    pub l1: f64,
    /// Weight-norm ceiling `C`.
    #[serde(default)]
    pub clip: Option<f64>,
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l2 < 0.0 || self.l1 < 0.0 || self.clip.is_some_and(|c| c <= 0.0 || !c.is_finite()) {
            return Err(Error::Config(format!("invalid regularization {self:?}")));
        }
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        self.l2 > 0.0 || self.l1 > 0.0
    }
}

/// `λ_L2 ‖Θ‖² + λ_L1 ‖Θ‖₁`.
pub fn penalty(config: &RegularizerConfig, theta: &Tensor) -> f64 {
    config.l2 * theta.data().iter().map(|v| v * v).sum::<f64>() + config.l1 * theta.data().iter().map(|v| v.abs()).sum::<f64>()
}

/// `2 λ_L2 Θ + λ_L1 sign(Θ)` with `sign(0) = 0`.
pub fn penalty_grad(config: &RegularizerConfig, theta: &Tensor) -> Tensor {
    theta.map(|v| {
        let sign = if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        };
        2.0 * config.l2 * v + config.l1 * sign
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_fn;
    use proptest::prelude::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    /// Runs `steps` updates on `J = ½θ²` and returns the trajectory of `J`.
    fn quadratic_run(kind: OptimizerKind, steps: usize) -> Vec<f64> {
        let mut st = OptimizerState::new(OptimizerConfig::new(kind)).unwrap();
        let mut theta = scalar(1.0);
        let mut losses = vec![0.5];
        for _ in 0..steps {
            let g = vec![theta.clone()];
            let mut at = |p: &[Tensor]| Ok(p.to_vec());
            st.step(&mut [&mut theta], &g, Some(&mut at)).unwrap();
            losses.push(0.5 * theta.data()[0].powi(2));
        }
        losses
    }

    #[test]
    fn every_kind_descends_the_quadratic() {
        for kind in OptimizerKind::ALL {
            let j = quadratic_run(kind, 100);
            assert!(j.windows(2).all(|w| w[1] < w[0]), "{kind:?}: {:?}", &j[..5]);
        }
    }

    #[test]
    fn zero_momentum_is_sgd() {
        let mut a = OptimizerState::new(OptimizerConfig { gamma: 0.0, ..OptimizerConfig::new(OptimizerKind::Momentum) }).unwrap();
        let mut b = OptimizerState::new(OptimizerConfig::new(OptimizerKind::Sgd)).unwrap();
        let (mut pa, mut pb) = (Tensor::from_vec(&[3], vec![0.3, -1.2, 2.0]).unwrap(), Tensor::from_vec(&[3], vec![0.3, -1.2, 2.0]).unwrap());
        for k in 0..20 {
            let g = pa.map(|v| v.sin() + k as f64 * 0.01);
            a.step(&mut [&mut pa], &[g.clone()], None).unwrap();
            b.step(&mut [&mut pb], &[g], None).unwrap();
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn adam_first_step_is_bias_corrected() {
        let c = OptimizerConfig::new(OptimizerKind::Adam);
        let mut st = OptimizerState::new(c).unwrap();
        let mut p = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let g = Tensor::from_vec(&[2], vec![0.3, -7.1]).unwrap();
        st.step(&mut [&mut p], &[g.clone()], None).unwrap();
        for i in 0..2 {
            let d = g.data()[i];
            assert_eq!(st.m[0].data()[i], d);
            assert_eq!(st.v[0].data()[i], d * d);
            let expected = 1.0 - 1e-3 * d / (d * d + 1e-8).sqrt();
            assert!((p.data()[i] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_running_form_matches_the_division_form() {
        let c = OptimizerConfig::new(OptimizerKind::Adam);
        let mut st = OptimizerState::new(c).unwrap();
        let mut p = scalar(0.0);
        let (mut m, mut v) = (0.0, 0.0);
        for e in 1..=50 {
            let d = (e as f64 * 0.7).sin() * 3.0;
            st.step(&mut [&mut p], &[scalar(d)], None).unwrap();
            m = c.beta1 * m + (1.0 - c.beta1) * d;
            v = c.beta2 * v + (1.0 - c.beta2) * d * d;
            let m_hat = m / (1.0 - c.beta1.powi(e));
            let v_hat = v / (1.0 - c.beta2.powi(e));
            assert!((st.m[0].data()[0] - m_hat).abs() < 1e-12);
            assert!((st.v[0].data()[0] - v_hat).abs() < 1e-12);
        }
    }

    #[test]
    fn adagrad_accumulates_squares() {
        let mut st = OptimizerState::new(OptimizerConfig::new(OptimizerKind::Adagrad)).unwrap();
        let mut p = scalar(0.0);
        for e in 1..=7 {
            st.step(&mut [&mut p], &[scalar(0.5)], None).unwrap();
            assert_eq!(st.v[0].data()[0], e as f64 * 0.25);
        }
    }

    #[test]
    fn nesterov_needs_its_callback() {
        let mut st = OptimizerState::new(OptimizerConfig::new(OptimizerKind::Nesterov)).unwrap();
        let mut p = scalar(1.0);
        assert!(matches!(st.step(&mut [&mut p], &[scalar(1.0)], None), Err(Error::Config(_))));
    }

    #[test]
    fn nesterov_reads_the_lookahead_point() {
        let mut st = OptimizerState::new(OptimizerConfig { learning_rate: Some(0.1), ..OptimizerConfig::new(OptimizerKind::Nesterov) }).unwrap();
        let mut p = scalar(1.0);
        let mut seen = Vec::new();
        for _ in 0..2 {
            let mut at = |q: &[Tensor]| {
                seen.push(q[0].data()[0]);
                Ok(q.to_vec())
            };
            st.step(&mut [&mut p], &[], Some(&mut at)).unwrap();
        }
        // v1 = 0.1, θ1 = 0.9, look-ahead θ1 - 0.9 v1 = 0.81.
        assert_eq!(seen[0], 1.0);
        assert!((seen[1] - 0.81).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_refused() {
        let mut st = OptimizerState::new(OptimizerConfig::new(OptimizerKind::Adam)).unwrap();
        let mut p = scalar(1.0);
        assert!(matches!(st.step(&mut [&mut p], &[scalar(f64::NAN)], None), Err(Error::Numeric(_))));
        assert_eq!(p.data()[0], 1.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn decay_examples() {
        assert_eq!(lr_decay(0.1, 0.0), 0.1);
        assert!((lr_decay(0.1, 2f64.ln()) - 0.05).abs() < 1e-17);
        let mut eta = 0.3;
        for _ in 0..5 {
            eta = lr_decay(eta, 0.2);
        }
        assert!((eta - 0.3 * (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn clip_examples() {
        let mut t = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        assert!(clip_weights(&mut t, 1.0));
        assert!((t.data()[0] - 0.6).abs() < 1e-15 && (t.data()[1] - 0.8).abs() < 1e-15);
        let mut u = Tensor::from_vec(&[2], vec![0.3, 0.4]).unwrap();
        let before = u.clone();
        assert!(!clip_weights(&mut u, 1.0));
        assert_eq!(u, before);
    }

    #[test]
    fn penalty_gradient() {
        let cfg = RegularizerConfig { l2: 0.1, ..Default::default() };
        let t = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let g = penalty_grad(&cfg, &t);
        assert!((g.data()[0] - 0.2).abs() < 1e-15 && (g.data()[1] + 0.4).abs() < 1e-15);
        let both = RegularizerConfig { l2: 0.3, l1: 0.05, clip: None };
        let x = Tensor::from_vec(&[4], vec![0.7, -1.1, 0.05, -0.2]).unwrap();
        let fd = finite_diff_fn(&x, |v| Ok(penalty(&both, v)), 1e-6).unwrap();
        let an = penalty_grad(&both, &x);
        for (a, n) in an.data().iter().zip(fd.data()) {
            assert!((a - n).abs() / a.abs().max(n.abs()) <= 1e-7, "{a} vs {n}");
        }
        assert_eq!(penalty_grad(&RegularizerConfig::default(), &x).max_abs(), 0.0);
    }

    fn kind() -> impl Strategy<Value = OptimizerKind> {
        prop::sample::select(OptimizerKind::ALL.to_vec())
    }

    proptest! {
        #[test]
        fn accumulators_stay_non_negative(k in kind(), gs in prop::collection::vec(-10.0f64..10.0, 1..30)) {
            let mut st = OptimizerState::new(OptimizerConfig::new(k)).unwrap();
            let mut p = scalar(0.5);
            let mut last_v = 0.0;
            for g in gs {
                let mut at = |q: &[Tensor]| Ok(vec![q[0].map(|_| g)]);
                st.step(&mut [&mut p], &[scalar(g)], Some(&mut at)).unwrap();
                let v = st.v[0].data()[0];
                if matches!(k, OptimizerKind::Adagrad | OptimizerKind::Rmsprop | OptimizerKind::Adadelta | OptimizerKind::Adam) {
                    prop_assert!(v >= 0.0);
                }
                if k == OptimizerKind::Adagrad {
                    prop_assert!(v >= last_v);
                }
                last_v = v;
            }
        }

        #[test]
        fn updates_are_entrywise(k in kind(), base in prop::collection::vec(-2.0f64..2.0, 4), bump in -1.0f64..1.0, at in 0usize..4) {
            let run = |g: Vec<f64>| {
                let mut st = OptimizerState::new(OptimizerConfig::new(k)).unwrap();
                let mut p = Tensor::from_vec(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
                let gt = Tensor::from_vec(&[4], g).unwrap();
                let mut cb = |_: &[Tensor]| Ok(vec![gt.clone()]);
                st.step(&mut [&mut p], &[gt.clone()], Some(&mut cb)).unwrap();
                p
            };
            let a = run(base.clone());
            let mut moved = base.clone();
            moved[at] += bump;
            let b = run(moved);
            for i in (0..4).filter(|&i| i != at) {
                prop_assert_eq!(a.data()[i], b.data()[i]);
            }
        }

        #[test]
        fn clipped_norm_is_bounded(v in prop::collection::vec(-100.0f64..100.0, 1..20), c in 0.01f64..10.0) {
            let mut t = Tensor::from_vec(&[v.len()], v).unwrap();
            let was = t.norm_l2();
            clip_weights(&mut t, c);
            prop_assert!(t.norm_l2() <= c * (1.0 + 1e-12));
            if was > c {
                prop_assert!((t.norm_l2() - c).abs() <= 1e-12 * c.max(1.0));
            }
        }
    }
}
