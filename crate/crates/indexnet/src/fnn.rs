//! Fully connected networks.
//!
//! A hidden layer maps its input `x` through weight averaging `a = Θ x`, the
//! activation `h = g(a)` and, when enabled, batch normalization `y = γ h̃ + β`.
//! Without batch normalization a bias column can be appended to `Θ`; it reads
//! a constant input of 1.
//!
//! The error rate `δ` of a layer is the gradient of the loss with respect to
//! its pre-activation `a`.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::batchnorm::{BatchNorm, BnMode};
use crate::error::{dim_err, Error, Result};
use crate::nn_math::{activate, activate_prime, init_tensor, loss, ActivationKind, InitLaw, LossKind, LossValue};
use crate::params::Parameterized;
use crate::tensor::Tensor;

/// Default drop probability for the input layer.
pub const INPUT_DROP: f64 = 0.2;
/// Default drop probability for hidden layers.
pub const HIDDEN_DROP: f64 = 0.5;

/// Appends a column of ones.
pub fn augment(x: &Tensor) -> Result<Tensor> {
    let [t, f] = x.dims2()?;
    let mut out = Tensor::zeros(&[t, f + 1]);
    for tt in 0..t {
        out.outer_mut(tt)[..f].copy_from_slice(x.outer(tt));
        out.outer_mut(tt)[f] = 1.0;
    }
    Ok(out)
}

/// `Σ_f' Θ^{f'}_f δ_f'` per sample, restricted to the first `width` input columns.
pub fn backprop_through(theta: &Tensor, delta_above: &Tensor, width: usize) -> Result<Tensor> {
    let full = delta_above.matmul(theta)?;
    let [t, cols] = full.dims2()?;
    if cols == width {
        return Ok(full);
    }
    if cols < width {
        return dim_err(format!("weights with {cols} inputs cannot feed width {width}"));
    }
    let mut out = Tensor::zeros(&[t, width]);
    for tt in 0..t {
        out.outer_mut(tt).copy_from_slice(&full.outer(tt)[..width]);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    pub mask: Tensor,
    pub drop_probability: f64,
}

impl DropoutMask {
    /// Mask entries already divided by the keep probability.
    pub fn scaled(&self) -> Tensor {
        let keep = 1.0 - self.drop_probability;
        self.mask.map(|m| m / keep)
    }
}

fn draw_mask(shape: &[usize], p: f64, rng: &mut dyn RngCore) -> DropoutMask {
    let mut mask = Tensor::zeros(shape);
    for m in mask.data_mut() {
        *m = if rng.gen::<f64>() < p { 0.0 } else { 1.0 };
    }
    DropoutMask { mask, drop_probability: p }
}

/// Inverted dropout: training keeps each unit with probability `1-p` and rescales by `1/(1-p)`.
pub fn dropout_apply(h: &Tensor, p: f64, train: bool, rng_seed: u64) -> Result<(Tensor, DropoutMask)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("drop probability must lie in [0, 1), got {p}")));
    }
    if !train || p == 0.0 {
        let mask = DropoutMask { mask: Tensor::full(h.shape(), 1.0), drop_probability: p };
        return Ok((h.clone(), mask));
    }
    let mut rng = crate::nn_math::rng_from_seed(rng_seed);
    let mask = draw_mask(h.shape(), p, &mut rng);
    let out = h.zip_map(&mask.scaled(), |a, b| a * b)?;
    Ok((out, mask))
}

#[derive(Clone, Debug, PartialEq)]
struct DenseCache {
    input: Tensor,
    a: Tensor,
    h: Tensor,
    mask: Option<DropoutMask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `[F_out, F_in]`, or `[F_out, F_in + 1]` with a bias column.
    pub theta: Tensor,
    pub activation: ActivationKind,
    pub bn: Option<BatchNorm>,
    pub bias: bool,
    /// Drop probability applied to `h` during training.
    pub dropout: Option<f64>,
    cache: Option<DenseCache>,
}

impl DenseLayer {
    /// Freshly initialized layer; the bias column is present exactly when batch norm is off.
    pub fn new(f_in: usize, f_out: usize, activation: ActivationKind, bn: bool, law: InitLaw, rng: &mut dyn RngCore) -> Self {
        let cols = if bn { f_in } else { f_in + 1 };
        let mut theta = init_tensor(&[f_out, cols], f_in, f_out, law, rng);
        if !bn {
            for f in 0..f_out {
                theta[[f, f_in]] = 0.0;
            }
        }
        DenseLayer {
            theta,
            activation,
            bn: bn.then(|| BatchNorm::new(f_out, BnMode::PerFeature)),
            bias: !bn,
            dropout: None,
            cache: None,
        }
    }

    pub fn from_theta(theta: Tensor, activation: ActivationKind, bn: bool, bias: bool) -> Result<Self> {
        let [f_out, _] = theta.dims2()?;
        Ok(DenseLayer {
            theta,
            activation,
            bn: bn.then(|| BatchNorm::new(f_out, BnMode::PerFeature)),
            bias,
            dropout: None,
            cache: None,
        })
    }

    pub fn in_width(&self) -> usize {
        self.theta.dim(1) - usize::from(self.bias)
    }

    pub fn out_width(&self) -> usize {
        self.theta.dim(0)
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.rank() != 2 || input.dim(1) != self.in_width() {
            return dim_err(format!(
                "layer expects [T_mb, {}], got {:?}",
                self.in_width(),
                input.shape()
            ));
        }
        Ok(())
    }

    /// Weight averaging, optionally adding a pre-activation skip term.
    pub fn weight_average(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let x = if self.bias { augment(input)? } else { input.clone() };
        x.matmul_t(&self.theta)
    }

    /// Full layer forward; `skip` is added to `a` before the activation.
    pub fn forward(&mut self, input: &Tensor, skip: Option<&Tensor>, train: bool, rng: &mut dyn RngCore) -> Result<Tensor> {
        let mut a = self.weight_average(input)?;
        if let Some(s) = skip {
            a.axpy(1.0, s)?;
        }
        self.forward_from_preactivation(input, a, train, rng)
    }

    pub(crate) fn forward_from_preactivation(
        &mut self,
        input: &Tensor,
        a: Tensor,
        train: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Tensor> {
        let mut h = activate(self.activation, &a)?;
        let mut mask = None;
        if let (true, Some(p)) = (train, self.dropout) {
            let m = draw_mask(h.shape(), p, rng);
            h = h.zip_map(&m.scaled(), |x, s| x * s)?;
            mask = Some(m);
        }
        let y = match self.bn.as_mut() {
            Some(bn) if train => bn.forward_train(&h)?,
            Some(bn) => bn.forward_eval(&h)?,
            None => h.clone(),
        };
        let x = if self.bias { augment(input)? } else { input.clone() };
        self.cache = Some(DenseCache { input: x, a, h, mask });
        Ok(y)
    }

    fn cache(&self) -> Result<&DenseCache> {
        self.cache.as_ref().ok_or_else(|| Error::State("layer has no forward cache".into()))
    }

    pub fn pre_activation(&self) -> Option<&Tensor> {
        self.cache.as_ref().map(|c| &c.a)
    }

    pub fn activation_output(&self) -> Option<&Tensor> {
        self.cache.as_ref().map(|c| &c.h)
    }

    /// The input as seen by `Θ` (with the ones column when biased).
    pub fn cached_input(&self) -> Option<&Tensor> {
        self.cache.as_ref().map(|c| &c.input)
    }

    pub fn dropout_mask(&self) -> Option<&DropoutMask> {
        self.cache.as_ref().and_then(|c| c.mask.as_ref())
    }

    /// `δ = g'(a) ⊙ mask ⊙ Σ_t' J upstream` for the gradient `upstream` on the layer output.
    pub fn delta_from_upstream(&self, upstream: &Tensor) -> Result<Tensor> {
        let c = self.cache()?;
        let v = match &self.bn {
            Some(bn) => bn.contract(upstream)?,
            None => upstream.clone(),
        };
        let v = match &c.mask {
            Some(m) => v.zip_map(&m.scaled(), |x, s| x * s)?,
            None => v,
        };
        let gp = activate_prime(self.activation, &c.a)?;
        gp.zip_map(&v, |g, x| g * x)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
        if let Some(bn) = self.bn.as_mut() {
            bn.clear_cache();
        }
    }
}

/// `fc_forward` without dropout randomness.
pub fn fc_forward(layer: &mut DenseLayer, input: &Tensor, train: bool) -> Result<Tensor> {
    let mut rng = crate::nn_math::rng_from_seed(0);
    layer.forward(input, None, train, &mut rng)
}

/// `(h - y) / T_mb`, shared by MSE and the softmax cross-entropies.
pub fn output_delta(_loss_kind: LossKind, h_out: &Tensor, targets: &Tensor, t_mb: usize) -> Result<Tensor> {
    let n = t_mb as f64;
    h_out.zip_map(targets, |h, y| (h - y) / n)
}

/// `δ^(ν) = g'(a) Σ_t' J^(tt') Σ_f' Θ^{(ν+1)f'}_f δ^(ν+1)(t')`.
pub fn hidden_delta(
    theta_above: &Tensor,
    delta_above: &Tensor,
    bn_below: Option<&BatchNorm>,
    a_below: &Tensor,
    g_kind: ActivationKind,
) -> Result<Tensor> {
    let u = backprop_through(theta_above, delta_above, a_below.dim(1))?;
    let v = match bn_below {
        Some(bn) => bn.contract(&u)?,
        None => u,
    };
    activate_prime(g_kind, a_below)?.zip_map(&v, |g, x| g * x)
}

/// `ΔΘ^f_f' = Σ_t δ_f y_f'`.
pub fn weight_grad(delta: &Tensor, y_below: &Tensor) -> Result<Tensor> {
    if delta.dim(0) != y_below.dim(0) {
        return dim_err(format!("batch sizes {:?} and {:?}", delta.shape(), y_below.shape()));
    }
    delta.transpose()?.matmul(y_below)
}

/// `Δγ_f = Σ_t Σ_f' Θ^{f'}_f h̃_f δ_f'` and `Δβ_f = Σ_t Σ_f' Θ^{f'}_f δ_f'`.
pub fn coeff_grads(theta_above: &Tensor, delta_above: &Tensor, h_tilde: &Tensor) -> Result<(Tensor, Tensor)> {
    let [t, f] = h_tilde.dims2()?;
    let u = backprop_through(theta_above, delta_above, f)?;
    let mut dg = Tensor::zeros(&[f]);
    let mut db = Tensor::zeros(&[f]);
    for tt in 0..t {
        for ff in 0..f {
            dg.data_mut()[ff] += u[[tt, ff]] * h_tilde[[tt, ff]];
            db.data_mut()[ff] += u[[tt, ff]];
        }
    }
    Ok((dg, db))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    /// The block output gets the block input added after batch norm.
    NonStandard,
    /// The second block layer's pre-activation gets the pre-activation feeding the block.
    Standard,
}

/// A skip edge. `from` is a hidden-layer index.
///
/// `NonStandard` adds the input of layer `from` to the output of layer `from + 1`.
/// `Standard` adds the pre-activation of layer `from` to that of layer `from + 2`,
/// where index `L` (the hidden-layer count) names the output layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skip {
    pub from: usize,
    pub formulation: Formulation,
}

/// Forward through a two-layer block with its skip connection.
///
/// `Standard` needs `a_prev`, the pre-activation of the layer that produced `input`.
pub fn resnet_skip_forward(
    block: (&mut DenseLayer, &mut DenseLayer),
    input: &Tensor,
    formulation: Formulation,
    a_prev: Option<&Tensor>,
    train: bool,
) -> Result<Tensor> {
    let mut rng = crate::nn_math::rng_from_seed(0);
    let (first, second) = block;
    if second.out_width() != input.dim(1) {
        return dim_err(format!(
            "skip adds width {} to block output width {}",
            input.dim(1),
            second.out_width()
        ));
    }
    let mid = first.forward(input, None, train, &mut rng)?;
    match formulation {
        Formulation::NonStandard => {
            let mut y = second.forward(&mid, None, train, &mut rng)?;
            y.axpy(1.0, input)?;
            Ok(y)
        }
        Formulation::Standard => {
            let a = a_prev.ok_or_else(|| Error::Config("standard skip needs the feeding pre-activation".into()))?;
            second.forward(&mid, Some(a), train, &mut rng)
        }
    }
}

/// `δ^(ν-1) = g'(a) Σ_t' J [Σ_f' Θ^(ν) δ^(ν) + Σ_f' Θ^(ν+2) δ^(ν+2)]`.
#[allow(clippy::too_many_arguments)]
pub fn resnet_nonstandard_delta(
    theta_nu: &Tensor,
    delta_nu: &Tensor,
    theta_nu2: &Tensor,
    delta_nu2: &Tensor,
    bn: Option<&BatchNorm>,
    a: &Tensor,
    g_kind: ActivationKind,
) -> Result<Tensor> {
    let width = a.dim(1);
    let mut u = backprop_through(theta_nu, delta_nu, width)?;
    u.axpy(1.0, &backprop_through(theta_nu2, delta_nu2, width)?)?;
    let v = match bn {
        Some(bn) => bn.contract(&u)?,
        None => u,
    };
    activate_prime(g_kind, a)?.zip_map(&v, |g, x| g * x)
}

/// The usual hidden recursion plus the skip term `δ^(ν+2)`.
pub fn resnet_standard_delta(
    theta_above: &Tensor,
    delta_above: &Tensor,
    bn: Option<&BatchNorm>,
    a: &Tensor,
    g_kind: ActivationKind,
    delta_skip: &Tensor,
) -> Result<Tensor> {
    let mut d = hidden_delta(theta_above, delta_above, bn, a, g_kind)?;
    d.axpy(1.0, delta_skip)?;
    Ok(d)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputLayer {
    pub theta: Tensor,
    pub loss: LossKind,
    pub bias: bool,
    cache: Option<(Tensor, Tensor, Tensor)>,
}

impl OutputLayer {
    pub fn new(f_in: usize, f_out: usize, loss: LossKind, bias: bool, law: InitLaw, rng: &mut dyn RngCore) -> Self {
        let cols = f_in + usize::from(bias);
        let mut theta = init_tensor(&[f_out, cols], f_in, f_out, law, rng);
        if bias {
            for f in 0..f_out {
                theta[[f, f_in]] = 0.0;
            }
        }
        OutputLayer { theta, loss, bias, cache: None }
    }

    pub fn from_theta(theta: Tensor, loss: LossKind, bias: bool) -> Self {
        OutputLayer { theta, loss, bias, cache: None }
    }

    pub fn in_width(&self) -> usize {
        self.theta.dim(1) - usize::from(self.bias)
    }

    pub fn out_width(&self) -> usize {
        self.theta.dim(0)
    }

    pub fn forward(&mut self, input: &Tensor, skip: Option<&Tensor>) -> Result<Tensor> {
        if input.rank() != 2 || input.dim(1) != self.in_width() {
            return dim_err(format!("output layer expects [T_mb, {}], got {:?}", self.in_width(), input.shape()));
        }
        let x = if self.bias { augment(input)? } else { input.clone() };
        let mut a = x.matmul_t(&self.theta)?;
        if let Some(s) = skip {
            a.axpy(1.0, s)?;
        }
        let h = self.loss.output(&a)?;
        self.cache = Some((x, a, h.clone()));
        Ok(h)
    }

    pub fn pre_activation(&self) -> Option<&Tensor> {
        self.cache.as_ref().map(|c| &c.1)
    }

    pub fn prediction(&self) -> Option<&Tensor> {
        self.cache.as_ref().map(|c| &c.2)
    }

    pub fn cached_input(&self) -> Option<&Tensor> {
        self.cache.as_ref().map(|c| &c.0)
    }
}

/// Error rates and parameter gradients from one backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FnnBackward {
    /// One per hidden layer, then the output layer.
    pub deltas: Vec<Tensor>,
    /// Aligned with [`Parameterized::params`].
    pub grads: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FnnNetwork {
    pub layers: Vec<DenseLayer>,
    pub output: OutputLayer,
    pub input_dropout: Option<f64>,
    pub skips: Vec<Skip>,
    xs: Vec<Tensor>,
    input_mask: Option<DropoutMask>,
}

/// Layer description for [`FnnNetwork::build`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HiddenSpec {
    pub width: usize,
    pub activation: ActivationKind,
    pub batch_norm: bool,
    pub dropout: Option<f64>,
}

impl FnnNetwork {
    pub fn new(layers: Vec<DenseLayer>, output: OutputLayer) -> Result<Self> {
        let net = FnnNetwork {
            layers,
            output,
            input_dropout: None,
            skips: Vec::new(),
            xs: Vec::new(),
            input_mask: None,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn build(input: usize, hidden: &[HiddenSpec], outputs: usize, loss: LossKind, law: InitLaw, rng: &mut dyn RngCore) -> Result<Self> {
        let mut layers = Vec::new();
        let mut width = input;
        for spec in hidden {
            spec.activation.validate()?;
            let mut l = DenseLayer::new(width, spec.width, spec.activation, spec.batch_norm, law, rng);
            l.dropout = spec.dropout;
            layers.push(l);
            width = spec.width;
        }
        let bias = !hidden.last().is_some_and(|s| s.batch_norm);
        let output = OutputLayer::new(width, outputs, loss, bias, law, rng);
        FnnNetwork::new(layers, output)
    }

    pub fn with_skips(mut self, skips: Vec<Skip>) -> Result<Self> {
        self.skips = skips;
        self.validate()?;
        Ok(self)
    }

    fn widths_in(&self, i: usize) -> usize {
        if i < self.layers.len() {
            self.layers[i].in_width()
        } else {
            self.output.in_width()
        }
    }

    fn preact_width(&self, i: usize) -> usize {
        if i < self.layers.len() {
            self.layers[i].out_width()
        } else {
            self.output.out_width()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.layers.len();
        for i in 1..=l {
            let prev = self.layers[i - 1].out_width();
            if self.widths_in(i) != prev {
                return dim_err(format!("layer {i} reads width {} but receives {prev}", self.widths_in(i)));
            }
        }
        for s in &self.skips {
            match s.formulation {
                Formulation::NonStandard => {
                    if s.from + 1 >= l {
                        return Err(Error::Config(format!("skip from layer {} has no block", s.from)));
                    }
                    if self.layers[s.from].in_width() != self.layers[s.from + 1].out_width() {
                        return dim_err(format!("skip over layers {}..{} changes width", s.from, s.from + 1));
                    }
                }
                Formulation::Standard => {
                    if s.from + 2 > l {
                        return Err(Error::Config(format!("skip from layer {} has no target", s.from)));
                    }
                    if self.preact_width(s.from) != self.preact_width(s.from + 2) {
                        return dim_err(format!("pre-activation skip {} -> {} changes width", s.from, s.from + 2));
                    }
                }
            }
        }
        if let Some(p) = self.input_dropout {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("input drop probability {p} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.widths_in(0)
    }

    pub fn loss_kind(&self) -> LossKind {
        self.output.loss
    }

    pub fn uses_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| l.bn.is_some())
    }

    pub fn forward(&mut self, input: &Tensor, train: bool, rng: &mut dyn RngCore) -> Result<Tensor> {
        self.forward_probe(input, train, rng, None)
    }

    /// Forward pass with an optional additive offset on one layer's pre-activation.
    ///
    /// Layer index `L` (the hidden-layer count) addresses the output layer. Used to
    /// measure `∂J/∂a` by finite differences.
    pub fn forward_probe(
        &mut self,
        input: &Tensor,
        train: bool,
        rng: &mut dyn RngCore,
        offset: Option<(usize, &Tensor)>,
    ) -> Result<Tensor> {
        let l = self.layers.len();
        let x0 = match (train, self.input_dropout) {
            (true, Some(p)) => {
                let m = draw_mask(input.shape(), p, rng);
                let x = input.zip_map(&m.scaled(), |a, s| a * s)?;
                self.input_mask = Some(m);
                x
            }
            _ => {
                self.input_mask = None;
                input.clone()
            }
        };
        let mut xs = vec![x0];
        let mut preacts: Vec<Tensor> = Vec::with_capacity(l + 1);
        for i in 0..l {
            let mut a = self.layers[i].weight_average(&xs[i])?;
            for s in &self.skips {
                if s.formulation == Formulation::Standard && s.from + 2 == i {
                    a.axpy(1.0, &preacts[s.from])?;
                }
            }
            if let Some((j, off)) = offset {
                if j == i {
                    a.axpy(1.0, off)?;
                }
            }
            preacts.push(a.clone());
            let mut y = self.layers[i].forward_from_preactivation(&xs[i], a, train, rng)?;
            for s in &self.skips {
                if s.formulation == Formulation::NonStandard && s.from + 1 == i {
                    y.axpy(1.0, &xs[s.from])?;
                }
            }
            xs.push(y);
        }
        let mut extra: Option<Tensor> = None;
        for s in &self.skips {
            if s.formulation == Formulation::Standard && s.from + 2 == l {
                extra = Some(preacts[s.from].clone());
            }
        }
        if let Some((j, off)) = offset {
            if j == l {
                match extra.as_mut() {
                    Some(e) => e.axpy(1.0, off)?,
                    None => extra = Some(off.clone()),
                }
            }
        }
        let h = self.output.forward(&xs[l], extra.as_ref())?;
        self.xs = xs;
        Ok(h)
    }

    pub fn loss(&self, targets: &Tensor) -> Result<LossValue> {
        let h = self
            .output
            .prediction()
            .ok_or_else(|| Error::State("loss before forward".into()))?;
        loss(self.output.loss, h, targets, h.dim(0))
    }

    /// Pre-activations feeding kinked activations, for the gradient-check skip rule.
    pub fn kink_preactivations(&self) -> Vec<f64> {
        self.layers
            .iter()
            .filter(|l| l.activation.has_kink())
            .filter_map(|l| l.pre_activation())
            .flat_map(|a| a.data().iter().copied())
            .collect()
    }

    pub fn backward(&self, targets: &Tensor) -> Result<FnnBackward> {
        let l = self.layers.len();
        let h = self
            .output
            .prediction()
            .ok_or_else(|| Error::State("backward before forward".into()))?;
        let t_mb = h.dim(0);
        let out_delta = output_delta(self.output.loss, h, targets, t_mb)?;
        let mut deltas: Vec<Option<Tensor>> = vec![None; l + 1];
        deltas[l] = Some(out_delta.clone());
        // Gradient with respect to xs[i], the input of layer i.
        let mut ups: Vec<Option<Tensor>> = vec![None; l + 1];
        let add = |slot: &mut Option<Tensor>, v: Tensor| -> Result<()> {
            match slot {
                Some(s) => s.axpy(1.0, &v),
                None => {
                    *slot = Some(v);
                    Ok(())
                }
            }
        };
        add(&mut ups[l], backprop_through(&self.output.theta, &out_delta, self.output.in_width())?)?;
        let mut bn_up: Vec<Option<Tensor>> = vec![None; l];
        for i in (0..l).rev() {
            let up = ups[i + 1]
                .clone()
                .ok_or_else(|| Error::State(format!("no gradient reached layer {i}")))?;
            for s in &self.skips {
                if s.formulation == Formulation::NonStandard && s.from + 1 == i {
                    add(&mut ups[s.from], up.clone())?;
                }
            }
            let layer = &self.layers[i];
            let mut d = layer.delta_from_upstream(&up)?;
            for s in &self.skips {
                if s.formulation == Formulation::Standard && s.from == i {
                    let skip = deltas[i + 2].as_ref().expect("written before read");
                    d.axpy(1.0, skip)?;
                }
            }
            add(&mut ups[i], backprop_through(&layer.theta, &d, layer.in_width())?)?;
            bn_up[i] = Some(up);
            deltas[i] = Some(d);
        }
        let mut grads = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let d = deltas[i].as_ref().expect("all deltas written");
            let x = layer.cached_input().expect("forward cached");
            grads.push(weight_grad(d, x)?);
            if let Some(bn) = &layer.bn {
                let (dg, db) = bn.coeff_grads(bn_up[i].as_ref().expect("upstream kept"))?;
                grads.push(dg);
                grads.push(db);
            }
        }
        grads.push(weight_grad(&out_delta, self.output.cached_input().expect("forward cached"))?);
        Ok(FnnBackward {
            deltas: deltas.into_iter().map(|d| d.expect("all deltas written")).collect(),
            grads,
        })
    }

    /// Updates every batch-norm running statistic from the last training forward.
    pub fn update_running(&mut self) -> Result<()> {
        for l in &mut self.layers {
            if let Some(bn) = l.bn.as_mut() {
                bn.update_running()?;
            }
        }
        Ok(())
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm> {
        self.layers.iter().filter_map(|l| l.bn.as_ref()).collect()
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        self.layers.iter_mut().filter_map(|l| l.bn.as_mut()).collect()
    }

    /// Indices into the parameter list that hold weights (as opposed to BN coefficients).
    pub fn weight_param_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut k = 0;
        for l in &self.layers {
            out.push(k);
            k += if l.bn.is_some() { 3 } else { 1 };
        }
        out.push(k);
        out
    }
}

impl Parameterized for FnnNetwork {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.theta"), &l.theta));
            if let Some(bn) = &l.bn {
                out.push((format!("layer{i}.gamma"), &bn.gamma));
                out.push((format!("layer{i}.beta"), &bn.beta));
            }
        }
        out.push(("output.theta".to_string(), &self.output.theta));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self.layers.iter_mut() {
            out.push(&mut l.theta);
            if let Some(bn) = l.bn.as_mut() {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out.push(&mut self.output.theta);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, compare_tensors, finite_diff_fn, GradCheckConfig, Probe};
    use crate::nn_math::rng_from_seed;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn one_hot(t: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        let mut y = Tensor::zeros(&[t, c]);
        for tt in 0..t {
            y[[tt, rng.gen_range(0..c)]] = 1.0;
        }
        y
    }

    fn net(act: ActivationKind, bn: bool, loss: LossKind, seed: u64) -> FnnNetwork {
        let mut rng = rng_from_seed(seed);
        let spec = |w| HiddenSpec { width: w, activation: act, batch_norm: bn, dropout: None };
        let mut n = FnnNetwork::build(4, &[spec(6), spec(5)], 3, loss, InitLaw::Normal, &mut rng).unwrap();
        for l in n.layers.iter_mut() {
            if let Some(bn) = l.bn.as_mut() {
                bn.gamma = random(&[bn.features()], seed + 100).map(|g| 1.0 + 0.5 * g);
                bn.beta = random(&[bn.features()], seed + 200).map(|b| 0.5 * b);
            }
        }
        n
    }

    #[test]
    fn hand_forward() {
        let theta = Tensor::from_rows(&[[1.0, 1.0], [0.0, 1.0]]).unwrap();
        let mut l = DenseLayer::from_theta(theta, ActivationKind::Relu, false, false).unwrap();
        let x = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        assert_eq!(fc_forward(&mut l, &x, true).unwrap().data(), &[3.0, 2.0]);
        let mut id = DenseLayer::from_theta(Tensor::eye(2), ActivationKind::Relu, false, false).unwrap();
        assert_eq!(fc_forward(&mut id, &x, true).unwrap(), x);
        let mut z = DenseLayer::from_theta(random(&[3, 2], 1), ActivationKind::Tanh, false, false).unwrap();
        assert_eq!(fc_forward(&mut z, &Tensor::zeros(&[2, 2]), false).unwrap().max_abs(), 0.0);
        assert!(fc_forward(&mut z, &Tensor::zeros(&[2, 3]), false).is_err());
    }

    #[test]
    fn output_delta_hand_case() {
        let h = Tensor::from_rows(&[[0.5, 0.5]]).unwrap();
        let y = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        assert_eq!(output_delta(LossKind::CrossEntropy, &h, &y, 1).unwrap().data(), &[-0.5, 0.5]);
    }

    #[test]
    fn xent_delta_matches_preactivation_differences() {
        let a = random(&[3, 4], 5);
        let y = one_hot(3, 4, 6);
        let f = |a: &Tensor| {
            let h = LossKind::CrossEntropy.output(a)?;
            Ok(loss(LossKind::CrossEntropy, &h, &y, 3)?.value)
        };
        let fd = finite_diff_fn(&a, f, 1e-5).unwrap();
        let h = LossKind::CrossEntropy.output(&a).unwrap();
        let d = output_delta(LossKind::CrossEntropy, &h, &y, 3).unwrap();
        assert!(compare_tensors("d", &d, &fd, 1e-5, 1e-6).unwrap().pass);
    }

    #[test]
    fn hidden_delta_without_bn_hand_case() {
        let theta = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let da = Tensor::from_rows(&[[1.0, -1.0]]).unwrap();
        let a = Tensor::from_rows(&[[0.5, -0.5]]).unwrap();
        let d = hidden_delta(&theta, &da, None, &a, ActivationKind::Relu).unwrap();
        assert_eq!(d.data(), &[-2.0, 0.0]);
        let zero = hidden_delta(&theta, &Tensor::zeros(&[1, 2]), None, &a, ActivationKind::Tanh).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
    }

    #[test]
    fn textbook_recursion_batch_of_one() {
        let mut n = net(ActivationKind::Tanh, false, LossKind::Mse, 3);
        let x = random(&[1, 4], 4);
        let y = random(&[1, 3], 5);
        let mut rng = rng_from_seed(0);
        n.forward(&x, true, &mut rng).unwrap();
        let b = n.backward(&y).unwrap();
        // scalar loops over the same weights
        let h = n.output.prediction().unwrap();
        let mut d_next: Vec<f64> = (0..3).map(|f| h[[0, f]] - y[[0, f]]).collect();
        let mut theta_next = n.output.theta.clone();
        for i in (0..2).rev() {
            let a = n.layers[i].pre_activation().unwrap();
            let w = n.layers[i].out_width();
            let d: Vec<f64> = (0..w)
                .map(|f| {
                    let s: f64 = (0..d_next.len()).map(|k| theta_next[[k, f]] * d_next[k]).sum();
                    (1.0 - a[[0, f]].tanh().powi(2)) * s
                })
                .collect();
            for f in 0..w {
                assert!((d[f] - b.deltas[i][[0, f]]).abs() < 1e-15);
            }
            d_next = d;
            theta_next = n.layers[i].theta.clone();
        }
    }

    #[test]
    fn weight_grad_outer_product() {
        let d = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        let y = Tensor::from_rows(&[[3.0, 4.0]]).unwrap();
        assert_eq!(weight_grad(&d, &y).unwrap().data(), &[3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn coeff_grads_factor_structure() {
        let theta = random(&[3, 2], 1);
        let d = random(&[4, 3], 2);
        let (dg, db) = coeff_grads(&theta, &d, &Tensor::zeros(&[4, 2])).unwrap();
        assert_eq!(dg.max_abs(), 0.0);
        assert!(db.max_abs() > 0.0);
        let (dg0, db0) = coeff_grads(&theta, &Tensor::zeros(&[4, 3]), &random(&[4, 2], 3)).unwrap();
        assert_eq!(dg0.max_abs() + db0.max_abs(), 0.0);
    }

    #[test]
    fn dropout_behaviour() {
        let h = random(&[10, 10], 1);
        let (same, mask) = dropout_apply(&h, 0.0, true, 3).unwrap();
        assert_eq!(same, h);
        assert!(mask.mask.data().iter().all(|&m| m == 1.0));
        assert_eq!(dropout_apply(&h, 0.9, false, 3).unwrap().0, h);
        let big = Tensor::full(&[100_000], 1.0);
        let (_, m) = dropout_apply(&big, 0.5, true, 8).unwrap();
        let rate = 1.0 - m.mask.sum() / 100_000.0;
        assert!((rate - 0.5).abs() < 0.01);
        assert!(dropout_apply(&h, 1.0, true, 1).is_err());
    }

    fn probe_for(x: Tensor, y: Tensor, seed: u64) -> impl FnMut(&mut FnnNetwork) -> Result<Probe> {
        move |n: &mut FnnNetwork| {
            let mut rng = rng_from_seed(seed);
            n.forward(&x, true, &mut rng)?;
            Ok(Probe { loss: n.loss(&y)?.value, kinks: n.kink_preactivations() })
        }
    }

    fn grads_for(n: &mut FnnNetwork, x: &Tensor, y: &Tensor, seed: u64) -> FnnBackward {
        let mut rng = rng_from_seed(seed);
        n.forward(x, true, &mut rng).unwrap();
        n.backward(y).unwrap()
    }

    #[test]
    fn full_network_gradients_match_finite_differences() {
        for (k, &act) in ActivationKind::ALL_DEFAULT.iter().enumerate() {
            for bn in [false, true] {
                for loss_kind in [LossKind::Mse, LossKind::CrossEntropy] {
                    let seed = 10 + k as u64;
                    let mut n = net(act, bn, loss_kind, seed);
                    let x = random(&[5, 4], seed + 1);
                    let y = match loss_kind {
                        LossKind::Mse => random(&[5, 3], seed + 2),
                        _ => one_hot(5, 3, seed + 2),
                    };
                    let b = grads_for(&mut n, &x, &y, 0);
                    let r = check(&mut n, &b.grads, probe_for(x, y, 0), &GradCheckConfig::default()).unwrap();
                    assert!(r.pass, "{act:?} bn={bn} {loss_kind:?}\n{}", r.to_text());
                }
            }
        }
    }

    #[test]
    fn deltas_match_preactivation_differences() {
        let mut n = net(ActivationKind::Elu, true, LossKind::CrossEntropy, 4);
        let x = random(&[4, 4], 5);
        let y = one_hot(4, 3, 6);
        let b = grads_for(&mut n, &x, &y, 0);
        for i in 0..=n.layers.len() {
            let shape = b.deltas[i].shape().to_vec();
            let fd = finite_diff_fn(
                &Tensor::zeros(&shape),
                |off| {
                    let mut rng = rng_from_seed(0);
                    n.forward_probe(&x, true, &mut rng, Some((i, off)))?;
                    Ok(n.loss(&y)?.value)
                },
                1e-5,
            )
            .unwrap();
            let r = compare_tensors("delta", &b.deltas[i], &fd, 1e-5, 1e-5).unwrap();
            assert!(r.pass, "layer {i}\n{}", r.to_text());
        }
    }

    #[test]
    fn dropout_with_frozen_mask_passes_gradcheck() {
        let mut n = net(ActivationKind::Sigmoid, false, LossKind::CrossEntropy, 21);
        n.input_dropout = Some(INPUT_DROP);
        for l in n.layers.iter_mut() {
            l.dropout = Some(HIDDEN_DROP);
        }
        let x = random(&[5, 4], 22);
        let y = one_hot(5, 3, 23);
        let b = grads_for(&mut n, &x, &y, 99);
        let r = check(&mut n, &b.grads, probe_for(x.clone(), y, 99), &GradCheckConfig::default()).unwrap();
        assert!(r.pass, "{}", r.to_text());
        let mut rng = rng_from_seed(1);
        let e1 = n.forward(&x, false, &mut rng).unwrap();
        let e2 = n.forward(&x, false, &mut rng).unwrap();
        assert_eq!(e1, e2);
    }

    fn resnet(formulation: Formulation, bn: bool) -> FnnNetwork {
        let mut rng = rng_from_seed(31);
        let spec = HiddenSpec { width: 4, activation: ActivationKind::Tanh, batch_norm: bn, dropout: None };
        let n = FnnNetwork::build(4, &[spec; 4], 3, LossKind::CrossEntropy, InitLaw::Normal, &mut rng).unwrap();
        let skips = match formulation {
            Formulation::NonStandard => vec![Skip { from: 1, formulation }],
            Formulation::Standard => vec![Skip { from: 0, formulation }, Skip { from: 1, formulation }],
        };
        n.with_skips(skips).unwrap()
    }

    #[test]
    fn resnet_gradients_match_finite_differences() {
        for formulation in [Formulation::NonStandard, Formulation::Standard] {
            for bn in [false, true] {
                let mut n = resnet(formulation, bn);
                let x = random(&[5, 4], 32);
                let y = one_hot(5, 3, 33);
                let b = grads_for(&mut n, &x, &y, 0);
                let r = check(&mut n, &b.grads, probe_for(x, y, 0), &GradCheckConfig::default()).unwrap();
                assert!(r.pass, "{formulation:?} bn={bn}\n{}", r.to_text());
            }
        }
    }

    #[test]
    fn resnet_printed_deltas_equal_network_deltas() {
        let mut n = resnet(Formulation::NonStandard, true);
        let x = random(&[5, 4], 34);
        let y = one_hot(5, 3, 35);
        let b = grads_for(&mut n, &x, &y, 0);
        // skip from layer 1 adds the input of layer 1 to the output of layer 2,
        // so layer 0's output feeds layers 1 and 3.
        let l0 = &n.layers[0];
        let printed = resnet_nonstandard_delta(
            &n.layers[1].theta,
            &b.deltas[1],
            &n.layers[3].theta,
            &b.deltas[3],
            l0.bn.as_ref(),
            l0.pre_activation().unwrap(),
            l0.activation,
        )
        .unwrap();
        assert!(printed.max_abs_diff(&b.deltas[0]).unwrap() < 1e-14);

        let mut s = resnet(Formulation::Standard, true);
        let b = grads_for(&mut s, &x, &y, 0);
        let l0 = &s.layers[0];
        let printed = resnet_standard_delta(
            &s.layers[1].theta,
            &b.deltas[1],
            l0.bn.as_ref(),
            l0.pre_activation().unwrap(),
            l0.activation,
            &b.deltas[2],
        )
        .unwrap();
        assert!(printed.max_abs_diff(&b.deltas[0]).unwrap() < 1e-14);
    }

    #[test]
    fn resnet_block_with_zero_weights() {
        let mut rng = rng_from_seed(4);
        let mut first = DenseLayer::new(3, 3, ActivationKind::Tanh, true, InitLaw::Normal, &mut rng);
        let mut second = DenseLayer::new(3, 3, ActivationKind::Tanh, true, InitLaw::Normal, &mut rng);
        first.theta.fill(0.0);
        second.theta.fill(0.0);
        let x = random(&[4, 3], 5);
        let y = resnet_skip_forward((&mut first, &mut second), &x, Formulation::NonStandard, None, true).unwrap();
        // tanh(0) = 0 gives a constant batch, which batch norm maps to β = 0
        assert!(y.max_abs_diff(&x).unwrap() < 1e-15);

        let a_prev = random(&[4, 3], 6);
        let mut second = DenseLayer::from_theta(Tensor::zeros(&[3, 3]), ActivationKind::Tanh, false, false).unwrap();
        resnet_skip_forward((&mut first, &mut second), &x, Formulation::Standard, Some(&a_prev), true).unwrap();
        assert_eq!(second.pre_activation().unwrap(), &a_prev);

        let zero = resnet_standard_delta(
            &Tensor::zeros(&[3, 3]),
            &random(&[4, 3], 7),
            None,
            &random(&[4, 3], 8),
            ActivationKind::Tanh,
            &random(&[4, 3], 9),
        )
        .unwrap();
        assert_eq!(zero, random(&[4, 3], 9));
    }
}
