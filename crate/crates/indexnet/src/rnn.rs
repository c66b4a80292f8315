//! Recurrent networks unrolled over a (layer ν, time τ) grid.
//!
//! Inputs and outputs are `[T_mb, F, T]`. Hidden layer `k` (layer
//! `ν = k + 1`) reads the layer below at the same `τ` through its spatial
//! weights and its own previous output through its temporal weights. The
//! temporal input is the batch-normalized `y` when BN is on.
//!
//! The recorded error rate `dh[k][τ]` is `∂J/∂h` of hidden layer `k` at step
//! `τ`, the quantity the backward recursion carries. Gate pre-activation gradients
//! follow from it by the local derivatives `𝒯 = 1 - h²` (plain RNN) or the
//! `𝒪, ℐ, ℱ, 𝒢` factors (LSTM).

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::batchnorm::{BatchNorm, BnMode};
use crate::error::{dim_err, Error, Result};
use crate::fnn::{augment, backprop_through, output_delta, weight_grad};
use crate::nn_math::{init_lstm_diagonal, init_tensor, loss, sigmoid, InitLaw, LossKind, LossValue};
use crate::params::Parameterized;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LstmMode {
    /// The printed h-only recursion: the cell error of step τ sees only `h_τ`.
    PaperFaithful,
    /// Adds the direct `c_τ → c_{τ+1}` path, `δc_τ += f_{τ+1} δc_{τ+1}`.
    #[default]
    FullGradient,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Rnn,
    Lstm,
}

impl CellKind {
    pub fn gates(self) -> usize {
        match self {
            CellKind::Rnn => 1,
            CellKind::Lstm => 4,
        }
    }

    fn gate_names(self) -> &'static [&'static str] {
        match self {
            CellKind::Rnn => &["h"],
            CellKind::Lstm => &["i", "f", "o", "g"],
        }
    }
}

const I: usize = 0;
const F: usize = 1;
const O: usize = 2;
const G: usize = 3;

/// Columns `τ` of a `[T_mb, F, T]` tensor as a `[T_mb, F]` matrix.
pub fn time_slice(x: &Tensor, tau: usize) -> Result<Tensor> {
    if x.rank() != 3 || tau >= x.dim(2) {
        return dim_err(format!("time slice {tau} of {:?}", x.shape()));
    }
    let (t_mb, f, t) = (x.dim(0), x.dim(1), x.dim(2));
    let mut out = Tensor::zeros(&[t_mb, f]);
    for s in 0..t_mb {
        for ff in 0..f {
            out[[s, ff]] = x.data()[(s * f + ff) * t + tau];
        }
    }
    Ok(out)
}

/// Inverse of [`time_slice`] over all steps.
pub fn stack_time(slices: &[Tensor]) -> Result<Tensor> {
    let Some(first) = slices.first() else {
        return dim_err("no time steps to stack");
    };
    let [t_mb, f] = first.dims2()?;
    let t = slices.len();
    let mut out = Tensor::zeros(&[t_mb, f, t]);
    for (tau, s) in slices.iter().enumerate() {
        first.check_same_shape(s)?;
        for i in 0..t_mb {
            for ff in 0..f {
                out.data_mut()[(i * f + ff) * t + tau] = s[[i, ff]];
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentLayer {
    /// Per gate `[F, F_in (+1 with bias)]`.
    pub spatial: Vec<Tensor>,
    /// Per gate `[F, F]`.
    pub temporal: Vec<Tensor>,
    /// One per time step, or empty without BN.
    pub bn: Vec<BatchNorm>,
    pub bias: bool,
}

impl RecurrentLayer {
    pub fn width(&self) -> usize {
        self.spatial[0].dim(0)
    }

    pub fn in_width(&self) -> usize {
        self.spatial[0].dim(1) - usize::from(self.bias)
    }

    pub fn uses_batch_norm(&self) -> bool {
        !self.bn.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct CellCache {
    /// Spatial input as multiplied (augmented when biased).
    x: Tensor,
    /// Gate activations in gate order.
    gates: Vec<Tensor>,
    c: Option<Tensor>,
    h: Tensor,
    y: Tensor,
}

/// Where a finite-difference probe offset is added.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeSite {
    /// Hidden output `h` (before batch norm).
    Hidden,
    /// Plain-RNN pre-activation.
    PreActivation,
}

#[derive(Clone, Copy, Debug)]
pub struct ProbeOffset<'a> {
    pub layer: usize,
    pub step: usize,
    pub site: ProbeSite,
    pub offset: &'a Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentBackward {
    /// `∂J/∂h` per hidden layer and step.
    pub dh: Vec<Vec<Tensor>>,
    /// Gate pre-activation gradients per layer, step and gate.
    pub gate_deltas: Vec<Vec<Vec<Tensor>>>,
    /// Output-layer error rates per step.
    pub output_deltas: Vec<Tensor>,
    pub grads: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentSpec {
    pub kind: CellKind,
    pub input: usize,
    pub hidden: Vec<usize>,
    pub outputs: usize,
    pub steps: usize,
    pub loss: LossKind,
    pub batch_norm: bool,
    pub law: InitLaw,
    /// LSTM temporal matrices start at `½ I (1 + noise)`.
    pub diagonal_init: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentNetwork {
    pub kind: CellKind,
    pub mode: LstmMode,
    pub layers: Vec<RecurrentLayer>,
    /// `[F_out, F_last (+1)]`.
    pub output: Tensor,
    pub output_bias: bool,
    pub loss: LossKind,
    pub steps: usize,
    cache: Option<Unroll>,
}

#[derive(Clone, Debug, PartialEq)]
struct Unroll {
    cells: Vec<Vec<CellCache>>,
    out_x: Vec<Tensor>,
    out_h: Vec<Tensor>,
    teacher_forced: bool,
    train: bool,
}

impl RecurrentNetwork {
    pub fn build(spec: &RecurrentSpec, rng: &mut dyn RngCore) -> Result<Self> {
        spec.loss.validate()?;
        if spec.hidden.is_empty() || spec.steps == 0 {
            return Err(Error::Config("a recurrent network needs a hidden layer and T ≥ 1".into()));
        }
        let gates = spec.kind.gates();
        let bias = !spec.batch_norm;
        let mut layers = Vec::new();
        let mut f_in = spec.input;
        for (k, &w) in spec.hidden.iter().enumerate() {
            let mut spatial = Vec::new();
            let mut temporal = Vec::new();
            for _ in 0..gates {
                let mut s = init_tensor(&[w, f_in + usize::from(bias)], f_in, w, spec.law, rng);
                if bias {
                    for r in 0..w {
                        s[[r, f_in]] = 0.0;
                    }
                }
                spatial.push(s);
                temporal.push(if spec.diagonal_init {
                    init_lstm_diagonal(w, w, true, rng.next_u64() ^ k as u64)?
                } else {
                    init_tensor(&[w, w], w, w, spec.law, rng)
                });
            }
            let bn = if spec.batch_norm {
                (0..spec.steps).map(|_| BatchNorm::new(w, BnMode::PerFeature)).collect()
            } else {
                Vec::new()
            };
            layers.push(RecurrentLayer { spatial, temporal, bn, bias });
            f_in = w;
        }
        let mut output = init_tensor(&[spec.outputs, f_in + usize::from(bias)], f_in, spec.outputs, spec.law, rng);
        if bias {
            for r in 0..spec.outputs {
                output[[r, f_in]] = 0.0;
            }
        }
        Ok(RecurrentNetwork {
            kind: spec.kind,
            mode: LstmMode::default(),
            layers,
            output,
            output_bias: bias,
            loss: spec.loss,
            steps: spec.steps,
            cache: None,
        })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].in_width()
    }

    pub fn output_width(&self) -> usize {
        self.output.dim(0)
    }

    pub fn uses_batch_norm(&self) -> bool {
        self.layers.iter().any(RecurrentLayer::uses_batch_norm)
    }

    /// Teacher-forced forward over every column of `inputs`.
    pub fn forward(&mut self, inputs: &Tensor, train: bool) -> Result<Tensor> {
        self.unroll(inputs, None, train, None)
    }

    pub fn forward_probe(&mut self, inputs: &Tensor, train: bool, probe: Option<ProbeOffset<'_>>) -> Result<Tensor> {
        self.unroll(inputs, None, train, probe)
    }

    /// Reads the `prefix` columns, then feeds each output back as the next input
    /// for `steps` more columns. Returns all `prefix + steps` outputs.
    pub fn generate(&mut self, prefix: &Tensor, steps: usize) -> Result<Tensor> {
        if self.output_width() != self.input_width() {
            return Err(Error::Config("generation needs as many outputs as inputs".into()));
        }
        self.unroll(prefix, Some(steps), false, None)
    }

    fn unroll(&mut self, inputs: &Tensor, extra: Option<usize>, train: bool, probe: Option<ProbeOffset<'_>>) -> Result<Tensor> {
        if inputs.rank() != 3 || inputs.dim(1) != self.input_width() {
            return dim_err(format!("recurrent input must be [T_mb, {}, T], got {:?}", self.input_width(), inputs.shape()));
        }
        let prefix = inputs.dim(2);
        let total = prefix + extra.unwrap_or(0);
        if prefix == 0 {
            return dim_err("recurrent input has no time steps");
        }
        if self.uses_batch_norm() && total > self.steps {
            return Err(Error::Config(format!(
                "batch-normalized recurrent network has {} cells per layer, asked for {total}",
                self.steps
            )));
        }
        if train && extra.is_some() {
            return Err(Error::Unsupported("generation mode is forward-only".into()));
        }
        let t_mb = inputs.dim(0);
        let lstm = self.kind == CellKind::Lstm;
        let mut cells: Vec<Vec<CellCache>> = vec![Vec::with_capacity(total); self.layers.len()];
        let mut out_x = Vec::with_capacity(total);
        let mut out_h: Vec<Tensor> = Vec::with_capacity(total);
        for tau in 0..total {
            let mut x = if tau < prefix { time_slice(inputs, tau)? } else { out_h[tau - 1].clone() };
            for (k, layer) in self.layers.iter_mut().enumerate() {
                let xin = if layer.bias { augment(&x)? } else { x.clone() };
                let prev = (tau > 0).then(|| &cells[k][tau - 1]);
                let probe_here = probe.filter(|p| p.layer == k && p.step == tau);
                let mut pre = Vec::with_capacity(layer.spatial.len());
                for (g, (s, tm)) in layer.spatial.iter().zip(&layer.temporal).enumerate() {
                    let mut a = xin.matmul_t(s)?;
                    if let Some(p) = prev {
                        a.axpy(1.0, &p.y.matmul_t(tm)?)?;
                    }
                    if let Some(p) = probe_here.filter(|p| p.site == ProbeSite::PreActivation) {
                        if lstm || g > 0 {
                            return Err(Error::Unsupported("pre-activation probes address plain RNN cells".into()));
                        }
                        a.axpy(1.0, p.offset)?;
                    }
                    pre.push(a);
                }
                let (gates, c, mut h) = if lstm {
                    let i = pre[I].map(sigmoid);
                    let f = pre[F].map(sigmoid);
                    let o = pre[O].map(sigmoid);
                    let g = pre[G].map(f64::tanh);
                    let mut c = i.zip_map(&g, |a, b| a * b)?;
                    if let Some(p) = prev {
                        let carried = f.zip_map(p.c.as_ref().expect("lstm cache"), |a, b| a * b)?;
                        c.axpy(1.0, &carried)?;
                    }
                    let h = o.zip_map(&c, |a, b| a * b.tanh())?;
                    (vec![i, f, o, g], Some(c), h)
                } else {
                    let h = pre[0].map(f64::tanh);
                    (vec![h.clone()], None, h)
                };
                if let Some(p) = probe_here.filter(|p| p.site == ProbeSite::Hidden) {
                    h.axpy(1.0, p.offset)?;
                }
                let y = match layer.bn.get_mut(tau) {
                    Some(bn) if train => bn.forward_train(&h)?,
                    Some(bn) => bn.forward_eval(&h)?,
                    None => h.clone(),
                };
                x = y.clone();
                cells[k].push(CellCache { x: xin, gates, c, h, y });
            }
            let ox = if self.output_bias { augment(&x)? } else { x };
            let a = ox.matmul_t(&self.output)?;
            out_h.push(self.loss.output(&a)?);
            out_x.push(ox);
        }
        debug_assert!(out_h.iter().all(|h| h.dim(0) == t_mb));
        let result = stack_time(&out_h)?;
        self.cache = Some(Unroll { cells, out_x, out_h, teacher_forced: extra.is_none(), train });
        Ok(result)
    }

    fn unroll_cache(&self) -> Result<&Unroll> {
        self.cache.as_ref().ok_or_else(|| Error::State("recurrent network has no forward cache".into()))
    }

    /// `Σ_τ J(h_τ, y_τ)` with the usual `1/T_mb` normalization per step.
    pub fn loss(&self, targets: &Tensor) -> Result<LossValue> {
        let u = self.unroll_cache()?;
        check_targets(targets, &u.out_h)?;
        let mut total = LossValue { value: 0.0, clamped: 0 };
        for (tau, h) in u.out_h.iter().enumerate() {
            let l = loss(self.loss, h, &time_slice(targets, tau)?, h.dim(0))?;
            total.value += l.value;
            total.clamped += l.clamped;
        }
        Ok(total)
    }

    pub fn backward(&self, targets: &Tensor) -> Result<RecurrentBackward> {
        self.backward_with(targets, self.mode)
    }

    /// Backpropagation through time, reverse τ outermost and reverse ν inside,
    /// so every cell's inputs from above and from the right are ready.
    pub fn backward_with(&self, targets: &Tensor, mode: LstmMode) -> Result<RecurrentBackward> {
        let u = self.unroll_cache()?;
        if !u.teacher_forced {
            return Err(Error::Unsupported("backward through generated inputs".into()));
        }
        check_targets(targets, &u.out_h)?;
        let total = u.out_h.len();
        let n = self.layers.len();
        let lstm = self.kind == CellKind::Lstm;
        let mut output_deltas = Vec::with_capacity(total);
        for (tau, h) in u.out_h.iter().enumerate() {
            output_deltas.push(output_delta(self.loss, h, &time_slice(targets, tau)?, h.dim(0))?);
        }
        let mut dh: Vec<Vec<Option<Tensor>>> = vec![vec![None; total]; n];
        let mut ups: Vec<Vec<Option<Tensor>>> = vec![vec![None; total]; n];
        let mut gate_d: Vec<Vec<Vec<Tensor>>> = vec![vec![Vec::new(); total]; n];
        let mut dc_next: Vec<Option<Tensor>> = vec![None; n];
        for tau in (0..total).rev() {
            for k in (0..n).rev() {
                let layer = &self.layers[k];
                let w = layer.width();
                let mut up = if k + 1 == n {
                    backprop_through(&self.output, &output_deltas[tau], w)?
                } else {
                    let above = &self.layers[k + 1];
                    debug_assert!(!gate_d[k + 1][tau].is_empty(), "cell ({}, {tau}) read before it was written", k + 1);
                    let mut acc = Tensor::zeros(&[output_deltas[tau].dim(0), w]);
                    for (s, d) in above.spatial.iter().zip(&gate_d[k + 1][tau]) {
                        acc.axpy(1.0, &backprop_through(s, d, w)?)?;
                    }
                    acc
                };
                if tau + 1 < total {
                    debug_assert!(!gate_d[k][tau + 1].is_empty(), "cell ({k}, {}) read before it was written", tau + 1);
                    for (tm, d) in layer.temporal.iter().zip(&gate_d[k][tau + 1]) {
                        up.axpy(1.0, &d.matmul(tm)?)?;
                    }
                }
                let d_h = match layer.bn.get(tau) {
                    Some(bn) => bn.contract(&up)?,
                    None => up.clone(),
                };
                let cell = &u.cells[k][tau];
                let ds = if lstm {
                    let [i, f, o, g] = [&cell.gates[I], &cell.gates[F], &cell.gates[O], &cell.gates[G]];
                    let c = cell.c.as_ref().expect("lstm cache");
                    let mut dc = d_h.zip_map(&o.zip_map(c, |o, c| o * (1.0 - c.tanh().powi(2)))?, |a, b| a * b)?;
                    if mode == LstmMode::FullGradient {
                        if let Some(next) = dc_next[k].take() {
                            let f_next = &u.cells[k][tau + 1].gates[F];
                            dc.axpy(1.0, &next.zip_map(f_next, |a, b| a * b)?)?;
                        }
                    }
                    let c_prev = (tau > 0).then(|| u.cells[k][tau - 1].c.as_ref().expect("lstm cache"));
                    let d_i = dc.zip_map(&g.zip_map(i, |g, i| g * i * (1.0 - i))?, |a, b| a * b)?;
                    let d_f = match c_prev {
                        Some(cp) => dc.zip_map(&cp.zip_map(f, |cp, f| cp * f * (1.0 - f))?, |a, b| a * b)?,
                        None => Tensor::zeros(dc.shape()),
                    };
                    let d_o = d_h.zip_map(&o.zip_map(c, |o, c| c.tanh() * o * (1.0 - o))?, |a, b| a * b)?;
                    let d_g = dc.zip_map(&i.zip_map(g, |i, g| i * (1.0 - g * g))?, |a, b| a * b)?;
                    dc_next[k] = Some(dc);
                    vec![d_i, d_f, d_o, d_g]
                } else {
                    vec![d_h.zip_map(&cell.h, |d, h| d * (1.0 - h * h))?]
                };
                gate_d[k][tau] = ds;
                dh[k][tau] = Some(d_h);
                ups[k][tau] = Some(up);
            }
        }

        let mut grads = Vec::new();
        for (k, layer) in self.layers.iter().enumerate() {
            let gates = layer.spatial.len();
            for g in 0..gates {
                let mut acc = Tensor::zeros(layer.spatial[g].shape());
                for tau in 0..total {
                    acc.axpy(1.0, &weight_grad(&gate_d[k][tau][g], &u.cells[k][tau].x)?)?;
                }
                grads.push(acc);
            }
            for g in 0..gates {
                let mut acc = Tensor::zeros(layer.temporal[g].shape());
                for tau in 1..total {
                    acc.axpy(1.0, &weight_grad(&gate_d[k][tau][g], &u.cells[k][tau - 1].y)?)?;
                }
                grads.push(acc);
            }
            for (tau, bn) in layer.bn.iter().enumerate() {
                let (dg, db) = if tau < total {
                    bn.coeff_grads(ups[k][tau].as_ref().expect("written"))?
                } else {
                    (Tensor::zeros(bn.gamma.shape()), Tensor::zeros(bn.beta.shape()))
                };
                grads.push(dg);
                grads.push(db);
            }
        }
        let mut acc = Tensor::zeros(self.output.shape());
        for (d, x) in output_deltas.iter().zip(&u.out_x) {
            acc.axpy(1.0, &weight_grad(d, x)?)?;
        }
        grads.push(acc);
        Ok(RecurrentBackward {
            dh: dh.into_iter().map(|r| r.into_iter().map(|d| d.expect("all cells visited")).collect()).collect(),
            gate_deltas: gate_d,
            output_deltas,
            grads,
        })
    }

    /// Cached gate activations of a cell, in gate order.
    pub fn gates(&self, layer: usize, step: usize) -> Option<&[Tensor]> {
        Some(self.cache.as_ref()?.cells.get(layer)?.get(step)?.gates.as_slice())
    }

    pub fn cell_state(&self, layer: usize, step: usize) -> Option<&Tensor> {
        self.cache.as_ref()?.cells.get(layer)?.get(step)?.c.as_ref()
    }

    pub fn hidden(&self, layer: usize, step: usize) -> Option<&Tensor> {
        Some(&self.cache.as_ref()?.cells.get(layer)?.get(step)?.h)
    }

    pub fn update_running(&mut self) -> Result<()> {
        let steps = match &self.cache {
            Some(u) if u.train => u.out_h.len(),
            _ => return Err(Error::State("running statistics need a training forward".into())),
        };
        for layer in &mut self.layers {
            for bn in layer.bn.iter_mut().take(steps) {
                bn.update_running()?;
            }
        }
        Ok(())
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm> {
        self.layers.iter().flat_map(|l| l.bn.iter()).collect()
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        self.layers.iter_mut().flat_map(|l| l.bn.iter_mut()).collect()
    }
}

fn check_targets(targets: &Tensor, out_h: &[Tensor]) -> Result<()> {
    let (t_mb, f) = (out_h[0].dim(0), out_h[0].dim(1));
    if targets.shape() != [t_mb, f, out_h.len()] {
        return dim_err(format!("targets {:?} against outputs [{t_mb}, {f}, {}]", targets.shape(), out_h.len()));
    }
    Ok(())
}

impl Parameterized for RecurrentNetwork {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let names = self.kind.gate_names();
        let mut out = Vec::new();
        for (k, l) in self.layers.iter().enumerate() {
            for (g, s) in l.spatial.iter().enumerate() {
                out.push((format!("layer{k}.{}_spatial", names[g]), s));
            }
            for (g, t) in l.temporal.iter().enumerate() {
                out.push((format!("layer{k}.{}_temporal", names[g]), t));
            }
            for (tau, bn) in l.bn.iter().enumerate() {
                out.push((format!("layer{k}.step{tau}.gamma"), &bn.gamma));
                out.push((format!("layer{k}.step{tau}.beta"), &bn.beta));
            }
        }
        out.push(("output.theta".into(), &self.output));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.extend(l.spatial.iter_mut());
            out.extend(l.temporal.iter_mut());
            for bn in &mut l.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out.push(&mut self.output);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, compare_tensors_resolved, finite_diff_fn_5pt, GradCheckConfig, Probe};
    use crate::nn_math::rng_from_seed;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn spec(kind: CellKind, hidden: &[usize], steps: usize, bn: bool, loss: LossKind) -> RecurrentSpec {
        RecurrentSpec {
            kind,
            input: 3,
            hidden: hidden.to_vec(),
            outputs: 2,
            steps,
            loss,
            batch_norm: bn,
            law: InitLaw::Normal,
            diagonal_init: false,
        }
    }

    fn targets(loss: LossKind, t_mb: usize, steps: usize, seed: u64) -> Tensor {
        match loss {
            LossKind::Mse => random(&[t_mb, 2, steps], seed),
            _ => {
                let mut rng = rng_from_seed(seed);
                let mut y = Tensor::zeros(&[t_mb, 2, steps]);
                for t in 0..t_mb {
                    for tau in 0..steps {
                        y[[t, rng.gen_range(0..2), tau]] = 1.0;
                    }
                }
                y
            }
        }
    }

    fn perturb_bn(net: &mut RecurrentNetwork, seed: u64) {
        let mut rng = rng_from_seed(seed);
        for bn in net.batch_norms_mut() {
            bn.gamma.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5));
            bn.beta.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
    }

    fn full_check(kind: CellKind, steps: usize, bn: bool, loss: LossKind, seed: u64) {
        let mut rng = rng_from_seed(seed);
        let mut net = RecurrentNetwork::build(&spec(kind, &[4, 3], steps, bn, loss), &mut rng).unwrap();
        perturb_bn(&mut net, seed + 7);
        let x = random(&[4, 3, steps], seed + 1);
        let y = targets(loss, 4, steps, seed + 2);
        net.forward(&x, true).unwrap();
        let b = net.backward(&y).unwrap();
        let probe = |n: &mut RecurrentNetwork| -> Result<Probe> {
            n.forward(&x, true)?;
            Ok(Probe::loss_only(n.loss(&y)?.value))
        };
        let report = check(&mut net, &b.grads, probe, &GradCheckConfig::default()).unwrap();
        assert!(report.pass, "{kind:?} T={steps} bn={bn}\n{}", report.to_text());
        for k in 0..net.layers.len() {
            for tau in 0..steps {
                let fd = finite_diff_fn_5pt(
                    &Tensor::zeros(b.dh[k][tau].shape()),
                    |off| {
                        let p = ProbeOffset { layer: k, step: tau, site: ProbeSite::Hidden, offset: off };
                        net.forward_probe(&x, true, Some(p))?;
                        Ok(net.loss(&y)?.value)
                    },
                    1e-4,
                )
                .unwrap();
                let r = compare_tensors_resolved("dh", &b.dh[k][tau], &fd, 1e-4, 1e-5, 1e-10).unwrap();
                assert!(r.pass, "{kind:?} cell ({k},{tau})\n{}", r.to_text());
            }
        }
    }

    #[test]
    fn rnn_gradients_match_finite_differences() {
        for (bn, loss) in [(false, LossKind::Mse), (true, LossKind::Mse), (false, LossKind::CrossEntropy), (true, LossKind::CrossEntropy)] {
            full_check(CellKind::Rnn, 4, bn, loss, 11);
        }
    }

    #[test]
    fn lstm_full_gradient_matches_finite_differences() {
        for (bn, loss) in [(false, LossKind::Mse), (true, LossKind::CrossEntropy)] {
            full_check(CellKind::Lstm, 3, bn, loss, 12);
        }
    }

    #[test]
    fn rnn_preactivation_deltas() {
        let mut rng = rng_from_seed(3);
        let mut net = RecurrentNetwork::build(&spec(CellKind::Rnn, &[4], 3, true, LossKind::Mse), &mut rng).unwrap();
        let x = random(&[4, 3, 3], 4);
        let y = random(&[4, 2, 3], 5);
        net.forward(&x, true).unwrap();
        let b = net.backward(&y).unwrap();
        for tau in 0..3 {
            let fd = finite_diff_fn_5pt(
                &Tensor::zeros(&[4, 4]),
                |off| {
                    let p = ProbeOffset { layer: 0, step: tau, site: ProbeSite::PreActivation, offset: off };
                    net.forward_probe(&x, true, Some(p))?;
                    Ok(net.loss(&y)?.value)
                },
                1e-4,
            )
            .unwrap();
            let r = compare_tensors_resolved("pre", &b.gate_deltas[0][tau][0], &fd, 1e-4, 1e-5, 1e-10).unwrap();
            assert!(r.pass, "{}", r.to_text());
        }
    }

    #[test]
    fn zero_weights_give_zero_hidden_states() {
        for kind in [CellKind::Rnn, CellKind::Lstm] {
            let mut rng = rng_from_seed(1);
            let mut net = RecurrentNetwork::build(&spec(kind, &[3], 3, false, LossKind::Mse), &mut rng).unwrap();
            net.params_mut().into_iter().for_each(|p| p.fill(0.0));
            net.forward(&random(&[2, 3, 3], 2), false).unwrap();
            for tau in 0..3 {
                assert_eq!(net.hidden(0, tau).unwrap().max_abs(), 0.0);
                if kind == CellKind::Lstm {
                    let g = net.gates(0, tau).unwrap();
                    assert!(g[I].data().iter().chain(g[F].data()).chain(g[O].data()).all(|&v| v == 0.5));
                    assert_eq!(g[G].max_abs(), 0.0);
                    assert_eq!(net.cell_state(0, tau).unwrap().max_abs(), 0.0);
                }
            }
        }
    }

    #[test]
    fn scalar_rnn_recursion() {
        let mut rng = rng_from_seed(1);
        let mut net = RecurrentNetwork::build(
            &RecurrentSpec { input: 1, hidden: vec![1], outputs: 1, ..spec(CellKind::Rnn, &[1], 3, false, LossKind::Mse) },
            &mut rng,
        )
        .unwrap();
        let (wv, wt, wo) = (0.7, -0.4, 1.3);
        net.layers[0].spatial[0] = Tensor::from_vec(&[1, 2], vec![wv, 0.1]).unwrap();
        net.layers[0].temporal[0] = Tensor::from_vec(&[1, 1], vec![wt]).unwrap();
        net.output = Tensor::from_vec(&[1, 2], vec![wo, -0.2]).unwrap();
        let xs = [0.5, -1.0, 2.0];
        let out = net.forward(&Tensor::from_vec(&[1, 1, 3], xs.to_vec()).unwrap(), false).unwrap();
        let mut h = 0.0;
        for (tau, x) in xs.iter().enumerate() {
            h = (wv * x + 0.1 + wt * h).tanh();
            assert!((out.data()[tau] - (wo * h - 0.2)).abs() < 1e-15);
        }
    }

    #[test]
    fn scalar_lstm_recursion() {
        let mut rng = rng_from_seed(1);
        let mut net = RecurrentNetwork::build(
            &RecurrentSpec { input: 1, hidden: vec![1], outputs: 1, ..spec(CellKind::Lstm, &[1], 3, false, LossKind::Mse) },
            &mut rng,
        )
        .unwrap();
        let ws = [(0.3, 0.1, -0.5), (-0.6, 0.2, 0.4), (0.9, 0.0, 0.8), (1.1, -0.3, -0.7)];
        for (g, &(wv, b, wt)) in ws.iter().enumerate() {
            net.layers[0].spatial[g] = Tensor::from_vec(&[1, 2], vec![wv, b]).unwrap();
            net.layers[0].temporal[g] = Tensor::from_vec(&[1, 1], vec![wt]).unwrap();
        }
        net.output = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let xs = [0.5, -1.0, 2.0];
        let out = net.forward(&Tensor::from_vec(&[1, 1, 3], xs.to_vec()).unwrap(), false).unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let (mut h, mut c) = (0.0f64, 0.0f64);
        for (tau, &x) in xs.iter().enumerate() {
            let pre = |g: usize| ws[g].0 * x + ws[g].1 + ws[g].2 * h;
            let (i, f, o, gg) = (sig(pre(0)), sig(pre(1)), sig(pre(2)), pre(3).tanh());
            c = f * c + i * gg;
            h = o * c.tanh();
            assert!((out.data()[tau] - h).abs() < 1e-15);
        }
    }

    #[test]
    fn forget_gate_closed_makes_cell_memoryless() {
        let mut rng = rng_from_seed(2);
        let mut net = RecurrentNetwork::build(&spec(CellKind::Lstm, &[3], 3, false, LossKind::Mse), &mut rng).unwrap();
        let f_in = net.layers[0].in_width();
        for r in 0..3 {
            net.layers[0].spatial[F][[r, f_in]] = -1000.0;
        }
        net.forward(&random(&[2, 3, 3], 3), false).unwrap();
        for tau in 0..3 {
            let g = net.gates(0, tau).unwrap();
            assert_eq!(g[F].max_abs(), 0.0);
            let ig = g[I].zip_map(&g[G], |a, b| a * b).unwrap();
            assert_eq!(net.cell_state(0, tau).unwrap(), &ig);
        }
    }

    #[test]
    fn modes_agree_at_one_step_and_with_closed_forget_gate() {
        let mut rng = rng_from_seed(4);
        let mut net = RecurrentNetwork::build(&spec(CellKind::Lstm, &[3, 3], 1, false, LossKind::Mse), &mut rng).unwrap();
        let x = random(&[3, 3, 1], 5);
        let y = random(&[3, 2, 1], 6);
        net.forward(&x, true).unwrap();
        let a = net.backward_with(&y, LstmMode::PaperFaithful).unwrap();
        let b = net.backward_with(&y, LstmMode::FullGradient).unwrap();
        assert_eq!(a, b);

        let mut net = RecurrentNetwork::build(&spec(CellKind::Lstm, &[3], 3, false, LossKind::Mse), &mut rng).unwrap();
        let f_in = net.layers[0].in_width();
        for r in 0..3 {
            net.layers[0].spatial[F][[r, f_in]] = -1000.0;
        }
        let x = random(&[3, 3, 3], 7);
        let y = random(&[3, 2, 3], 8);
        net.forward(&x, true).unwrap();
        let a = net.backward_with(&y, LstmMode::PaperFaithful).unwrap();
        let b = net.backward_with(&y, LstmMode::FullGradient).unwrap();
        assert_eq!(a.dh, b.dh);
    }

    #[test]
    fn paper_faithful_deviates_over_several_steps() {
        let mut rng = rng_from_seed(4);
        let mut net = RecurrentNetwork::build(&spec(CellKind::Lstm, &[3], 3, false, LossKind::Mse), &mut rng).unwrap();
        let x = random(&[3, 3, 3], 5);
        let y = random(&[3, 2, 3], 6);
        net.forward(&x, true).unwrap();
        let a = net.backward_with(&y, LstmMode::PaperFaithful).unwrap();
        let b = net.backward_with(&y, LstmMode::FullGradient).unwrap();
        assert_eq!(a.dh[0][2], b.dh[0][2]);
        assert!(a.dh[0][0].max_abs_diff(&b.dh[0][0]).unwrap() > 0.0);
    }

    #[test]
    fn one_step_has_no_temporal_gradient() {
        let mut rng = rng_from_seed(4);
        let mut net = RecurrentNetwork::build(&spec(CellKind::Rnn, &[3], 1, false, LossKind::Mse), &mut rng).unwrap();
        net.forward(&random(&[3, 3, 1], 1), true).unwrap();
        let b = net.backward(&random(&[3, 2, 1], 2)).unwrap();
        assert_eq!(b.grads[1].max_abs(), 0.0);
    }

    #[test]
    fn matching_targets_give_zero_deltas() {
        let mut rng = rng_from_seed(9);
        for kind in [CellKind::Rnn, CellKind::Lstm] {
            let mut net = RecurrentNetwork::build(&spec(kind, &[3], 3, false, LossKind::Mse), &mut rng).unwrap();
            let out = net.forward(&random(&[2, 3, 3], 1), true).unwrap();
            let b = net.backward(&out).unwrap();
            assert!(b.dh.iter().flatten().all(|d| d.max_abs() == 0.0));
        }
    }

    #[test]
    fn generation_feeds_outputs_back() {
        let mut rng = rng_from_seed(5);
        let mut net = RecurrentNetwork::build(
            &RecurrentSpec { input: 2, outputs: 2, ..spec(CellKind::Rnn, &[3], 4, false, LossKind::Mse) },
            &mut rng,
        )
        .unwrap();
        let prefix = random(&[1, 2, 2], 6);
        let gen = net.generate(&prefix, 2).unwrap();
        let mut cols: Vec<Tensor> = (0..2).map(|t| time_slice(&prefix, t).unwrap()).collect();
        cols.push(time_slice(&gen, 1).unwrap());
        cols.push(time_slice(&gen, 2).unwrap());
        let forced = net.forward(&stack_time(&cols).unwrap(), false).unwrap();
        assert!(forced.max_abs_diff(&gen).unwrap() < 1e-15);
    }
}
