//! Convolutional networks.
//!
//! Maps are stored as `[T_mb, F, N, T]` with the first spatial axis indexed by
//! `l` (width) and the second by `m` (height). A convolution reads its input
//! zero-padded by `P`; its cached error rate lives on the unpadded output grid.
//!
//! Backward passes use the pairwise forms: fc→pool, pool→conv, conv→conv and
//! conv→pool, with the batch-norm corrections collapsed into per-feature
//! aggregate sums instead of explicit Jacobian loops.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::batchnorm::{BatchNorm, BnMode};
use crate::error::{dim_err, Error, Result};
use crate::fnn::{backprop_through, output_delta, weight_grad, DenseLayer, OutputLayer};
use crate::nn_math::{activate, activate_prime, init_tensor, loss, ActivationKind, InitLaw, LossKind, LossValue};
use crate::params::Parameterized;
use crate::tensor::{col2im, crop2d, im2col, pad2d, pool_rows, ConvGeometry, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvPath {
    Naive,
    #[default]
    Gemm,
}

/// `a[t,f,l,m] = Σ_{f',j,k} Θ[f,f',j,k] x[t,f',S l+j,S m+k]` over a padded input.
pub fn conv2d(x_padded: &Tensor, theta: &Tensor, geom: &ConvGeometry, path: ConvPath) -> Result<Tensor> {
    let [t_mb, fi, h, w] = x_padded.dims4()?;
    let [fo, fi2, r, r2] = theta.dims4()?;
    if fi != fi2 || r != geom.receptive_field || r2 != r || h != geom.padded_width() || w != geom.padded_height() {
        return dim_err(format!(
            "convolution of {:?} with kernel {:?} under geometry {geom:?}",
            x_padded.shape(),
            theta.shape()
        ));
    }
    let (np, tp, s) = (geom.out_width, geom.out_height, geom.stride);
    let mut out = Tensor::zeros(&[t_mb, fo, np, tp]);
    match path {
        ConvPath::Gemm => {
            let flat = theta.clone().reshape(&[fo, fi * r * r])?;
            for t in 0..t_mb {
                let cols = im2col(&x_padded.slice_outer(t), geom)?;
                let a = flat.matmul_t(&cols)?;
                out.outer_mut(t).copy_from_slice(a.data());
            }
        }
        ConvPath::Naive => {
            for t in 0..t_mb {
                for f in 0..fo {
                    for l in 0..np {
                        for m in 0..tp {
                            let mut acc = 0.0;
                            for f2 in 0..fi {
                                for j in 0..r {
                                    for k in 0..r {
                                        acc += theta[[f, f2, j, k]] * x_padded[[t, f2, s * l + j, s * m + k]];
                                    }
                                }
                            }
                            out[[t, f, l, m]] = acc;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of a convolution with respect to its padded input.
fn conv_input_grad_padded(delta: &Tensor, theta: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    let [t_mb, fo, np, tp] = delta.dims4()?;
    let [_, fi, r, _] = theta.dims4()?;
    let flat = theta.clone().reshape(&[fo, fi * r * r])?;
    let (h, w) = (geom.padded_width(), geom.padded_height());
    let mut out = Tensor::zeros(&[t_mb, fi, h, w]);
    for t in 0..t_mb {
        let d = Tensor::from_vec(&[fo, np * tp], delta.outer(t).to_vec())?;
        let cols = d.transpose()?.matmul(&flat)?;
        let img = col2im(&cols, geom)?;
        out.outer_mut(t).copy_from_slice(img.data());
    }
    Ok(out)
}

/// `ΔΘ[f,f',j,k] = Σ_{t,l,m} x[t,f',S l+j,S m+k] δ[t,f,l,m]` with `x` the padded input.
pub fn conv_weight_grad(delta: &Tensor, input_padded: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    let [t_mb, fo, np, tp] = delta.dims4()?;
    let fi = input_padded.dim(1);
    let r = geom.receptive_field;
    if np != geom.out_width || tp != geom.out_height || input_padded.dim(0) != t_mb {
        return dim_err(format!("weight gradient of {:?} against {:?}", delta.shape(), input_padded.shape()));
    }
    let mut acc = Tensor::zeros(&[fo, fi * r * r]);
    for t in 0..t_mb {
        let cols = im2col(&input_padded.slice_outer(t), geom)?;
        let d = Tensor::from_vec(&[fo, np * tp], delta.outer(t).to_vec())?;
        acc.axpy(1.0, &d.matmul(&cols)?)?;
    }
    acc.reshape(&[fo, fi, r, r])
}

/// `ΔΘ[f,f',j,k] = Σ_t δ[t,f] h[t,f',j,k]` for the layer collapsing a map to features.
pub fn fc_pool_weight_grad(delta: &Tensor, below: &Tensor) -> Result<Tensor> {
    let [t_mb, fo] = delta.dims2()?;
    let [_, fi, n, tt] = below.dims4()?;
    let flat = below.clone().reshape(&[t_mb, fi * n * tt])?;
    weight_grad(delta, &flat)?.reshape(&[fo, fi, n, tt])
}

/// `δ[t,f,l,m] = Σ_f' Θ[f',f,l,m] δ_above[t,f']`.
pub fn delta_fc_to_pool(theta: &Tensor, delta_above: &Tensor) -> Result<Tensor> {
    let [fa, f, n, tt] = theta.dims4()?;
    let [t_mb, fa2] = delta_above.dims2()?;
    if fa != fa2 {
        return dim_err(format!("kernel {:?} against error rate {:?}", theta.shape(), delta_above.shape()));
    }
    let flat = theta.clone().reshape(&[fa, f * n * tt])?;
    delta_above.matmul(&flat)?.reshape(&[t_mb, f, n, tt])
}

/// `δ[t,f,l,m] = Σ_{f',j,k} Θ[f',f,j,k] δ_above[t,f',l+P-j,m+P-k]`, stride 1 only.
pub fn delta_conv_to_pool(theta: &Tensor, delta_above: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    if geom.stride != 1 {
        return Err(Error::Unsupported(format!(
            "conv to pool backpropagation is derived for stride 1, got {}",
            geom.stride
        )));
    }
    full_correlation(theta, delta_above, geom)
}

/// The shifted-index correlation of an error rate with a kernel, on the unpadded grid.
fn full_correlation(theta: &Tensor, delta_above: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    Ok(crop2d(&conv_input_grad_padded(delta_above, theta, geom)?, geom.padding))
}

/// Per-feature Jacobian factors `(γ̃, h̃, D)` of a batch norm.
fn bn_parts(bn: &BatchNorm) -> Result<(&[f64], &Tensor, f64)> {
    let missing = || Error::State("batch norm has no cached statistics".into());
    Ok((
        bn.gamma_tilde().ok_or_else(missing)?,
        bn.h_tilde().ok_or_else(missing)?,
        bn.divisor().ok_or_else(missing)?,
    ))
}

/// `γ̃ g'(a) (routed - (μ1 + μ2 h̃)/D)`, or `g'(a) routed` without batch norm.
fn finish_delta(
    routed: Tensor,
    mu: Option<(&[f64], &[f64])>,
    bn: Option<&BatchNorm>,
    a_below: &Tensor,
    g_kind: ActivationKind,
) -> Result<Tensor> {
    let gp = activate_prime(g_kind, a_below)?;
    let mut out = routed;
    if let (Some(bn), Some((mu1, mu2))) = (bn, mu) {
        let (gt, ht, d) = bn_parts(bn)?;
        ht.check_same_shape(&out)?;
        let [t_mb, f, n, tt] = out.dims4()?;
        for t in 0..t_mb {
            for ff in 0..f {
                for l in 0..n {
                    for m in 0..tt {
                        let v = out[[t, ff, l, m]];
                        out[[t, ff, l, m]] = gt[ff] * (v - (mu1[ff] + mu2[ff] * ht[[t, ff, l, m]]) / d);
                    }
                }
            }
        }
    }
    gp.zip_map(&out, |g, x| g * x)
}

/// Conv layer below a convolution, with batch norm through the λ aggregates.
///
/// `λ1` is the full correlation of `δ_above` with `Θ`. With `χ` marking input
/// positions that are not padding,
/// `λ4_f = Σ_{f',j,k} Θ[f',f,j,k] Σ_{t,l',m'} δ_above[t,f',l',m'] χ(S l'+j, S m'+k)`,
/// `λ5[f,f',j,k] = Σ_{t,l',m'} δ_above[t,f',l',m'] h̃[t,f,S l'+j,S m'+k]` (h̃ = 0 on padding),
/// `λ6_f = Σ_{f',j,k} Θ[f',f,j,k] λ5[f,f',j,k]`,
/// and `δ = γ̃ g'(a) (λ1 - (λ4 + λ6 h̃)/D)`. With `P = 0`, `χ ≡ 1` and
/// `λ4 = Σ_f' λ2 λ3` with `λ2 = Σ_{j,k} Θ` and `λ3 = Σ δ_above`.
pub fn delta_conv_to_conv(
    theta_above: &Tensor,
    geom_above: &ConvGeometry,
    delta_above: &Tensor,
    bn: Option<&BatchNorm>,
    a_below: &Tensor,
    g_kind: ActivationKind,
) -> Result<Tensor> {
    let lambda1 = full_correlation(theta_above, delta_above, geom_above)?;
    let Some(bn) = bn else {
        return finish_delta(lambda1, None, None, a_below, g_kind);
    };
    let (_, ht, _) = bn_parts(bn)?;
    let (lambda4, lambda6) = lambda_aggregates(theta_above, geom_above, delta_above, ht)?;
    finish_delta(lambda1, Some((&lambda4, &lambda6)), Some(bn), a_below, g_kind)
}

/// `(ν1, ν2)`: `ν1[f',f,j,k] = Σ h̃[t,f,S l+j,S m+k] δ[t,f',l,m]` and the
/// interior-masked `ν2[f',j,k] = Σ δ[t,f',l,m] χ(S l+j, S m+k)`.
fn nu_aggregates(geom: &ConvGeometry, delta_above: &Tensor, h_tilde: &Tensor) -> Result<(Tensor, Tensor)> {
    let [t_mb, fa, np, tp] = delta_above.dims4()?;
    let [_, f, _, _] = h_tilde.dims4()?;
    let (r, s, p) = (geom.receptive_field, geom.stride, geom.padding);
    let hp = pad2d(h_tilde, p);
    let (w, hh) = (geom.in_width, geom.in_height);
    let inside = |x: usize, n: usize| x >= p && x < p + n;
    let mut nu1 = Tensor::zeros(&[fa, f, r, r]);
    let mut nu2 = Tensor::zeros(&[fa, r, r]);
    for t in 0..t_mb {
        for fp in 0..fa {
            for l in 0..np {
                for m in 0..tp {
                    let d = delta_above[[t, fp, l, m]];
                    if d == 0.0 {
                        continue;
                    }
                    for j in 0..r {
                        for k in 0..r {
                            let (x, y) = (s * l + j, s * m + k);
                            if inside(x, w) && inside(y, hh) {
                                nu2[[fp, j, k]] += d;
                                for ff in 0..f {
                                    nu1[[fp, ff, j, k]] += hp[[t, ff, x, y]] * d;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((nu1, nu2))
}

/// `(λ4, λ6)` per feature of the layer below.
fn lambda_aggregates(theta: &Tensor, geom: &ConvGeometry, delta_above: &Tensor, h_tilde: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let [fa, f, r, _] = theta.dims4()?;
    let (lambda5, lambda3) = nu_aggregates(geom, delta_above, h_tilde)?;
    let mut lambda4 = vec![0.0; f];
    let mut lambda6 = vec![0.0; f];
    for ff in 0..f {
        for fp in 0..fa {
            for j in 0..r {
                for k in 0..r {
                    let th = theta[[fp, ff, j, k]];
                    lambda4[ff] += th * lambda3[[fp, j, k]];
                    lambda6[ff] += th * lambda5[[fp, ff, j, k]];
                }
            }
        }
    }
    Ok((lambda4, lambda6))
}

/// `Δγ_f = Σ ν1[f',f,j,k] Θ[f',f,j,k]`, `Δβ_f = Σ ν2[f',j,k] Θ[f',f,j,k]`.
pub fn conv_coeff_grads(theta_above: &Tensor, geom_above: &ConvGeometry, delta_above: &Tensor, h_tilde: &Tensor) -> Result<(Tensor, Tensor)> {
    let (sum_delta, sum_delta_h) = lambda_aggregates(theta_above, geom_above, delta_above, h_tilde)?;
    let f = sum_delta.len();
    Ok((Tensor::from_vec(&[f], sum_delta_h)?, Tensor::from_vec(&[f], sum_delta)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    #[default]
    Max,
    /// Window mean.
    Average,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolLayer {
    pub receptive_field: usize,
    pub stride: usize,
    pub kind: PoolKind,
    cache: Option<PoolCache>,
}

#[derive(Clone, Debug, PartialEq)]
struct PoolCache {
    in_shape: Vec<usize>,
    argmax: Vec<(usize, usize)>,
    margins: Vec<f64>,
}

impl PoolLayer {
    pub fn new(receptive_field: usize, stride: usize, kind: PoolKind) -> Self {
        PoolLayer { receptive_field, stride, kind, cache: None }
    }

    pub fn geometry(&self, n: usize, t: usize) -> Result<ConvGeometry> {
        ConvGeometry::new(n, t, self.receptive_field, self.stride, 0)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let [t_mb, f, n, tt] = x.dims4()?;
        let g = self.geometry(n, tt)?;
        let (r, s) = (self.receptive_field, self.stride);
        let mut out = Tensor::zeros(&[t_mb, f, g.out_width, g.out_height]);
        let mut argmax = Vec::new();
        let mut margins = Vec::new();
        for t in 0..t_mb {
            let sample = x.slice_outer(t);
            match self.kind {
                PoolKind::Max => {
                    let p = pool_rows(&sample, r, s)?;
                    out.outer_mut(t).copy_from_slice(p.values.data());
                    for (i, &(j, k)) in p.argmax.iter().enumerate() {
                        let (ff, l, m) = (i / g.out_positions(), (i / g.out_height) % g.out_width, i % g.out_height);
                        let best = sample[[ff, s * l + j, s * m + k]];
                        let mut second = f64::NEG_INFINITY;
                        for jj in 0..r {
                            for kk in 0..r {
                                if (jj, kk) != (j, k) {
                                    second = second.max(sample[[ff, s * l + jj, s * m + kk]]);
                                }
                            }
                        }
                        margins.push(best - second);
                    }
                    argmax.extend(p.argmax);
                }
                PoolKind::Average => {
                    let norm = (r * r) as f64;
                    for ff in 0..f {
                        for l in 0..g.out_width {
                            for m in 0..g.out_height {
                                let mut acc = 0.0;
                                for j in 0..r {
                                    for k in 0..r {
                                        acc += sample[[ff, s * l + j, s * m + k]];
                                    }
                                }
                                out[[t, ff, l, m]] = acc / norm;
                            }
                        }
                    }
                }
            }
        }
        self.cache = Some(PoolCache { in_shape: x.shape().to_vec(), argmax, margins });
        Ok(out)
    }

    fn cache(&self) -> Result<&PoolCache> {
        self.cache.as_ref().ok_or_else(|| Error::State("pool layer has no forward cache".into()))
    }

    /// Cached winner offsets, one per output element of the last forward.
    pub fn argmax(&self) -> Option<&[(usize, usize)]> {
        self.cache.as_ref().map(|c| c.argmax.as_slice())
    }

    /// Gap between each window's maximum and runner-up.
    pub fn margins(&self) -> Option<&[f64]> {
        self.cache.as_ref().map(|c| c.margins.as_slice())
    }

    /// Sends each output gradient back to the input position(s) it came from.
    pub fn route(&self, delta: &Tensor) -> Result<Tensor> {
        let c = self.cache()?;
        let [t_mb, f, np, tp] = delta.dims4()?;
        if t_mb != c.in_shape[0] || f != c.in_shape[1] {
            return Err(Error::State(format!("stale pool cache for {:?}", delta.shape())));
        }
        let (r, s) = (self.receptive_field, self.stride);
        let mut out = Tensor::zeros(&c.in_shape);
        for t in 0..t_mb {
            for ff in 0..f {
                for l in 0..np {
                    for m in 0..tp {
                        let d = delta[[t, ff, l, m]];
                        match self.kind {
                            PoolKind::Max => {
                                let (j, k) = c.argmax[((t * f + ff) * np + l) * tp + m];
                                out[[t, ff, s * l + j, s * m + k]] += d;
                            }
                            PoolKind::Average => {
                                let share = d / (r * r) as f64;
                                for j in 0..r {
                                    for k in 0..r {
                                        out[[t, ff, s * l + j, s * m + k]] += share;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Per-feature `(μ1, μ2)`: `Σ δ_above` and `Σ δ_above h̃` at the routed positions.
fn pool_mu(pool: &PoolLayer, delta_above: &Tensor, h_tilde: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let [t_mb, f, np, tp] = delta_above.dims4()?;
    let mut mu1 = vec![0.0; f];
    let mut mu2 = vec![0.0; f];
    match pool.kind {
        PoolKind::Max => {
            let argmax = pool.cache()?.argmax.as_slice();
            let s = pool.stride;
            for t in 0..t_mb {
                for ff in 0..f {
                    for l in 0..np {
                        for m in 0..tp {
                            let d = delta_above[[t, ff, l, m]];
                            let (j, k) = argmax[((t * f + ff) * np + l) * tp + m];
                            mu1[ff] += d;
                            mu2[ff] += d * h_tilde[[t, ff, s * l + j, s * m + k]];
                        }
                    }
                }
            }
        }
        PoolKind::Average => {
            let routed = pool.route(delta_above)?;
            let [_, _, n, tt] = routed.dims4()?;
            for t in 0..t_mb {
                for ff in 0..f {
                    for l in 0..n {
                        for m in 0..tt {
                            let u = routed[[t, ff, l, m]];
                            mu1[ff] += u;
                            mu2[ff] += u * h_tilde[[t, ff, l, m]];
                        }
                    }
                }
            }
        }
    }
    Ok((mu1, mu2))
}

/// Conv layer below a pool: route to the winners, correct for batch norm through `μ1, μ2`, times `g'(a)`.
pub fn delta_pool_to_conv(
    pool: &PoolLayer,
    delta_above: &Tensor,
    bn: Option<&BatchNorm>,
    a_below: &Tensor,
    g_kind: ActivationKind,
) -> Result<Tensor> {
    let routed = pool.route(delta_above)?;
    let Some(bn) = bn else {
        return finish_delta(routed, None, None, a_below, g_kind);
    };
    let (_, ht, _) = bn_parts(bn)?;
    let (mu1, mu2) = pool_mu(pool, delta_above, ht)?;
    finish_delta(routed, Some((&mu1, &mu2)), Some(bn), a_below, g_kind)
}

/// `Δγ_f = Σ h̃[winner] δ_pool`, `Δβ_f = Σ δ_pool` for a batch-normalized conv under a pool.
pub fn pool_coeff_grads(pool: &PoolLayer, delta_pool: &Tensor, h_tilde: &Tensor) -> Result<(Tensor, Tensor)> {
    let (mu1, mu2) = pool_mu(pool, delta_pool, h_tilde)?;
    let f = mu1.len();
    Ok((Tensor::from_vec(&[f], mu2)?, Tensor::from_vec(&[f], mu1)?))
}

#[derive(Clone, Debug, PartialEq)]
struct ConvCache {
    input_padded: Tensor,
    a: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `[F_out, F_in, R, R]`.
    pub theta: Tensor,
    pub geometry: ConvGeometry,
    pub activation: ActivationKind,
    pub bn: Option<BatchNorm>,
    pub path: ConvPath,
    cache: Option<ConvCache>,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        f_in: usize,
        f_out: usize,
        geometry: ConvGeometry,
        activation: ActivationKind,
        bn: bool,
        law: InitLaw,
        rng: &mut dyn RngCore,
    ) -> Self {
        let r = geometry.receptive_field;
        let theta = init_tensor(&[f_out, f_in, r, r], f_in * r * r, f_out * r * r, law, rng);
        ConvLayer {
            theta,
            geometry,
            activation,
            bn: bn.then(|| BatchNorm::new(f_out, BnMode::PerFeatureMap)),
            path: ConvPath::Gemm,
            cache: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.theta.dim(1)
    }

    pub fn out_features(&self) -> usize {
        self.theta.dim(0)
    }

    pub fn out_shape(&self) -> [usize; 3] {
        [self.out_features(), self.geometry.out_width, self.geometry.out_height]
    }

    /// Pads, convolves, activates and normalizes; `offset` is added to `a`.
    pub fn forward(&mut self, input: &Tensor, train: bool, offset: Option<&Tensor>) -> Result<Tensor> {
        let padded = pad2d(input, self.geometry.padding);
        conv_forward(self, &padded, train, offset)
    }

    fn cache(&self) -> Result<&ConvCache> {
        self.cache.as_ref().ok_or_else(|| Error::State("conv layer has no forward cache".into()))
    }

    pub fn pre_activation(&self) -> Option<&Tensor> {
        self.cache.as_ref().map(|c| &c.a)
    }

    pub fn input_padded(&self) -> Option<&Tensor> {
        self.cache.as_ref().map(|c| &c.input_padded)
    }

    /// `g'(a) ⊙ Σ J upstream` for the gradient on the layer output.
    pub fn delta_from_upstream(&self, upstream: &Tensor) -> Result<Tensor> {
        let c = self.cache()?;
        let v = match &self.bn {
            Some(bn) => bn.contract(upstream)?,
            None => upstream.clone(),
        };
        activate_prime(self.activation, &c.a)?.zip_map(&v, |g, x| g * x)
    }

    /// Gradient on the unpadded input from this layer's error rate.
    pub fn input_grad(&self, delta: &Tensor) -> Result<Tensor> {
        full_correlation(&self.theta, delta, &self.geometry)
    }

    pub fn weight_grad(&self, delta: &Tensor) -> Result<Tensor> {
        conv_weight_grad(delta, &self.cache()?.input_padded, &self.geometry)
    }
}

/// Forward of a conv layer over an already padded input.
pub fn conv_forward(layer: &mut ConvLayer, input_padded: &Tensor, train: bool, offset: Option<&Tensor>) -> Result<Tensor> {
    let mut a = conv2d(input_padded, &layer.theta, &layer.geometry, layer.path)?;
    if let Some(o) = offset {
        a.axpy(1.0, o)?;
    }
    let h = activate(layer.activation, &a)?;
    let y = match layer.bn.as_mut() {
        Some(bn) if train => bn.forward_train(&h)?,
        Some(bn) => bn.forward_eval(&h)?,
        None => h,
    };
    layer.cache = Some(ConvCache { input_padded: input_padded.clone(), a });
    Ok(y)
}

/// 1×1 → 3×3 → 1×1 convolutions whose output is added to the block input.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualConvBlock {
    pub convs: [ConvLayer; 3],
}

impl ResidualConvBlock {
    pub fn new(features: usize, bottleneck: usize, n: usize, t: usize, activation: ActivationKind, bn: bool, law: InitLaw, rng: &mut dyn RngCore) -> Result<Self> {
        if bottleneck >= features {
            return Err(Error::Config(format!("bottleneck {bottleneck} must be narrower than {features}")));
        }
        let one = ConvGeometry::new(n, t, 1, 1, 0)?;
        let three = ConvGeometry::same(n, t, 3)?;
        Ok(ResidualConvBlock {
            convs: [
                ConvLayer::new(features, bottleneck, one, activation, bn, law, rng),
                ConvLayer::new(bottleneck, bottleneck, three, activation, bn, law, rng),
                ConvLayer::new(bottleneck, features, one, activation, bn, law, rng),
            ],
        })
    }

    pub fn forward(&mut self, input: &Tensor, train: bool) -> Result<Tensor> {
        let y1 = self.convs[0].forward(input, train, None)?;
        let y2 = self.convs[1].forward(&y1, train, None)?;
        let mut y3 = self.convs[2].forward(&y2, train, None)?;
        if y3.shape() != input.shape() {
            return dim_err(format!("residual branches {:?} and {:?}", y3.shape(), input.shape()));
        }
        y3.axpy(1.0, input)?;
        Ok(y3)
    }

    /// In-block error rates (first to last) and the gradient on the block input.
    pub fn backward(&self, upstream: &Tensor) -> Result<([Tensor; 3], Tensor)> {
        let [c1, c2, c3] = &self.convs;
        let d3 = c3.delta_from_upstream(upstream)?;
        let d2 = delta_conv_to_conv(&c3.theta, &c3.geometry, &d3, c2.bn.as_ref(), &c2.cache()?.a, c2.activation)?;
        let d1 = delta_conv_to_conv(&c2.theta, &c2.geometry, &d2, c1.bn.as_ref(), &c1.cache()?.a, c1.activation)?;
        let mut input = c1.input_grad(&d1)?;
        input.axpy(1.0, upstream)?;
        Ok(([d1, d2, d3], input))
    }

    /// Parameter gradients in the order of [`Parameterized::params`].
    fn grads(&self, upstream: &Tensor, deltas: &[Tensor; 3], out: &mut Vec<Tensor>) -> Result<()> {
        for i in 0..3 {
            let c = &self.convs[i];
            out.push(c.weight_grad(&deltas[i])?);
            if let Some(bn) = &c.bn {
                let (_, ht, _) = bn_parts(bn)?;
                let (dg, db) = if i < 2 {
                    let above = &self.convs[i + 1];
                    conv_coeff_grads(&above.theta, &above.geometry, &deltas[i + 1], ht)?
                } else {
                    bn.coeff_grads(upstream)?
                };
                out.push(dg);
                out.push(db);
            }
        }
        Ok(())
    }
}

/// One stage of a convolutional stack.
#[derive(Clone, Debug, PartialEq)]
pub enum CnnLayer {
    Conv(ConvLayer),
    Pool(PoolLayer),
    Residual(ResidualConvBlock),
    /// A convolution whose kernel spans the whole map, yielding `[T_mb, F]`.
    TowardsFc { layer: DenseLayer, in_shape: [usize; 3] },
    Fc(DenseLayer),
}

/// Declarative layer description, as read from configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CnnLayerSpec {
    Conv {
        features: usize,
        receptive_field: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        activation: ActivationKind,
        #[serde(default)]
        batch_norm: bool,
    },
    Pool {
        receptive_field: usize,
        stride: usize,
        #[serde(default)]
        pool: PoolKind,
    },
    Residual {
        bottleneck: usize,
        activation: ActivationKind,
        #[serde(default)]
        batch_norm: bool,
    },
    TowardsFc {
        features: usize,
        activation: ActivationKind,
        #[serde(default)]
        batch_norm: bool,
    },
    Fc {
        features: usize,
        activation: ActivationKind,
        #[serde(default)]
        batch_norm: bool,
    },
}

fn one() -> usize {
    1
}

impl CnnLayer {
    fn name(&self) -> &'static str {
        match self {
            CnnLayer::Conv(_) => "conv",
            CnnLayer::Pool(_) => "pool",
            CnnLayer::Residual(_) => "residual",
            CnnLayer::TowardsFc { .. } => "towards_fc",
            CnnLayer::Fc(_) => "fc",
        }
    }

    fn forward(&mut self, x: &Tensor, train: bool, rng: &mut dyn RngCore, offset: Option<&Tensor>) -> Result<Tensor> {
        match self {
            CnnLayer::Conv(c) => c.forward(x, train, offset),
            CnnLayer::Pool(p) => {
                let mut y = p.forward(x)?;
                if let Some(o) = offset {
                    y.axpy(1.0, o)?;
                }
                Ok(y)
            }
            CnnLayer::Residual(b) => b.forward(x, train),
            CnnLayer::TowardsFc { layer, in_shape } => {
                let [f, n, t] = *in_shape;
                if x.shape()[1..] != [f, n, t] {
                    return dim_err(format!("towards-fc expects [T_mb, {f}, {n}, {t}], got {:?}", x.shape()));
                }
                let flat = x.clone().reshape(&[x.dim(0), f * n * t])?;
                dense_forward(layer, &flat, train, rng, offset)
            }
            CnnLayer::Fc(layer) => dense_forward(layer, x, train, rng, offset),
        }
    }

    fn kinks(&self, out: &mut Vec<f64>) {
        let push = |act: ActivationKind, a: Option<&Tensor>, out: &mut Vec<f64>| {
            if let (true, Some(a)) = (act.has_kink(), a) {
                out.extend_from_slice(a.data());
            }
        };
        match self {
            CnnLayer::Conv(c) => push(c.activation, c.pre_activation(), out),
            CnnLayer::Pool(p) => {
                if let Some(m) = p.margins() {
                    out.extend_from_slice(m);
                }
            }
            CnnLayer::Residual(b) => b.convs.iter().for_each(|c| push(c.activation, c.pre_activation(), out)),
            CnnLayer::TowardsFc { layer, .. } | CnnLayer::Fc(layer) => push(layer.activation, layer.pre_activation(), out),
        }
    }
}

fn dense_forward(layer: &mut DenseLayer, x: &Tensor, train: bool, rng: &mut dyn RngCore, offset: Option<&Tensor>) -> Result<Tensor> {
    let mut a = layer.weight_average(x)?;
    if let Some(o) = offset {
        a.axpy(1.0, o)?;
    }
    layer.forward_from_preactivation(x, a, train, rng)
}

/// The weight part of a towards-fc layer, viewed as `[F_out, F_in, N, T]`.
fn towards_fc_kernel(layer: &DenseLayer, in_shape: [usize; 3]) -> Result<Tensor> {
    let [f, n, t] = in_shape;
    let fo = layer.out_width();
    let mut k = Tensor::zeros(&[fo, f * n * t]);
    for o in 0..fo {
        k.outer_mut(o).copy_from_slice(&layer.theta.outer(o)[..f * n * t]);
    }
    k.reshape(&[fo, f, n, t])
}

/// Error rates and parameter gradients from one backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct CnnBackward {
    /// One per stage (the pool entry is the gradient on its output), then the output layer.
    pub deltas: Vec<Tensor>,
    pub grads: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnNetwork {
    pub input_shape: [usize; 3],
    pub layers: Vec<CnnLayer>,
    pub output: OutputLayer,
}

impl CnnNetwork {
    pub fn build(
        input_shape: [usize; 3],
        specs: &[CnnLayerSpec],
        outputs: usize,
        loss: LossKind,
        law: InitLaw,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        loss.validate()?;
        let mut layers = Vec::new();
        let mut shape = input_shape;
        let mut flat: Option<usize> = None;
        let mut last_bn = false;
        for spec in specs {
            match *spec {
                CnnLayerSpec::Conv { features, receptive_field, stride, padding, activation, batch_norm } => {
                    activation.validate()?;
                    if flat.is_some() {
                        return Err(Error::Config("conv layer after the towards-fc layer".into()));
                    }
                    let g = ConvGeometry::new(shape[1], shape[2], receptive_field, stride, padding)?;
                    let c = ConvLayer::new(shape[0], features, g, activation, batch_norm, law, rng);
                    shape = c.out_shape();
                    layers.push(CnnLayer::Conv(c));
                    last_bn = batch_norm;
                }
                CnnLayerSpec::Pool { receptive_field, stride, pool } => {
                    if flat.is_some() {
                        return Err(Error::Config("pool layer after the towards-fc layer".into()));
                    }
                    let p = PoolLayer::new(receptive_field, stride, pool);
                    let g = p.geometry(shape[1], shape[2])?;
                    shape = [shape[0], g.out_width, g.out_height];
                    layers.push(CnnLayer::Pool(p));
                    last_bn = false;
                }
                CnnLayerSpec::Residual { bottleneck, activation, batch_norm } => {
                    activation.validate()?;
                    if flat.is_some() {
                        return Err(Error::Config("residual block after the towards-fc layer".into()));
                    }
                    let b = ResidualConvBlock::new(shape[0], bottleneck, shape[1], shape[2], activation, batch_norm, law, rng)?;
                    layers.push(CnnLayer::Residual(b));
                    last_bn = batch_norm;
                }
                CnnLayerSpec::TowardsFc { features, activation, batch_norm } => {
                    activation.validate()?;
                    if flat.is_some() {
                        return Err(Error::Config("more than one towards-fc layer".into()));
                    }
                    let fan = shape.iter().product();
                    let layer = DenseLayer::new(fan, features, activation, batch_norm, law, rng);
                    layers.push(CnnLayer::TowardsFc { layer, in_shape: shape });
                    flat = Some(features);
                    last_bn = batch_norm;
                }
                CnnLayerSpec::Fc { features, activation, batch_norm } => {
                    activation.validate()?;
                    let Some(w) = flat else {
                        return Err(Error::Config("fc layer before the towards-fc layer".into()));
                    };
                    layers.push(CnnLayer::Fc(DenseLayer::new(w, features, activation, batch_norm, law, rng)));
                    flat = Some(features);
                    last_bn = batch_norm;
                }
            }
        }
        let Some(width) = flat else {
            return Err(Error::Config("a convolutional stack needs a towards-fc layer".into()));
        };
        let output = OutputLayer::new(width, outputs, loss, !last_bn, law, rng);
        let net = CnnNetwork { input_shape, layers, output };
        net.validate()?;
        Ok(net)
    }

    /// Rejects layer pairs whose backward case is not derived.
    pub fn validate(&self) -> Result<()> {
        for w in self.layers.windows(2) {
            if let (CnnLayer::Pool(_), CnnLayer::Conv(c)) = (&w[0], &w[1]) {
                if c.geometry.stride != 1 {
                    return Err(Error::Unsupported(format!(
                        "a conv reading a pool must have stride 1, got {}",
                        c.geometry.stride
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn set_path(&mut self, path: ConvPath) {
        for l in &mut self.layers {
            match l {
                CnnLayer::Conv(c) => c.path = path,
                CnnLayer::Residual(b) => b.convs.iter_mut().for_each(|c| c.path = path),
                _ => {}
            }
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        self.output.loss
    }

    pub fn forward(&mut self, input: &Tensor, train: bool, rng: &mut dyn RngCore) -> Result<Tensor> {
        self.forward_probe(input, train, rng, None)
    }

    /// Forward with an optional offset on stage `i`'s pre-activation (pool: output);
    /// index `L` addresses the output layer.
    pub fn forward_probe(&mut self, input: &Tensor, train: bool, rng: &mut dyn RngCore, offset: Option<(usize, &Tensor)>) -> Result<Tensor> {
        if input.rank() != 4 || input.shape()[1..] != self.input_shape {
            return dim_err(format!("network expects [T_mb, {:?}], got {:?}", self.input_shape, input.shape()));
        }
        let mut x = input.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let off = offset.and_then(|(j, o)| (j == i).then_some(o));
            x = layer.forward(&x, train, rng, off)?;
        }
        let off = offset.and_then(|(j, o)| (j == self.layers.len()).then_some(o));
        self.output.forward(&x, off)
    }

    pub fn loss(&self, targets: &Tensor) -> Result<LossValue> {
        let h = self.output.prediction().ok_or_else(|| Error::State("loss before forward".into()))?;
        loss(self.output.loss, h, targets, h.dim(0))
    }

    pub fn kink_preactivations(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.layers.iter().for_each(|l| l.kinks(&mut out));
        out
    }

    /// Gradient on stage `i`'s output given the error rate of stage `i + 1`.
    fn upstream_of(&self, i: usize, delta_above: &Tensor) -> Result<Tensor> {
        let width_of = |l: &CnnLayer| match l {
            CnnLayer::TowardsFc { layer, .. } | CnnLayer::Fc(layer) => layer.out_width(),
            _ => 0,
        };
        match self.layers.get(i + 1) {
            None => backprop_through(&self.output.theta, delta_above, width_of(&self.layers[i])),
            Some(CnnLayer::Fc(above)) => backprop_through(&above.theta, delta_above, above.in_width()),
            Some(CnnLayer::TowardsFc { layer, in_shape }) => delta_fc_to_pool(&towards_fc_kernel(layer, *in_shape)?, delta_above),
            Some(CnnLayer::Conv(above)) => above.input_grad(delta_above),
            Some(CnnLayer::Pool(above)) => above.route(delta_above),
            Some(CnnLayer::Residual(_)) => Err(Error::State("residual upstream is produced by its own backward".into())),
        }
    }

    pub fn backward(&self, targets: &Tensor) -> Result<CnnBackward> {
        let h = self.output.prediction().ok_or_else(|| Error::State("backward before forward".into()))?;
        let n = self.layers.len();
        let out_delta = output_delta(self.output.loss, h, targets, h.dim(0))?;
        let mut deltas: Vec<Option<Tensor>> = vec![None; n + 1];
        let mut upstreams: Vec<Option<Tensor>> = vec![None; n];
        let mut block_deltas: Vec<Option<[Tensor; 3]>> = vec![None; n];
        deltas[n] = Some(out_delta.clone());
        // Gradient on the input of a residual block, handed to the stage below it.
        let mut residual_input: Option<Tensor> = None;
        for i in (0..n).rev() {
            let da = deltas[i + 1].as_ref().expect("written before read");
            let above = self.layers.get(i + 1);
            let d = match (&self.layers[i], above) {
                (CnnLayer::Fc(l) | CnnLayer::TowardsFc { layer: l, .. }, _) => {
                    let (theta, width) = match above {
                        Some(CnnLayer::Fc(a)) => (&a.theta, a.in_width()),
                        _ => (&self.output.theta, self.output.in_width()),
                    };
                    let u = backprop_through(theta, da, width)?;
                    let d = l.delta_from_upstream(&u)?;
                    upstreams[i] = Some(u);
                    d
                }
                (CnnLayer::Pool(_), Some(CnnLayer::TowardsFc { layer, in_shape })) => {
                    delta_fc_to_pool(&towards_fc_kernel(layer, *in_shape)?, da)?
                }
                (CnnLayer::Pool(_), Some(CnnLayer::Conv(c))) => delta_conv_to_pool(&c.theta, da, &c.geometry)?,
                (CnnLayer::Pool(_), Some(CnnLayer::Residual(_))) => residual_input.take().expect("block ran"),
                (CnnLayer::Pool(_), _) => self.upstream_of(i, da)?,
                (CnnLayer::Conv(c), Some(CnnLayer::Pool(p))) => {
                    upstreams[i] = Some(p.route(da)?);
                    delta_pool_to_conv(p, da, c.bn.as_ref(), &c.cache()?.a, c.activation)?
                }
                (CnnLayer::Conv(c), Some(CnnLayer::Conv(a))) => {
                    delta_conv_to_conv(&a.theta, &a.geometry, da, c.bn.as_ref(), &c.cache()?.a, c.activation)?
                }
                (CnnLayer::Conv(c), Some(CnnLayer::Residual(_))) => {
                    let u = residual_input.take().expect("block ran");
                    let d = c.delta_from_upstream(&u)?;
                    upstreams[i] = Some(u);
                    d
                }
                (CnnLayer::Conv(c), _) => {
                    let u = self.upstream_of(i, da)?;
                    let d = c.delta_from_upstream(&u)?;
                    upstreams[i] = Some(u);
                    d
                }
                (CnnLayer::Residual(b), _) => {
                    let u = match above {
                        Some(CnnLayer::Residual(_)) => residual_input.take().expect("block ran"),
                        _ => self.upstream_of(i, da)?,
                    };
                    let (ds, input) = b.backward(&u)?;
                    block_deltas[i] = Some(ds);
                    residual_input = Some(input.clone());
                    upstreams[i] = Some(u);
                    input
                }
            };
            deltas[i] = Some(d);
        }

        let mut grads = Vec::new();
        for i in 0..n {
            let d = deltas[i].as_ref().expect("all written");
            let da = deltas[i + 1].as_ref().expect("all written");
            match &self.layers[i] {
                CnnLayer::Conv(c) => {
                    grads.push(c.weight_grad(d)?);
                    if let Some(bn) = &c.bn {
                        let (_, ht, _) = bn_parts(bn)?;
                        let (dg, db) = match self.layers.get(i + 1) {
                            Some(CnnLayer::Conv(a)) => conv_coeff_grads(&a.theta, &a.geometry, da, ht)?,
                            Some(CnnLayer::Pool(p)) => pool_coeff_grads(p, da, ht)?,
                            _ => bn.coeff_grads(upstreams[i].as_ref().expect("kept"))?,
                        };
                        grads.push(dg);
                        grads.push(db);
                    }
                }
                CnnLayer::Pool(_) => {}
                CnnLayer::Residual(b) => {
                    let ds = block_deltas[i].as_ref().expect("block ran");
                    b.grads(upstreams[i].as_ref().expect("kept"), ds, &mut grads)?;
                }
                CnnLayer::TowardsFc { layer, in_shape } => {
                    let x = layer.cached_input().ok_or_else(|| Error::State("towards-fc cache".into()))?;
                    let g = if layer.bias {
                        weight_grad(d, x)?
                    } else {
                        let [f, nn, t] = *in_shape;
                        let below = x.clone().reshape(&[x.dim(0), f, nn, t])?;
                        fc_pool_weight_grad(d, &below)?.reshape(layer.theta.shape())?
                    };
                    grads.push(g);
                    push_bn_grads(layer, upstreams[i].as_ref(), &mut grads)?;
                }
                CnnLayer::Fc(layer) => {
                    let x = layer.cached_input().ok_or_else(|| Error::State("fc cache".into()))?;
                    grads.push(weight_grad(d, x)?);
                    push_bn_grads(layer, upstreams[i].as_ref(), &mut grads)?;
                }
            }
        }
        grads.push(weight_grad(&out_delta, self.output.cached_input().expect("forward cached"))?);
        Ok(CnnBackward {
            deltas: deltas.into_iter().map(|d| d.expect("all written")).collect(),
            grads,
        })
    }

    pub fn update_running(&mut self) -> Result<()> {
        for bn in self.batch_norms_mut() {
            bn.update_running()?;
        }
        Ok(())
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                CnnLayer::Conv(c) => out.extend(c.bn.as_ref()),
                CnnLayer::Residual(b) => b.convs.iter().for_each(|c| out.extend(c.bn.as_ref())),
                CnnLayer::TowardsFc { layer, .. } | CnnLayer::Fc(layer) => out.extend(layer.bn.as_ref()),
                CnnLayer::Pool(_) => {}
            }
        }
        out
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                CnnLayer::Conv(c) => out.extend(c.bn.as_mut()),
                CnnLayer::Residual(b) => b.convs.iter_mut().for_each(|c| out.extend(c.bn.as_mut())),
                CnnLayer::TowardsFc { layer, .. } | CnnLayer::Fc(layer) => out.extend(layer.bn.as_mut()),
                CnnLayer::Pool(_) => {}
            }
        }
        out
    }

    pub fn describe(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.name().to_string()).collect()
    }
}

fn push_bn_grads(layer: &DenseLayer, upstream: Option<&Tensor>, grads: &mut Vec<Tensor>) -> Result<()> {
    if let Some(bn) = &layer.bn {
        let u = upstream.ok_or_else(|| Error::State("missing upstream gradient".into()))?;
        let (dg, db) = bn.coeff_grads(u)?;
        grads.push(dg);
        grads.push(db);
    }
    Ok(())
}

fn push_dense<'a>(prefix: &str, l: &'a DenseLayer, out: &mut Vec<(String, &'a Tensor)>) {
    out.push((format!("{prefix}.theta"), &l.theta));
    if let Some(bn) = &l.bn {
        out.push((format!("{prefix}.gamma"), &bn.gamma));
        out.push((format!("{prefix}.beta"), &bn.beta));
    }
}

fn push_conv<'a>(prefix: &str, c: &'a ConvLayer, out: &mut Vec<(String, &'a Tensor)>) {
    out.push((format!("{prefix}.theta"), &c.theta));
    if let Some(bn) = &c.bn {
        out.push((format!("{prefix}.gamma"), &bn.gamma));
        out.push((format!("{prefix}.beta"), &bn.beta));
    }
}

fn push_mut<'a>(theta: &'a mut Tensor, bn: Option<&'a mut BatchNorm>, out: &mut Vec<&'a mut Tensor>) {
    out.push(theta);
    if let Some(bn) = bn {
        out.push(&mut bn.gamma);
        out.push(&mut bn.beta);
    }
}

impl Parameterized for CnnNetwork {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                CnnLayer::Conv(c) => push_conv(&format!("conv{i}"), c, &mut out),
                CnnLayer::Pool(_) => {}
                CnnLayer::Residual(b) => {
                    for (k, c) in b.convs.iter().enumerate() {
                        push_conv(&format!("res{i}.conv{k}"), c, &mut out);
                    }
                }
                CnnLayer::TowardsFc { layer, .. } => push_dense(&format!("towards_fc{i}"), layer, &mut out),
                CnnLayer::Fc(layer) => push_dense(&format!("fc{i}"), layer, &mut out),
            }
        }
        out.push(("output.theta".into(), &self.output.theta));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self.layers.iter_mut() {
            match l {
                CnnLayer::Conv(c) => push_mut(&mut c.theta, c.bn.as_mut(), &mut out),
                CnnLayer::Pool(_) => {}
                CnnLayer::Residual(b) => {
                    for c in b.convs.iter_mut() {
                        push_mut(&mut c.theta, c.bn.as_mut(), &mut out);
                    }
                }
                CnnLayer::TowardsFc { layer, .. } | CnnLayer::Fc(layer) => push_mut(&mut layer.theta, layer.bn.as_mut(), &mut out),
            }
        }
        out.push(&mut self.output.theta);
        out
    }
}
