//! Randomized verification suites. Each returns an [`Outcome`] with one line
//! per instance so callers can print or assert on it.

use indexnet::batchnorm::{BatchNorm, BnMode};
use indexnet::cnn::{self, CnnLayer, CnnLayerSpec, CnnNetwork, ConvPath, PoolKind, PoolLayer};
use indexnet::fnn::{self, FnnNetwork, HiddenSpec};
use indexnet::gradcheck::{compare_tensors_resolved, finite_diff_fn, finite_diff_fn_5pt, GradCheckConfig, GradCheckReport};
use indexnet::network::{gradcheck_network, Network};
use indexnet::nn_math::{activate, activate_prime, rng_from_seed, ActivationKind, InitLaw, LossKind};
use indexnet::optim::{OptimizerConfig, OptimizerKind, OptimizerState};
use indexnet::rnn::{CellKind, LstmMode, ProbeOffset, ProbeSite, RecurrentNetwork, RecurrentSpec};
use indexnet::tensor::{pad2d, pool_rows, ConvGeometry};
use indexnet::{Result, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::{max_gap, Above, BnReference};

/// Rounding floor below which a five-point difference cannot resolve an error rate.
pub const DELTA_RESOLUTION: f64 = 1e-10;

#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub pass: bool,
    pub lines: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Outcome { pass: true, lines: Vec::new() }
    }

    fn record(&mut self, ok: bool, line: String) {
        self.pass &= ok;
        self.lines.push(format!("{} {line}", if ok { "ok  " } else { "FAIL" }));
    }

    pub fn report(&self) -> String {
        self.lines.join("\n")
    }
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("length matches")
}

pub fn one_hot(t: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut y = Tensor::zeros(&[t, c]);
    for tt in 0..t {
        y[[tt, rng.gen_range(0..c)]] = 1.0;
    }
    y
}

/// BN scale drawn from `[0.5, 1.5]` and shift from `[-0.5, 0.5]`.
pub fn perturb_batch_norms<N: Network>(net: &mut N, rng: &mut ChaCha8Rng) {
    for bn in net.batch_norms_mut() {
        bn.gamma.data_mut().iter_mut().for_each(|g| *g = rng.gen_range(0.5..1.5));
        bn.beta.data_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
    }
}

fn summary(r: &GradCheckReport) -> String {
    format!(
        "{} entries, {} skipped at kinks, {} unresolved below rounding floor, max rel {:.2e}",
        r.entries.len(),
        r.skipped.len(),
        r.unresolved.len(),
        r.max_rel_error()
    )
}

/// Three-layer dense networks over every activation, with and without batch
/// norm, under both losses.
pub fn fnn_gradcheck(seed: u64) -> Result<Outcome> {
    let mut out = Outcome::new();
    let config = GradCheckConfig::default();
    for &act in &ActivationKind::ALL_DEFAULT {
        for bn in [false, true] {
            for loss in [LossKind::Mse, LossKind::CrossEntropy] {
                let mut rng = rng_from_seed(seed);
                let spec = |w| HiddenSpec { width: w, activation: act, batch_norm: bn, dropout: None };
                let mut net = FnnNetwork::build(4, &[spec(8), spec(6)], 3, loss, InitLaw::Normal, &mut rng)?;
                perturb_batch_norms(&mut net, &mut rng);
                let x = random(&[5, 4], &mut rng);
                let y = match loss {
                    LossKind::Mse => random(&[5, 3], &mut rng),
                    _ => one_hot(5, 3, &mut rng),
                };
                let r = gradcheck_network(&mut net, &x, &y, 0, &config)?;
                out.record(
                    r.pass,
                    format!("{act:?} bn={bn} {loss:?}: {}", summary(&r)),
                );
            }
        }
    }
    Ok(out)
}

fn conv_spec(features: usize, r: usize, padding: usize, activation: ActivationKind, bn: bool) -> CnnLayerSpec {
    CnnLayerSpec::Conv { features, receptive_field: r, stride: 1, padding, activation, batch_norm: bn }
}

fn fc_head(bn: bool) -> [CnnLayerSpec; 2] {
    [
        CnnLayerSpec::TowardsFc { features: 5, activation: ActivationKind::Tanh, batch_norm: bn },
        CnnLayerSpec::Fc { features: 4, activation: ActivationKind::Elu, batch_norm: bn },
    ]
}

/// The CNN stacks named by the acceptance criteria, on `8×8` inputs with
/// a softmax output, with every per-stage error rate checked as well.
pub fn cnn_stacks() -> Vec<(&'static str, Vec<CnnLayerSpec>)> {
    let pool = CnnLayerSpec::Pool { receptive_field: 2, stride: 2, pool: PoolKind::Max };
    let mut stacks = Vec::new();
    for bn in [false, true] {
        let tag = |s: &'static str, t: &'static str| if bn { t } else { s };
        let mut cc = vec![conv_spec(3, 3, 1, ActivationKind::Tanh, bn), conv_spec(2, 3, 0, ActivationKind::Tanh, bn)];
        cc.extend(fc_head(bn));
        stacks.push((tag("conv-conv-fc", "conv-conv-fc bn"), cc));
        let mut cpc = vec![conv_spec(3, 3, 1, ActivationKind::Tanh, bn), pool.clone(), conv_spec(2, 3, 1, ActivationKind::Tanh, bn)];
        cpc.extend(fc_head(bn));
        stacks.push((tag("conv-pool-conv-fc", "conv-pool-conv-fc bn"), cpc));
    }
    let mut avg = vec![
        CnnLayerSpec::Conv { features: 3, receptive_field: 2, stride: 2, padding: 0, activation: ActivationKind::Sigmoid, batch_norm: true },
        CnnLayerSpec::Pool { receptive_field: 2, stride: 2, pool: PoolKind::Average },
    ];
    avg.extend(fc_head(true));
    stacks.push(("strided-conv-avgpool-fc bn", avg));
    let mut res = vec![
        conv_spec(4, 3, 1, ActivationKind::Tanh, true),
        CnnLayerSpec::Residual { bottleneck: 2, activation: ActivationKind::Tanh, batch_norm: true },
    ];
    res.extend(fc_head(true));
    stacks.push(("conv-residual-fc bn", res));
    stacks
}

pub fn cnn_gradcheck(seed: u64) -> Result<Outcome> {
    let mut out = Outcome::new();
    for (k, (name, specs)) in cnn_stacks().into_iter().enumerate() {
        let mut rng = rng_from_seed(seed + k as u64);
        let mut net = CnnNetwork::build([2, 8, 8], &specs, 3, LossKind::CrossEntropy, InitLaw::Normal, &mut rng)?;
        perturb_batch_norms(&mut net, &mut rng);
        let x = random(&[5, 2, 8, 8], &mut rng);
        let y = one_hot(5, 3, &mut rng);
        let r = gradcheck_network(&mut net, &x, &y, 0, &GradCheckConfig::default())?;
        out.record(r.pass, format!("{name} parameters: {}", summary(&r)));
        net.forward(&x, true, &mut rng_from_seed(0))?;
        let b = net.backward(&y)?;
        let mut worst = 0.0f64;
        let mut unresolved = 0;
        let mut ok = true;
        for (i, delta) in b.deltas.iter().enumerate() {
            // A residual block's stage has no single pre-activation to offset.
            if matches!(net.layers.get(i), Some(CnnLayer::Residual(_))) {
                continue;
            }
            let fd = finite_diff_fn_5pt(
                &Tensor::zeros(delta.shape()),
                |off| {
                    net.forward_probe(&x, true, &mut rng_from_seed(0), Some((i, off)))?;
                    Ok(net.loss(&y)?.value)
                },
                1e-4,
            )?;
            let r = compare_tensors_resolved("delta", delta, &fd, 1e-4, 1e-5, DELTA_RESOLUTION)?;
            ok &= r.pass;
            worst = worst.max(r.max_rel_error());
            unresolved += r.unresolved.len();
        }
        out.record(ok, format!("{name} error rates at {} stages: max rel {worst:.2e}, {unresolved} below rounding floor", b.deltas.len()));
    }
    Ok(out)
}

/// A valid conv geometry with at most `max_n` positions per side.
fn random_geometry(rng: &mut ChaCha8Rng, max_n: usize) -> ConvGeometry {
    loop {
        let (n, m) = (rng.gen_range(2..=max_n), rng.gen_range(2..=max_n));
        let r = rng.gen_range(1..=3);
        let s = rng.gen_range(1..=2);
        let p = rng.gen_range(0..r);
        if let Ok(g) = ConvGeometry::new(n, m, r, s, p) {
            return g;
        }
    }
}

fn batch_norm_on(h: &Tensor, mode: BnMode, rng: &mut ChaCha8Rng) -> Result<(BatchNorm, Tensor)> {
    let mut bn = BatchNorm::new(h.dim(1), mode);
    bn.gamma.data_mut().iter_mut().for_each(|g| *g = rng.gen_range(0.5..1.5));
    bn.beta.data_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
    let y = bn.forward_train(h)?;
    Ok((bn, y))
}

/// The aggregate (μ, λ, ν) backward forms against the naive index sums.
pub fn simplification(instances: usize, seed: u64) -> Result<Outcome> {
    let mut out = Outcome::new();
    let mut rng = rng_from_seed(seed);
    let tol = 1e-12;
    let acts = ActivationKind::ALL_DEFAULT;
    let (mut lambda, mut nu, mut mu_max, mut mu_avg, mut pool_coeff, mut dense) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..instances {
        // Conv layer under a convolution.
        let g = random_geometry(&mut rng, 6);
        let (t, f, fa) = (rng.gen_range(2..=3), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let act = acts[rng.gen_range(0..acts.len())];
        let a = random(&[t, f, g.in_width, g.in_height], &mut rng);
        let h = activate(act, &a)?;
        let (bn, _) = batch_norm_on(&h, BnMode::PerFeatureMap, &mut rng)?;
        let theta = random(&[fa, f, g.receptive_field, g.receptive_field], &mut rng);
        let delta = random(&[t, fa, g.out_width, g.out_height], &mut rng);
        let reference = BnReference::new(&h, bn.gamma.data(), bn.epsilon);
        let above = Above { theta: &theta, stride: g.stride, padding: g.padding, delta: &delta };
        let gp = activate_prime(act, &a)?;
        let fast = cnn::delta_conv_to_conv(&theta, &g, &delta, Some(&bn), &a, act)?;
        lambda = lambda.max(fast.max_abs_diff(&crate::delta_conv_to_conv(above, &reference, &gp))?);
        let (dg, db) = cnn::conv_coeff_grads(&theta, &g, &delta, bn.h_tilde().expect("cached"))?;
        let (rg, rb) = crate::conv_coeff_grads(above, &reference);
        nu = nu.max(max_gap(dg.data(), &rg)).max(max_gap(db.data(), &rb));

        // Conv layer under a pool, both kinds.
        for kind in [PoolKind::Max, PoolKind::Average] {
            let r = rng.gen_range(2..=3);
            let s = rng.gen_range(1..=r);
            let (on, om) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let (n, m) = ((on - 1) * s + r, (om - 1) * s + r);
            let a = random(&[t, f, n, m], &mut rng);
            let h = activate(act, &a)?;
            let (bn, y) = batch_norm_on(&h, BnMode::PerFeatureMap, &mut rng)?;
            let mut pool = PoolLayer::new(r, s, kind);
            pool.forward(&y)?;
            let dp = random(&[t, f, on, om], &mut rng);
            let reference = BnReference::new(&h, bn.gamma.data(), bn.epsilon);
            let y_ref = crate::bn_output(&reference, bn.gamma.data(), bn.beta.data(), y.shape());
            let max = kind == PoolKind::Max;
            let gp = activate_prime(act, &a)?;
            let fast = cnn::delta_pool_to_conv(&pool, &dp, Some(&bn), &a, act)?;
            let gap = fast.max_abs_diff(&crate::delta_pool_to_conv(&y_ref, &dp, r, s, max, &reference, &gp))?;
            if max {
                mu_max = mu_max.max(gap);
            } else {
                mu_avg = mu_avg.max(gap);
            }
            let (dg, db) = cnn::pool_coeff_grads(&pool, &dp, bn.h_tilde().expect("cached"))?;
            let (rg, rb) = crate::pool_coeff_grads(&y_ref, &dp, r, s, max, &reference);
            pool_coeff = pool_coeff.max(max_gap(dg.data(), &rg)).max(max_gap(db.data(), &rb));
        }

        // Dense layer under a dense layer.
        let (t, f, fa) = (rng.gen_range(2..=5), rng.gen_range(1..=5), rng.gen_range(1..=4));
        let a = random(&[t, f], &mut rng);
        let h = activate(act, &a)?;
        let (bn, _) = batch_norm_on(&h, BnMode::PerFeature, &mut rng)?;
        let theta = random(&[fa, f], &mut rng);
        let delta = random(&[t, fa], &mut rng);
        let mut u = Tensor::zeros(&[t, f]);
        for tt in 0..t {
            for ff in 0..f {
                for fp in 0..fa {
                    u[[tt, ff]] += theta[[fp, ff]] * delta[[tt, fp]];
                }
            }
        }
        let reference = BnReference::new(&h, bn.gamma.data(), bn.epsilon);
        let naive = reference.contract(&u).zip_map(&activate_prime(act, &a)?, |x, g| x * g)?;
        dense = dense.max(fnn::hidden_delta(&theta, &delta, Some(&bn), &a, act)?.max_abs_diff(&naive)?);
        let (dg, db) = fnn::coeff_grads(&theta, &delta, bn.h_tilde().expect("cached"))?;
        let mut rg = vec![0.0; f];
        let mut rb = vec![0.0; f];
        for tt in 0..t {
            for ff in 0..f {
                rg[ff] += u[[tt, ff]] * reference.h_tilde_at(tt, ff, 0);
                rb[ff] += u[[tt, ff]];
            }
        }
        dense = dense.max(max_gap(dg.data(), &rg)).max(max_gap(db.data(), &rb));
    }
    for (name, gap) in [
        ("conv under conv, error rate (lambda form)", lambda),
        ("conv under conv, BN coefficients (nu form)", nu),
        ("conv under max pool, error rate (mu form)", mu_max),
        ("conv under average pool, error rate (mu form)", mu_avg),
        ("conv under pool, BN coefficients", pool_coeff),
        ("dense under dense, error rate and BN coefficients", dense),
    ] {
        out.record(gap <= tol, format!("{name}: {instances} instances, max |fast - naive| = {gap:.2e} (tol {tol:e})"));
    }
    Ok(out)
}

/// GEMM convolution, naive convolution and row-max pooling against plain loops.
pub fn kernels(instances: usize, seed: u64) -> Result<Outcome> {
    let mut out = Outcome::new();
    let mut rng = rng_from_seed(seed);
    let tol = 1e-12;
    let (mut gemm4, mut naive4, mut gemm2) = (0.0f64, 0.0f64, 0.0f64);
    let mut pool_mismatch = 0usize;
    for _ in 0..instances {
        let g = random_geometry(&mut rng, 9);
        let (t, fi, fo) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let x = random(&[t, fi, g.in_width, g.in_height], &mut rng);
        let theta = random(&[fo, fi, g.receptive_field, g.receptive_field], &mut rng);
        let reference = crate::convolve(&x, &theta, g.stride, g.padding);
        let xp = pad2d(&x, g.padding);
        gemm4 = gemm4.max(cnn::conv2d(&xp, &theta, &g, ConvPath::Gemm)?.max_abs_diff(&reference)?);
        naive4 = naive4.max(cnn::conv2d(&xp, &theta, &g, ConvPath::Naive)?.max_abs_diff(&reference)?);

        let g2 = ConvGeometry::new(g.in_width, g.in_height, g.receptive_field, g.stride, 0);
        if let Ok(g2) = g2 {
            let mat = random(&[g2.in_width, g2.in_height], &mut rng);
            let kernel = random(&[g2.receptive_field, g2.receptive_field], &mut rng);
            let reference = crate::convolve_matrix(&mat, &kernel, g2.stride);
            let x4 = mat.clone().reshape(&[1, 1, g2.in_width, g2.in_height])?;
            let k4 = kernel.clone().reshape(&[1, 1, g2.receptive_field, g2.receptive_field])?;
            let fast = cnn::conv2d(&x4, &k4, &g2, ConvPath::Gemm)?.reshape(&[g2.out_width, g2.out_height])?;
            gemm2 = gemm2.max(fast.max_abs_diff(&reference)?);
        }

        let r = rng.gen_range(1..=3);
        let s = rng.gen_range(1..=3);
        let (on, om) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let x = random(&[t, fi, (on - 1) * s + r, (om - 1) * s + r], &mut rng);
        let (values, winners) = crate::max_pool(&x, r, s);
        let mut fast_values = Vec::new();
        let mut fast_winners = Vec::new();
        for tt in 0..t {
            let p = pool_rows(&x.slice_outer(tt), r, s)?;
            fast_values.extend_from_slice(p.values.data());
            fast_winners.extend(p.argmax);
        }
        pool_mismatch += fast_values.iter().zip(values.data()).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
        pool_mismatch += fast_winners.iter().zip(&winners).filter(|(a, b)| a != b).count();
    }
    out.record(gemm4 <= tol, format!("im2col+matmul vs loops, 4D: {instances} geometries, max gap {gemm4:.2e}"));
    out.record(naive4 <= tol, format!("library naive path vs loops, 4D: max gap {naive4:.2e}"));
    out.record(gemm2 <= tol, format!("im2col+matmul vs loops, 2D matrix case: max gap {gemm2:.2e}"));
    out.record(pool_mismatch == 0, format!("pool as row max vs exhaustive scan: {pool_mismatch} mismatching values or winners"));
    Ok(out)
}

/// The aggregate BN Jacobian contraction against a materialized Jacobian and
/// against finite differences of the training forward.
pub fn bn_jacobian(instances: usize, seed: u64) -> Result<Outcome> {
    let mut out = Outcome::new();
    let mut rng = rng_from_seed(seed);
    let tol = 1e-6;
    for mode in [BnMode::PerFeature, BnMode::PerFeatureMap] {
        let (mut mat, mut fd) = (0.0f64, 0.0f64);
        for _ in 0..instances {
            let t = rng.gen_range(2..=5);
            let f = rng.gen_range(1..=3);
            let shape = match mode {
                BnMode::PerFeature => vec![t, f],
                BnMode::PerFeatureMap => vec![t, f, rng.gen_range(1..=3), rng.gen_range(1..=3)],
            };
            let h = random(&shape, &mut rng).map(|v| 2.0 * v + 0.3);
            let (bn, _) = batch_norm_on(&h, mode, &mut rng)?;
            let u = random(&shape, &mut rng);
            let fast = bn.contract(&u)?;
            mat = mat.max(fast.max_abs_diff(&BnReference::new(&h, bn.gamma.data(), bn.epsilon).contract(&u))?);
            let mut probe = bn.clone();
            let numeric = finite_diff_fn(&h, |hh| probe.forward_train(hh)?.dot(&u), 1e-5)?;
            fd = fd.max(fast.max_abs_diff(&numeric)?);
        }
        out.record(mat <= tol, format!("{mode:?}: contraction vs materialized J, {instances} instances, max gap {mat:.2e}"));
        out.record(fd <= tol, format!("{mode:?}: contraction vs finite differences, max gap {fd:.2e}"));
    }
    Ok(out)
}

fn recurrent_spec(kind: CellKind, steps: usize, bn: bool, loss: LossKind) -> RecurrentSpec {
    RecurrentSpec { kind, input: 3, hidden: vec![4, 3], outputs: 2, steps, loss, batch_norm: bn, law: InitLaw::Normal, diagonal_init: false }
}

fn sequence_targets(loss: LossKind, t_mb: usize, steps: usize, rng: &mut ChaCha8Rng) -> Tensor {
    match loss {
        LossKind::Mse => random(&[t_mb, 2, steps], rng),
        _ => {
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

fn recurrent_check(kind: CellKind, steps: usize, bn: bool, loss: LossKind, seed: u64) -> Result<(bool, String)> {
    let mut rng = rng_from_seed(seed);
    let mut net = RecurrentNetwork::build(&recurrent_spec(kind, steps, bn, loss), &mut rng)?;
    net.mode = LstmMode::FullGradient;
    perturb_batch_norms(&mut net, &mut rng);
    let x = random(&[4, 3, steps], &mut rng);
    let y = sequence_targets(loss, 4, steps, &mut rng);
    let r = gradcheck_network(&mut net, &x, &y, 0, &GradCheckConfig::default())?;
    net.forward(&x, true)?;
    let b = net.backward(&y)?;
    let mut ok = r.pass;
    let mut worst = 0.0f64;
    for k in 0..net.layers.len() {
        for tau in 0..steps {
            let fd = finite_diff_fn_5pt(
                &Tensor::zeros(b.dh[k][tau].shape()),
                |off| {
                    net.forward_probe(&x, true, Some(ProbeOffset { layer: k, step: tau, site: ProbeSite::Hidden, offset: off }))?;
                    Ok(net.loss(&y)?.value)
                },
                1e-4,
            )?;
            let c = compare_tensors_resolved("dh", &b.dh[k][tau], &fd, 1e-4, 1e-5, DELTA_RESOLUTION)?;
            ok &= c.pass;
            worst = worst.max(c.max_rel_error());
        }
    }
    Ok((
        ok,
        format!("{kind:?} T={steps} bn={bn} {loss:?}: parameters {}; dJ/dh max rel {worst:.2e}", summary(&r)),
    ))
}

fn mode_gap(steps: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_from_seed(seed);
    let mut net = RecurrentNetwork::build(&recurrent_spec(CellKind::Lstm, steps, false, LossKind::Mse), &mut rng)?;
    let x = random(&[3, 3, steps], &mut rng);
    let y = random(&[3, 2, steps], &mut rng);
    net.forward(&x, true)?;
    let paper = net.backward_with(&y, LstmMode::PaperFaithful)?;
    let full = net.backward_with(&y, LstmMode::FullGradient)?;
    let mut gap = 0.0f64;
    for (a, b) in paper.grads.iter().zip(&full.grads) {
        gap = gap.max(a.max_abs_diff(b)?);
    }
    Ok(gap)
}

pub fn recurrent(seed: u64) -> Result<Outcome> {
    let mut out = Outcome::new();
    for (i, (bn, loss)) in [(false, LossKind::Mse), (true, LossKind::Mse), (false, LossKind::CrossEntropy), (true, LossKind::CrossEntropy)].into_iter().enumerate() {
        let (ok, line) = recurrent_check(CellKind::Rnn, 4, bn, loss, seed + i as u64)?;
        out.record(ok, line);
    }
    for (i, (bn, loss)) in [(false, LossKind::Mse), (true, LossKind::CrossEntropy)].into_iter().enumerate() {
        let (ok, line) = recurrent_check(CellKind::Lstm, 3, bn, loss, seed + 10 + i as u64)?;
        out.record(ok, format!("{line} (FullGradient)"));
    }
    let at_one = mode_gap(1, seed + 20)?;
    out.record(at_one == 0.0, format!("LSTM PaperFaithful vs FullGradient at T=1: max gap {at_one:e} (must be exactly 0)"));
    for steps in [2, 3, 4] {
        let gap = mode_gap(steps, seed + 20 + steps as u64)?;
        out.record(gap > 0.0, format!("LSTM PaperFaithful vs FullGradient at T={steps}: max gap {gap:.3e} (cell-state chain truncated by the printed recursion)"));
    }
    Ok(out)
}

fn quadratic_run(kind: OptimizerKind, steps: usize) -> Result<Vec<f64>> {
    let mut st = OptimizerState::new(OptimizerConfig::new(kind))?;
    let mut theta = Tensor::from_vec(&[1], vec![1.0])?;
    let mut losses = vec![0.5];
    for _ in 0..steps {
        let g = theta.clone();
        let mut grad_at = |shifted: &[Tensor]| -> Result<Vec<Tensor>> { Ok(shifted.to_vec()) };
        st.step(&mut [&mut theta], &[g], Some(&mut grad_at))?;
        losses.push(0.5 * theta.data()[0] * theta.data()[0]);
    }
    Ok(losses)
}

pub fn optimizers(seed: u64) -> Result<Outcome> {
    let mut out = Outcome::new();
    for kind in OptimizerKind::ALL {
        let losses = quadratic_run(kind, 100)?;
        let monotone = losses.windows(2).all(|w| w[1] < w[0]);
        out.record(monotone, format!("{kind:?}: J = θ²/2 from {:.6} to {:.6e} in 100 steps, strictly decreasing = {monotone}", losses[0], losses[100]));
    }
    let mut rng = rng_from_seed(seed);
    let mut sgd = OptimizerState::new(OptimizerConfig::new(OptimizerKind::Sgd))?;
    let mut momentum = OptimizerState::new(OptimizerConfig { gamma: 0.0, ..OptimizerConfig::new(OptimizerKind::Momentum) })?;
    let mut pa = random(&[6], &mut rng);
    let mut pb = pa.clone();
    for _ in 0..100 {
        let g = random(&[6], &mut rng);
        sgd.step(&mut [&mut pa], &[g.clone()], None)?;
        momentum.step(&mut [&mut pb], &[g], None)?;
    }
    let same = pa.data().iter().zip(pb.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    out.record(same, format!("Momentum(gamma=0) vs SGD over 100 random gradients: bitwise equal = {same}"));
    let mut exact = 0;
    let n = 1000;
    for _ in 0..n {
        let mut st = OptimizerState::new(OptimizerConfig::new(OptimizerKind::Adam))?;
        let d = rng.gen_range(-10.0..10.0);
        let mut p = Tensor::from_vec(&[1], vec![0.0])?;
        st.step(&mut [&mut p], &[Tensor::from_vec(&[1], vec![d])?], None)?;
        exact += usize::from(st.m[0].data()[0].to_bits() == f64::to_bits(d));
    }
    out.record(exact == n, format!("Adam step 1: bias-corrected first moment equals the gradient bitwise for {exact}/{n} draws"));
    Ok(out)
}
