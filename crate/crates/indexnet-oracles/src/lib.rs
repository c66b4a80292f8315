//! Reference implementations written as the plain index sums, one loop per
//! index, with nothing shared with the library beyond the tensor container.
//! They are slow on purpose and only meant for tiny instances.

use indexnet::Tensor;

/// Batch statistics of a `[T, F]` or `[T, F, N, M]` input, recomputed from scratch.
#[derive(Clone, Debug)]
pub struct BnReference {
    pub t: usize,
    pub f: usize,
    /// Spatial positions per feature map (1 for dense inputs).
    pub s: usize,
    /// Height of the map, so position `i` is `(i / height, i % height)`.
    pub height: usize,
    pub h_tilde: Vec<f64>,
    pub gamma_tilde: Vec<f64>,
    pub divisor: f64,
}

impl BnReference {
    pub fn new(h: &Tensor, gamma: &[f64], epsilon: f64) -> Self {
        let t = h.dim(0);
        let f = h.dim(1);
        let s = h.len() / (t * f);
        let x = h.data();
        let at = |tt: usize, ff: usize, i: usize| x[(tt * f + ff) * s + i];
        let d = (t * s) as f64;
        let mut h_tilde = vec![0.0; h.len()];
        let mut gamma_tilde = vec![0.0; f];
        for ff in 0..f {
            let mut mean = 0.0;
            for tt in 0..t {
                for i in 0..s {
                    mean += at(tt, ff, i);
                }
            }
            mean /= d;
            let mut var = 0.0;
            for tt in 0..t {
                for i in 0..s {
                    var += (at(tt, ff, i) - mean) * (at(tt, ff, i) - mean);
                }
            }
            var /= d;
            let std = (var + epsilon).sqrt();
            gamma_tilde[ff] = gamma[ff] / std;
            for tt in 0..t {
                for i in 0..s {
                    h_tilde[(tt * f + ff) * s + i] = (at(tt, ff, i) - mean) / std;
                }
            }
        }
        let height = if h.rank() == 4 { h.dim(3) } else { 1 };
        BnReference { t, f, s, height, h_tilde, gamma_tilde, divisor: d }
    }

    pub fn h_tilde_at(&self, t: usize, f: usize, i: usize) -> f64 {
        self.h_tilde[(t * self.f + f) * self.s + i]
    }

    /// `∂y[t',f,i'] / ∂h[t,f,i]`, differentiated by hand from
    /// `y = γ (h - mean) / sqrt(var + ε)`.
    pub fn jacobian(&self, t: usize, tp: usize, f: usize, i: usize, ip: usize) -> f64 {
        let kron = if t == tp && i == ip { 1.0 } else { 0.0 };
        self.gamma_tilde[f] * (kron - 1.0 / self.divisor - self.h_tilde_at(tp, f, ip) * self.h_tilde_at(t, f, i) / self.divisor)
    }

    /// The full Jacobian as a dense `[T F S, T F S]` matrix (zero across features).
    pub fn materialize(&self) -> Tensor {
        let n = self.t * self.f * self.s;
        let mut jm = Tensor::zeros(&[n, n]);
        for t in 0..self.t {
            for tp in 0..self.t {
                for f in 0..self.f {
                    for i in 0..self.s {
                        for ip in 0..self.s {
                            let row = (t * self.f + f) * self.s + i;
                            let col = (tp * self.f + f) * self.s + ip;
                            jm[[row, col]] = self.jacobian(t, tp, f, i, ip);
                        }
                    }
                }
            }
        }
        jm
    }

    /// `Σ_{t',i'} J[t,t',f,i,i'] u[t',f,i']` by a matrix-vector product with the materialized Jacobian.
    pub fn contract(&self, upstream: &Tensor) -> Tensor {
        let jm = self.materialize();
        let n = upstream.len();
        let mut out = vec![0.0; n];
        for (row, o) in out.iter_mut().enumerate() {
            for col in 0..n {
                *o += jm[[row, col]] * upstream.data()[col];
            }
        }
        Tensor::from_vec(upstream.shape(), out).expect("same length")
    }
}

/// `a[t,f,l,m] = Σ_{f',j,k} Θ[f,f',j,k] x[t,f',S l+j-P,S m+k-P]`, reading zero outside the map.
pub fn convolve(x: &Tensor, theta: &Tensor, stride: usize, padding: usize) -> Tensor {
    let (t_mb, fi, n, m) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (fo, r) = (theta.dim(0), theta.dim(2));
    let on = (n + 2 * padding - r) / stride + 1;
    let om = (m + 2 * padding - r) / stride + 1;
    let mut out = Tensor::zeros(&[t_mb, fo, on, om]);
    for t in 0..t_mb {
        for f in 0..fo {
            for l in 0..on {
                for mm in 0..om {
                    let mut acc = 0.0;
                    for f2 in 0..fi {
                        for j in 0..r {
                            for k in 0..r {
                                let (row, col) = ((stride * l + j) as isize - padding as isize, (stride * mm + k) as isize - padding as isize);
                                if row >= 0 && col >= 0 && (row as usize) < n && (col as usize) < m {
                                    acc += theta[[f, f2, j, k]] * x[[t, f2, row as usize, col as usize]];
                                }
                            }
                        }
                    }
                    out[[t, f, l, mm]] = acc;
                }
            }
        }
    }
    out
}

/// Plain 2D correlation of a matrix with a square kernel, no features or batch.
pub fn convolve_matrix(x: &Tensor, kernel: &Tensor, stride: usize) -> Tensor {
    let (n, m, r) = (x.dim(0), x.dim(1), kernel.dim(0));
    let (on, om) = ((n - r) / stride + 1, (m - r) / stride + 1);
    let mut out = Tensor::zeros(&[on, om]);
    for l in 0..on {
        for mm in 0..om {
            let mut acc = 0.0;
            for j in 0..r {
                for k in 0..r {
                    acc += kernel[[j, k]] * x[[stride * l + j, stride * mm + k]];
                }
            }
            out[[l, mm]] = acc;
        }
    }
    out
}

/// Max pooling by scanning every window element; ties keep the first in row-major order.
pub fn max_pool(x: &Tensor, r: usize, stride: usize) -> (Tensor, Vec<(usize, usize)>) {
    let (t_mb, f, n, m) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (on, om) = ((n - r) / stride + 1, (m - r) / stride + 1);
    let mut out = Tensor::zeros(&[t_mb, f, on, om]);
    let mut winners = Vec::new();
    for t in 0..t_mb {
        for ff in 0..f {
            for l in 0..on {
                for mm in 0..om {
                    let mut best = (0, 0);
                    for j in 0..r {
                        for k in 0..r {
                            if x[[t, ff, stride * l + j, stride * mm + k]] > x[[t, ff, stride * l + best.0, stride * mm + best.1]] {
                                best = (j, k);
                            }
                        }
                    }
                    out[[t, ff, l, mm]] = x[[t, ff, stride * l + best.0, stride * mm + best.1]];
                    winners.push(best);
                }
            }
        }
    }
    (out, winners)
}

/// Geometry of the convolution sitting above a batch-normalized conv layer.
#[derive(Clone, Copy, Debug)]
pub struct Above<'a> {
    pub theta: &'a Tensor,
    pub stride: usize,
    pub padding: usize,
    pub delta: &'a Tensor,
}

impl Above<'_> {
    /// `Σ_{f',j,k} Θ[f',f,j,k] δ_above[t,f',l'',m'']` over every output `(l'',m'')`
    /// that reads position `(l,m)` of the unpadded input.
    fn reaching(&self, t: usize, f: usize, l: usize, m: usize) -> f64 {
        let (fa, r) = (self.theta.dim(0), self.theta.dim(2));
        let (on, om) = (self.delta.dim(2), self.delta.dim(3));
        let mut acc = 0.0;
        for fp in 0..fa {
            for j in 0..r {
                for k in 0..r {
                    let (row, col) = (l + self.padding, m + self.padding);
                    if row < j || col < k || (row - j) % self.stride != 0 || (col - k) % self.stride != 0 {
                        continue;
                    }
                    let (lo, mo) = ((row - j) / self.stride, (col - k) / self.stride);
                    if lo < on && mo < om {
                        acc += self.theta[[fp, f, j, k]] * self.delta[[t, fp, lo, mo]];
                    }
                }
            }
        }
        acc
    }
}

/// Error rate of a batch-normalized conv layer under a convolution, as the
/// printed ten-index sum `g'(a) Σ_{t',l',m',f',j,k} Θ δ_above J`.
pub fn delta_conv_to_conv(above: Above, bn: &BnReference, g_prime: &Tensor) -> Tensor {
    let (t_mb, f, n, m) = (g_prime.dim(0), g_prime.dim(1), g_prime.dim(2), g_prime.dim(3));
    let mut out = Tensor::zeros(g_prime.shape());
    for t in 0..t_mb {
        for ff in 0..f {
            for l in 0..n {
                for mm in 0..m {
                    let mut acc = 0.0;
                    for tp in 0..t_mb {
                        for lp in 0..n {
                            for mp in 0..m {
                                acc += above.reaching(tp, ff, lp, mp) * bn.jacobian(t, tp, ff, l * m + mm, lp * m + mp);
                            }
                        }
                    }
                    out[[t, ff, l, mm]] = g_prime[[t, ff, l, mm]] * acc;
                }
            }
        }
    }
    out
}

/// `(Δγ, Δβ)` of a batch-normalized conv layer under a convolution.
pub fn conv_coeff_grads(above: Above, bn: &BnReference) -> (Vec<f64>, Vec<f64>) {
    let mut dg = vec![0.0; bn.f];
    let mut db = vec![0.0; bn.f];
    let m = bn.height;
    for ff in 0..bn.f {
        for t in 0..bn.t {
            for i in 0..bn.s {
                let u = above.reaching(t, ff, i / m, i % m);
                dg[ff] += u * bn.h_tilde_at(t, ff, i);
                db[ff] += u;
            }
        }
    }
    (dg, db)
}

/// Gradient on the pooled layer's input: each window output goes to its
/// exhaustive-scan winner, or is shared evenly for average pooling.
pub fn pool_upstream(y: &Tensor, delta_pool: &Tensor, r: usize, stride: usize, max: bool) -> Tensor {
    let (t_mb, f) = (y.dim(0), y.dim(1));
    let (on, om) = (delta_pool.dim(2), delta_pool.dim(3));
    let winners = if max { Some(max_pool(y, r, stride).1) } else { None };
    let mut out = Tensor::zeros(y.shape());
    for t in 0..t_mb {
        for ff in 0..f {
            for l in 0..on {
                for mm in 0..om {
                    let d = delta_pool[[t, ff, l, mm]];
                    match &winners {
                        Some(w) => {
                            let (j, k) = w[((t * f + ff) * on + l) * om + mm];
                            out[[t, ff, stride * l + j, stride * mm + k]] += d;
                        }
                        None => {
                            for j in 0..r {
                                for k in 0..r {
                                    out[[t, ff, stride * l + j, stride * mm + k]] += d / (r * r) as f64;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Error rate of a batch-normalized conv layer under a pool:
/// `g'(a) Σ_{t',l',m'} J routed_pool`.
pub fn delta_pool_to_conv(y: &Tensor, delta_pool: &Tensor, r: usize, stride: usize, max: bool, bn: &BnReference, g_prime: &Tensor) -> Tensor {
    let routed = pool_upstream(y, delta_pool, r, stride, max);
    let (t_mb, f, n, m) = (y.dim(0), y.dim(1), y.dim(2), y.dim(3));
    let mut out = Tensor::zeros(y.shape());
    for t in 0..t_mb {
        for ff in 0..f {
            for l in 0..n {
                for mm in 0..m {
                    let mut acc = 0.0;
                    for tp in 0..t_mb {
                        for lp in 0..n {
                            for mp in 0..m {
                                acc += routed[[tp, ff, lp, mp]] * bn.jacobian(t, tp, ff, l * m + mm, lp * m + mp);
                            }
                        }
                    }
                    out[[t, ff, l, mm]] = g_prime[[t, ff, l, mm]] * acc;
                }
            }
        }
    }
    out
}

/// `(Δγ, Δβ)` of a batch-normalized conv layer under a pool.
pub fn pool_coeff_grads(y: &Tensor, delta_pool: &Tensor, r: usize, stride: usize, max: bool, bn: &BnReference) -> (Vec<f64>, Vec<f64>) {
    let routed = pool_upstream(y, delta_pool, r, stride, max);
    let mut dg = vec![0.0; bn.f];
    let mut db = vec![0.0; bn.f];
    for t in 0..bn.t {
        for ff in 0..bn.f {
            for i in 0..bn.s {
                let u = routed.data()[(t * bn.f + ff) * bn.s + i];
                dg[ff] += u * bn.h_tilde_at(t, ff, i);
                db[ff] += u;
            }
        }
    }
    (dg, db)
}

/// `γ h̃ + β` from the reference statistics.
pub fn bn_output(bn: &BnReference, gamma: &[f64], beta: &[f64], shape: &[usize]) -> Tensor {
    let mut y = Tensor::zeros(shape);
    for t in 0..bn.t {
        for ff in 0..bn.f {
            for i in 0..bn.s {
                let idx = (t * bn.f + ff) * bn.s + i;
                y.data_mut()[idx] = gamma[ff] * bn.h_tilde[idx] + beta[ff];
            }
        }
    }
    y
}

/// Largest elementwise gap, for slices.
pub fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub mod suites;
