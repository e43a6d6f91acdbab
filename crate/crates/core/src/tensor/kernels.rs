//! Raw loops behind the tape primitives.

use super::{contiguous_strides, flops};
use crate::error::{Error, Result};

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(format!(
                    "cannot broadcast {a:?} with {b:?}"
                )))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed as `out` (right-aligned, zero on broadcast axes).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// Visits every element of a contiguous `out` tensor together with the
/// offsets of the corresponding elements in two strided operands.
pub(crate) fn zip_strided(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let n = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..outer {
        let base = o * n;
        for j in 0..n {
            f(base + j, oa + j * la, ob + j * lb);
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn visit_strided(out: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let zeros = vec![0; out.len()];
    zip_strided(out, strides, &zeros, |i, a, _| f(i, a));
}

pub(crate) struct MatmulPlan {
    pub batch: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_batch_strides: Vec<usize>,
    pub b_batch_strides: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape(format!(
                "matmul needs rank >= 2 operands, got {a:?} and {b:?}"
            )));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {a:?} x {b:?}"
            )));
        }
        let ba = &a[..a.len() - 2];
        let bb = &b[..b.len() - 2];
        let batch = broadcast_shape(ba, bb)?;
        let scale = |s: Vec<usize>, unit: usize| s.into_iter().map(|x| x * unit).collect();
        Ok(Self {
            a_batch_strides: scale(broadcast_strides(ba, &batch), m * k),
            b_batch_strides: scale(broadcast_strides(bb, &batch), k * n),
            batch,
            m,
            k,
            n,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        let mut s = self.batch.clone();
        s.push(self.m);
        s.push(self.n);
        s
    }

    fn for_each_batch(&self, mut f: impl FnMut(usize, usize, usize)) {
        if self.batch.is_empty() {
            f(0, 0, 0);
        } else {
            zip_strided(&self.batch, &self.a_batch_strides, &self.b_batch_strides, f);
        }
    }

    pub fn forward(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let (m, k, n) = (self.m, self.k, self.n);
        let nb: usize = self.batch.iter().product();
        let mut c = vec![0.0; nb * m * n];
        self.for_each_batch(|bi, oa, ob| {
            // SAFETY: offsets and extents come from validated shapes.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    a.as_ptr().add(oa),
                    k as isize,
                    1,
                    b.as_ptr().add(ob),
                    n as isize,
                    1,
                    0.0,
                    c.as_mut_ptr().add(bi * m * n),
                    n as isize,
                    1,
                );
            }
        });
        flops::add((nb * m * n * k) as u64);
        c
    }

    /// Accumulates `dA += dC B^T` and `dB += A^T dC`.
    pub fn backward(
        &self,
        a: &[f64],
        b: &[f64],
        dc: &[f64],
        mut da: Option<&mut [f64]>,
        mut db: Option<&mut [f64]>,
    ) {
        let (m, k, n) = (self.m, self.k, self.n);
        self.for_each_batch(|bi, oa, ob| {
            let g = bi * m * n;
            // SAFETY: as in `forward`; the transposes are expressed via strides.
            unsafe {
                if let Some(da) = da.as_deref_mut() {
                    matrixmultiply::dgemm(
                        m,
                        n,
                        k,
                        1.0,
                        dc.as_ptr().add(g),
                        n as isize,
                        1,
                        b.as_ptr().add(ob),
                        1,
                        n as isize,
                        1.0,
                        da.as_mut_ptr().add(oa),
                        k as isize,
                        1,
                    );
                }
                if let Some(db) = db.as_deref_mut() {
                    matrixmultiply::dgemm(
                        k,
                        m,
                        n,
                        1.0,
                        a.as_ptr().add(oa),
                        1,
                        k as isize,
                        dc.as_ptr().add(g),
                        n as isize,
                        1,
                        1.0,
                        db.as_mut_ptr().add(ob),
                        n as isize,
                        1,
                    );
                }
            }
        });
    }
}

/// Causal depthwise convolution over `[outer, T, D]` with taps `[K, D]`.
/// The last tap multiplies the current sample: `y[t] = sum_j w[j] x[t-(K-1)+j]`.
pub(crate) fn depthwise_causal(x: &[f64], w: &[f64], outer: usize, t: usize, d: usize, k: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        let base = o * t * d;
        for s in 0..t {
            let row = &mut y[base + s * d..base + (s + 1) * d];
            for j in 0..k {
                let lag = k - 1 - j;
                if lag > s {
                    continue;
                }
                let src = &x[base + (s - lag) * d..base + (s - lag + 1) * d];
                let tap = &w[j * d..(j + 1) * d];
                for c in 0..d {
                    row[c] += tap[c] * src[c];
                }
            }
        }
    }
    flops::add((outer * t * d * k) as u64);
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_causal_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    outer: usize,
    t: usize,
    d: usize,
    k: usize,
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
) {
    for o in 0..outer {
        let base = o * t * d;
        for s in 0..t {
            let grow = &g[base + s * d..base + (s + 1) * d];
            for j in 0..k {
                let lag = k - 1 - j;
                if lag > s {
                    continue;
                }
                let src = base + (s - lag) * d;
                if let Some(gx) = gx.as_deref_mut() {
                    for c in 0..d {
                        gx[src + c] += w[j * d + c] * grow[c];
                    }
                }
                if let Some(gw) = gw.as_deref_mut() {
                    for c in 0..d {
                        gw[j * d + c] += x[src + c] * grow[c];
                    }
                }
            }
        }
    }
}

pub(crate) fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (row, out) in x.chunks_exact(n).zip(y.chunks_exact_mut(n)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, v) in out.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }
    y
}

pub(crate) fn log_softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (row, out) in x.chunks_exact(n).zip(y.chunks_exact_mut(n)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (o, v) in out.iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    y
}

/// Normalizes each row to zero mean and unit variance; returns (y, rstd).
pub(crate) fn layer_norm_rows(x: &[f64], n: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / n;
    let mut y = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for (r, (row, out)) in x.chunks_exact(n).zip(y.chunks_exact_mut(n)).enumerate() {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let s = 1.0 / (var + eps).sqrt();
        rstd[r] = s;
        for (o, v) in out.iter_mut().zip(row) {
            *o = (v - mean) * s;
        }
    }
    (y, rstd)
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0, "softplus inverse needs a positive argument");
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// `c += alpha · op(a) · op(b)` for row-major `op(a): [m, k]`, `op(b): [k, n]`,
/// `c: [m, n]`; `trans_*` reads the stored operand as its transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertion above bounds every access.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
