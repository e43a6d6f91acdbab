//! Linear state-space models: zero-order-hold discretization, impulse-response
//! kernels, the recurrent scan and its convolutional equivalent, and the
//! selective (input-dependent) scan used for gradient verification.

use nalgebra::{DMatrix, DVector};
use crate::error::{Error, Result};
use crate::tensor::rng::Rng;
use crate::tensor::{CustomOp, ParamId, ParamStore, Tape, Tensor, Var};

/// Continuous-time single-input single-output SSM `h' = Ah + Bx, y = Ch + Dx`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: DVector<f64>,
    pub d_skip: f64,
}

impl SsmParams {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, c: DVector<f64>, d_skip: f64) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n || b.len() != n || c.len() != n {
            return Err(Error::shape(format!(
                "SSM needs A N×N, B and C of length N; got A {}×{}, B {}, C {}",
                a.nrows(),
                a.ncols(),
                b.len(),
                c.len()
            )));
        }
        Ok(Self { a, b, c, d_skip })
    }

    /// Stable real-diagonal initialization `A = diag(-(1 + n))`, `B = C = 1`.
    pub fn diagonal_init(n: usize) -> Self {
        Self {
            a: DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| -(1.0 + i as f64))),
            b: DVector::from_element(n, 1.0),
            c: DVector::from_element(n, 1.0),
            d_skip: 0.0,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }
}

/// Discretized SSM `h_k = Ā h_{k-1} + B̄ x_k`, `y_k = C h_k + D x_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm {
    pub a_bar: DMatrix<f64>,
    pub b_bar: DVector<f64>,
    pub c: DVector<f64>,
    pub d_skip: f64,
    pub delta: f64,
}

const PADE_ORDER: usize = 6;
const SERIES_TOL: f64 = 1e-14;

fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring with a diagonal Padé
/// approximant of order 6.
pub fn matrix_exp(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    let norm = norm1(x);
    if !norm.is_finite() {
        return Err(Error::NonFinite("matrix exponential argument".into()));
    }
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let xs = x * 0.5f64.powi(squarings);

    // c_j = (2m - j)! m! / ((2m)! j! (m - j)!), built by the ratio recurrence
    let m = PADE_ORDER as f64;
    let mut coef = 1.0;
    let mut power = DMatrix::identity(n, n);
    let mut num = DMatrix::identity(n, n);
    let mut den = DMatrix::identity(n, n);
    for j in 1..=PADE_ORDER {
        let jf = j as f64;
        coef *= (m - jf + 1.0) / (jf * (2.0 * m - jf + 1.0));
        power = &power * &xs;
        num += &power * coef;
        if j % 2 == 0 {
            den += &power * coef;
        } else {
            den -= &power * coef;
        }
    }
    let mut r = den
        .lu()
        .solve(&num)
        .ok_or_else(|| Error::NonFinite("singular Padé denominator".into()))?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix exponential overflowed".into()));
    }
    Ok(r)
}

/// Returns `(exp(ΔA), Ψ)` where `Ψ = ∫₀^Δ exp(sA) ds = Δ·φ₁(ΔA)`, so that
/// `B̄ = Ψ B`.
///
/// For `‖ΔA‖₁ ≤ 1` Ψ is the Taylor series `Δ(I + ΔA/2! + (ΔA)²/3! + …)`,
/// truncated once a term's norm drops below 1e-14. Larger arguments read Ψ
/// off the exponential of the block matrix `[[ΔA, ΔI], [0, 0]]`, which is
/// also inversion-free.
pub fn zoh(a: &DMatrix<f64>, delta: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    let x = a * delta;
    if norm1(&x) <= 1.0 {
        let e = matrix_exp(&x)?;
        let mut term = DMatrix::identity(n, n);
        let mut sum = term.clone();
        for j in 2.. {
            term = &term * &x / j as f64;
            if norm1(&term) < SERIES_TOL {
                break;
            }
            sum += &term;
        }
        return Ok((e, sum * delta));
    }
    let mut big = DMatrix::zeros(2 * n, 2 * n);
    big.view_mut((0, 0), (n, n)).copy_from(&x);
    big.view_mut((0, n), (n, n))
        .copy_from(&(DMatrix::identity(n, n) * delta));
    let eb = matrix_exp(&big)?;
    Ok((
        eb.view((0, 0), (n, n)).into_owned(),
        eb.view((0, n), (n, n)).into_owned(),
    ))
}

/// Zero-order-hold discretization with step `delta`.
pub fn discretize(p: &SsmParams, delta: f64) -> Result<DiscreteSsm> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::invalid(format!("step size must be positive, got {delta}")));
    }
    let (a_bar, psi) = zoh(&p.a, delta)?;
    let b_bar = psi * &p.b;
    if b_bar.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("discretized input matrix".into()));
    }
    Ok(DiscreteSsm {
        a_bar,
        b_bar,
        c: p.c.clone(),
        d_skip: p.d_skip,
        delta,
    })
}

/// Impulse response `K[k] = C Ā^k B̄` for `k < len`.
pub fn materialize_kernel(d: &DiscreteSsm, len: usize) -> Result<Tensor> {
    if len == 0 {
        return Err(Error::invalid("kernel length must be at least 1"));
    }
    let mut state = d.b_bar.clone();
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(d.c.dot(&state));
        state = &d.a_bar * state;
    }
    Tensor::new([len], out)
}

/// Runs the recurrence from `h₀ = 0` over a 1-D input.
pub fn recurrent_scan(d: &DiscreteSsm, x: &Tensor) -> Result<Tensor> {
    if x.rank() != 1 {
        return Err(Error::shape(format!("scan expects a 1-D input, got {:?}", x.shape())));
    }
    let mut h = DVector::zeros(d.a_bar.nrows());
    let mut y = Vec::with_capacity(x.numel());
    for &xk in x.data() {
        h = &d.a_bar * h + &d.b_bar * xk;
        y.push(d.c.dot(&h) + d.d_skip * xk);
    }
    Tensor::new([x.numel()], y)
}

/// Causal, left-zero-padded, same-length convolution
/// `y_t = Σ_{j ≤ min(t, k-1)} K_j x_{t-j}`.
pub fn causal_convolve(kernel: &Tensor, x: &Tensor) -> Result<Tensor> {
    if kernel.rank() != 1 || x.rank() != 1 {
        return Err(Error::shape(format!(
            "causal_convolve expects 1-D kernel and input, got {:?} and {:?}",
            kernel.shape(),
            x.shape()
        )));
    }
    let (k, xs) = (kernel.data(), x.data());
    let y = (0..xs.len())
        .map(|t| (0..k.len().min(t + 1)).map(|j| k[j] * xs[t - j]).sum())
        .collect();
    Ok(Tensor::raw(vec![xs.len()], y))
}

/// Input-dependent projections `Δ_t = softplus(W_Δ·x_t)`, `B_t = x_t W_B`,
/// `C_t = x_t W_C`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveParams {
    /// `[D]`
    pub w_delta: Tensor,
    /// `[D, N]`
    pub w_b: Tensor,
    /// `[D, N]`
    pub w_c: Tensor,
}

impl SelectiveParams {
    pub fn zeros(d_model: usize, n: usize) -> Self {
        Self {
            w_delta: Tensor::zeros([d_model]),
            w_b: Tensor::zeros([d_model, n]),
            w_c: Tensor::zeros([d_model, n]),
        }
    }

    pub fn random(d_model: usize, n: usize, scale: f64, rng: &mut Rng) -> Self {
        Self {
            w_delta: Tensor::randn([d_model], scale, rng),
            w_b: Tensor::randn([d_model, n], scale, rng),
            w_c: Tensor::randn([d_model, n], scale, rng),
        }
    }
}

/// Selective scan over `x: [L, D]`, returning `[L]`. The scalar channel
/// input is the feature mean `x̃_t = mean_d x_t`; A and the skip term come
/// from `base`.
pub fn selective_scan(sp: &SelectiveParams, base: &SsmParams, x: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let y = selective_scan_on(
        &tape,
        base,
        tape.constant(sp.w_delta.clone()),
        tape.constant(sp.w_b.clone()),
        tape.constant(sp.w_c.clone()),
        tape.constant(x.clone()),
    )?;
    let out = tape.value(y);
    Ok((*out).clone())
}

/// Differentiable selective scan on a tape.
pub fn selective_scan_on(
    tape: &Tape,
    base: &SsmParams,
    w_delta: Var,
    w_b: Var,
    w_c: Var,
    x: Var,
) -> Result<Var> {
    let xs = tape.shape(x);
    let n = base.state_dim();
    if xs.len() != 2 {
        return Err(Error::shape(format!("selective scan expects x [L, D], got {xs:?}")));
    }
    let (len, dm) = (xs[0], xs[1]);
    if tape.shape(w_delta) != [dm] || tape.shape(w_b) != [dm, n] || tape.shape(w_c) != [dm, n] {
        return Err(Error::shape(format!(
            "selective projections must be W_Δ [{dm}], W_B/W_C [{dm}, {n}]"
        )));
    }
    let wd = tape.reshape(w_delta, &[dm, 1])?;
    let pre = tape.matmul(x, wd)?;
    let pre = tape.reshape(pre, &[len])?;
    let delta = tape.softplus(pre);
    let bt = tape.matmul(x, w_b)?;
    let ct = tape.matmul(x, w_c)?;
    let xm = tape.mean_axis(x, 1)?;
    let xm = tape.reshape(xm, &[len])?;

    let (dv, bv, cv, xv) = (tape.value(delta), tape.value(bt), tape.value(ct), tape.value(xm));
    let mut op = SelectiveScanOp {
        a: base.a.clone(),
        d_skip: base.d_skip,
        e: Vec::with_capacity(len),
        psi: Vec::with_capacity(len),
        h: Vec::with_capacity(len + 1),
    };
    op.h.push(DVector::zeros(n));
    let mut y = Vec::with_capacity(len);
    for t in 0..len {
        let (e, psi) = zoh(&base.a, dv.data()[t])?;
        let b = DVector::from_column_slice(&bv.data()[t * n..(t + 1) * n]);
        let c = DVector::from_column_slice(&cv.data()[t * n..(t + 1) * n]);
        let h = &e * &op.h[t] + &psi * b * xv.data()[t];
        y.push(c.dot(&h) + base.d_skip * xv.data()[t]);
        op.e.push(e);
        op.psi.push(psi);
        op.h.push(h);
    }
    Ok(tape.custom(
        &[delta, bt, ct, xm],
        Tensor::new([len], y)?,
        Box::new(op),
    ))
}

/// Reverse-mode rule for the time-varying recurrence
/// `h_t = E_t h_{t-1} + Ψ_t B_t x̃_t`, `y_t = C_t·h_t + D x̃_t`
/// with `E_t = exp(Δ_t A)` and `Ψ_t = ∫₀^{Δ_t} exp(sA) ds`.
struct SelectiveScanOp {
    a: DMatrix<f64>,
    d_skip: f64,
    e: Vec<DMatrix<f64>>,
    psi: Vec<DMatrix<f64>>,
    h: Vec<DVector<f64>>,
}

impl CustomOp for SelectiveScanOp {
    fn name(&self) -> &str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (bt, ct, xm) = (inputs[1], inputs[2], inputs[3]);
        let n = self.a.nrows();
        let len = grad.len();
        let mut g_delta = vec![0.0; len];
        let mut g_b = vec![0.0; len * n];
        let mut g_c = vec![0.0; len * n];
        let mut g_x = vec![0.0; len];
        let mut lambda = DVector::zeros(n);
        for t in (0..len).rev() {
            let c = DVector::from_column_slice(&ct.data()[t * n..(t + 1) * n]);
            let b = DVector::from_column_slice(&bt.data()[t * n..(t + 1) * n]);
            let x = xm.data()[t];
            lambda += &c * grad[t];
            let h = &self.h[t + 1];
            for i in 0..n {
                g_c[t * n + i] = grad[t] * h[i];
            }
            let psi_b = &self.psi[t] * &b;
            g_x[t] = grad[t] * self.d_skip + lambda.dot(&psi_b);
            let gb = self.psi[t].tr_mul(&lambda) * x;
            g_b[t * n..(t + 1) * n].copy_from_slice(gb.as_slice());
            // d h_t / d Δ_t = A E_t h_{t-1} + E_t B_t x̃_t
            let dh = &self.a * (&self.e[t] * &self.h[t]) + &self.e[t] * &b * x;
            g_delta[t] = lambda.dot(&dh);
            lambda = self.e[t].tr_mul(&lambda);
        }
        vec![Some(g_delta), Some(g_b), Some(g_c), Some(g_x)]
    }
}

/// Learnable selective projections stored in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct SelectiveSsm {
    pub base: SsmParams,
    pub w_delta: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
}

impl SelectiveSsm {
    pub fn new(store: &mut ParamStore, prefix: &str, init: SelectiveParams, base: SsmParams) -> Self {
        Self {
            w_delta: store.add(format!("{prefix}.w_delta"), init.w_delta, false),
            w_b: store.add(format!("{prefix}.w_b"), init.w_b, true),
            w_c: store.add(format!("{prefix}.w_c"), init.w_c, true),
            base,
        }
    }

    pub fn forward(&self, tape: &Tape, x: Var) -> Result<Var> {
        selective_scan_on(
            tape,
            &self.base,
            tape.param(self.w_delta),
            tape.param(self.w_b),
            tape.param(self.w_c),
            x,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng::Streams;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn zero_a_gives_limiting_form() {
        let p = SsmParams::new(
            DMatrix::zeros(1, 1),
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 1.0),
            0.0,
        )
        .unwrap();
        let d = discretize(&p, 0.1).unwrap();
        assert_eq!(d.a_bar[(0, 0)], 1.0);
        assert_eq!(d.b_bar[0], 0.1);
    }

    #[test]
    fn scalar_decay_matches_closed_form() {
        let p = SsmParams::new(
            DMatrix::from_element(1, 1, -1.0),
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 1.0),
            0.0,
        )
        .unwrap();
        let d = discretize(&p, 0.1).unwrap();
        assert!(close(d.a_bar[(0, 0)], (-0.1f64).exp(), 1e-15));
        assert!(close(d.b_bar[0], 1.0 - (-0.1f64).exp(), 1e-15));
        assert!(close(d.a_bar[(0, 0)], 0.904837, 1e-6));
        assert!(close(d.b_bar[0], 0.095163, 1e-6));
    }

    #[test]
    fn large_step_uses_block_exponential_consistently() {
        let a = DMatrix::from_row_slice(2, 2, &[-3.0, 1.0, -1.0, -2.0]);
        let (e, psi) = zoh(&a, 2.0).unwrap();
        // Ψ A = E - I for any A, checked without inverting A
        let lhs = &psi * &a;
        let rhs = &e - DMatrix::identity(2, 2);
        assert!((lhs - rhs).amax() < 1e-12);
    }

    #[test]
    fn kernel_is_powers_of_a_bar() {
        let d = DiscreteSsm {
            a_bar: DMatrix::from_element(1, 1, 0.5),
            b_bar: DVector::from_element(1, 1.0),
            c: DVector::from_element(1, 1.0),
            d_skip: 0.0,
            delta: 1.0,
        };
        assert_eq!(materialize_kernel(&d, 3).unwrap().data(), &[1.0, 0.5, 0.25]);
        let mut z = d.clone();
        z.a_bar[(0, 0)] = 0.0;
        assert_eq!(materialize_kernel(&z, 3).unwrap().data(), &[1.0, 0.0, 0.0]);
        z.c[0] = 0.0;
        assert!(materialize_kernel(&z, 4).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn convolution_examples() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let id = causal_convolve(&Tensor::from_vec(vec![1.0]), &x).unwrap();
        assert_eq!(id.data(), x.data());
        let delay = causal_convolve(&Tensor::from_vec(vec![0.0, 1.0]), &x).unwrap();
        assert_eq!(delay.data(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn zero_selective_weights_leave_only_the_skip_path() {
        let mut base = SsmParams::diagonal_init(4);
        base.d_skip = 0.7;
        let mut rng = Streams::new(3).stream("x");
        let x = Tensor::randn([6, 3], 1.0, &mut rng);
        let y = selective_scan(&SelectiveParams::zeros(3, 4), &base, &x).unwrap();
        for t in 0..6 {
            let mean = (0..3).map(|d| x.get(&[t, d])).sum::<f64>() / 3.0;
            assert!(close(y.data()[t], 0.7 * mean, 1e-15));
        }
    }
}
