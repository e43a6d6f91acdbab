//! One-sided real FFT along an arbitrary axis.
//!
//! Forward transforms are unnormalized; the inverse carries the `1/T`
//! factor. A length-`T` real signal has `T/2 + 1` non-negative frequency
//! bins; bin `f` sits at `f * rate / T` Hz.

use std::cell::RefCell;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{flops, ComplexTensor, Tensor};
use crate::error::{Error, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

pub fn bins(t: usize) -> usize {
    t / 2 + 1
}

/// Runs `inverse`/forward transforms of length `n` over every contiguous
/// length-`n` chunk of `buf`.
fn batch_fft(n: usize, inverse: bool, buf: &mut [Complex<f64>]) {
    let plan = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    });
    let mut scratch = vec![Complex::new(0.0, 0.0); plan.get_inplace_scratch_len()];
    plan.process_with_scratch(buf, &mut scratch);
}

/// Geometry of the 1-D lanes running along `axis`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Lanes {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

impl Lanes {
    pub fn new(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

/// Forward one-sided transform of every lane. Returns split planes laid out
/// like the input with the axis length replaced by `T/2 + 1`.
pub(crate) fn rfft_lanes(data: &[f64], lanes: Lanes) -> (Vec<f64>, Vec<f64>) {
    let out = rfft_raw(data, lanes);
    flops::add((lanes.outer * lanes.inner) as u64 * flops::fft_cost(lanes.len));
    out
}

/// Number of lanes transformed together: enough to amortize planning, few
/// enough that the transposed block stays cache resident.
fn group_width(t: usize, inner: usize) -> usize {
    (32768 / t).clamp(1, inner)
}

// Lanes are copied out in groups into contiguous rows so one batched
// transform covers each group.
fn rfft_raw(data: &[f64], lanes: Lanes) -> (Vec<f64>, Vec<f64>) {
    let Lanes { outer, len: t, inner } = lanes;
    let f = bins(t);
    let width = group_width(t, inner);
    let mut re = vec![0.0; outer * f * inner];
    let mut im = vec![0.0; outer * f * inner];
    let mut buf = vec![Complex::new(0.0, 0.0); t * width];
    for o in 0..outer {
        for i0 in (0..inner).step_by(width) {
            let w = width.min(inner - i0);
            let buf = &mut buf[..t * w];
            for s in 0..t {
                let row = &data[(o * t + s) * inner + i0..][..w];
                for (i, &v) in row.iter().enumerate() {
                    buf[i * t + s] = Complex::new(v, 0.0);
                }
            }
            batch_fft(t, false, buf);
            for k in 0..f {
                let base = (o * f + k) * inner + i0;
                for i in 0..w {
                    let b = buf[i * t + k];
                    re[base + i] = b.re;
                    im[base + i] = b.im;
                }
            }
        }
    }
    (re, im)
}

/// Adjoint of [`rfft_lanes`]: maps bin gradients back to the time domain.
pub(crate) fn rfft_lanes_adjoint(g_re: &[f64], g_im: &[f64], lanes: Lanes) -> Vec<f64> {
    let Lanes { outer, len: t, inner } = lanes;
    let f = bins(t);
    let width = group_width(t, inner);
    let mut out = vec![0.0; outer * t * inner];
    let mut buf = vec![Complex::new(0.0, 0.0); t * width];
    for o in 0..outer {
        for i0 in (0..inner).step_by(width) {
            let w = width.min(inner - i0);
            let buf = &mut buf[..t * w];
            buf.iter_mut().for_each(|b| *b = Complex::new(0.0, 0.0));
            for k in 0..f {
                let base = (o * f + k) * inner + i0;
                for i in 0..w {
                    buf[i * t + k] = Complex::new(g_re[base + i], g_im[base + i]);
                }
            }
            // sum_k G_k e^{+2 pi i k s / T}
            batch_fft(t, true, buf);
            for s in 0..t {
                let row = &mut out[(o * t + s) * inner + i0..][..w];
                for (i, r) in row.iter_mut().enumerate() {
                    *r = buf[i * t + s].re;
                }
            }
        }
    }
    out
}

/// Inverse of [`rfft_lanes`] (Hermitian completion, `1/T` scaling). `lanes.len`
/// is the output length `T`; the inputs carry `T/2 + 1` bins per lane. The
/// imaginary parts of the DC bin (and the Nyquist bin for even `T`) are ignored.
pub(crate) fn irfft_lanes(re: &[f64], im: &[f64], lanes: Lanes) -> Vec<f64> {
    let Lanes { outer, len: t, inner } = lanes;
    let f = bins(t);
    let width = group_width(t, inner);
    let mut out = vec![0.0; outer * t * inner];
    let mut buf = vec![Complex::new(0.0, 0.0); t * width];
    let scale = 1.0 / t as f64;
    for o in 0..outer {
        for i0 in (0..inner).step_by(width) {
            let w = width.min(inner - i0);
            let buf = &mut buf[..t * w];
            for k in 0..f {
                let base = (o * f + k) * inner + i0;
                for i in 0..w {
                    let lane = &mut buf[i * t..][..t];
                    let z = Complex::new(re[base + i], im[base + i]);
                    if k == 0 || 2 * k == t {
                        lane[k] = Complex::new(z.re, 0.0);
                    } else {
                        lane[k] = z;
                        lane[t - k] = z.conj();
                    }
                }
            }
            batch_fft(t, true, buf);
            for s in 0..t {
                let row = &mut out[(o * t + s) * inner + i0..][..w];
                for (i, r) in row.iter_mut().enumerate() {
                    *r = buf[i * t + s].re * scale;
                }
            }
        }
    }
    flops::add((outer * inner) as u64 * flops::fft_cost(t));
    out
}

/// Adjoint of [`irfft_lanes`].
pub(crate) fn irfft_lanes_adjoint(g: &[f64], lanes: Lanes) -> (Vec<f64>, Vec<f64>) {
    let t = lanes.len;
    let f = bins(t);
    let (mut re, mut im) = rfft_raw(g, lanes);
    let Lanes { outer, inner, .. } = lanes;
    for o in 0..outer {
        for k in 0..f {
            let edge = k == 0 || 2 * k == t;
            let c = if edge { 1.0 } else { 2.0 } / t as f64;
            for i in 0..inner {
                let idx = (o * f + k) * inner + i;
                re[idx] *= c;
                im[idx] = if edge { 0.0 } else { im[idx] * c };
            }
        }
    }
    (re, im)
}

/// One-sided DFT along the last axis.
pub fn fft_real(x: &Tensor) -> ComplexTensor {
    let axis = x.rank() - 1;
    let lanes = Lanes::new(x.shape(), axis);
    let (re, im) = rfft_lanes(x.data(), lanes);
    let mut shape = x.shape().to_vec();
    shape[axis] = bins(lanes.len);
    ComplexTensor { shape, re, im }
}

/// Inverse of [`fft_real`] producing exactly `t` samples along the last axis.
pub fn ifft_real(x: &ComplexTensor, t: usize) -> Result<Tensor> {
    let axis = x.shape.len() - 1;
    if t == 0 || x.shape[axis] != bins(t) {
        return Err(Error::shape(format!(
            "{} bins cannot be inverted to {t} samples (expected {})",
            x.shape[axis],
            bins(t.max(1))
        )));
    }
    let mut shape = x.shape.clone();
    shape[axis] = t;
    let lanes = Lanes::new(&shape, axis);
    let data = irfft_lanes(&x.re, &x.im, lanes);
    Ok(Tensor::raw(shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn naive_dft(x: &[f64]) -> Vec<(f64, f64)> {
        let t = x.len();
        (0..bins(t))
            .map(|k| {
                x.iter().enumerate().fold((0.0, 0.0), |(r, i), (s, v)| {
                    let th = -2.0 * PI * (k * s) as f64 / t as f64;
                    (r + v * th.cos(), i + v * th.sin())
                })
            })
            .collect()
    }

    #[test]
    fn constant_signal_is_pure_dc() {
        let x = Tensor::from_vec(vec![1.0; 4]);
        let s = fft_real(&x);
        assert_eq!(s.shape(), &[3]);
        assert!((s.re()[0] - 4.0).abs() < 1e-12);
        for k in 1..3 {
            assert!(s.re()[k].abs() < 1e-12 && s.im()[k].abs() < 1e-12);
        }
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let x = Tensor::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
        let s = fft_real(&x);
        for k in 0..3 {
            assert!((s.re()[k] - 1.0).abs() < 1e-12 && s.im()[k].abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_lands_in_its_bin() {
        let x: Vec<f64> = (0..8).map(|t| (2.0 * PI * 2.0 * t as f64 / 8.0).cos()).collect();
        let oracle = naive_dft(&x);
        let s = fft_real(&Tensor::from_vec(x));
        let mag = s.magnitude();
        for k in 0..5 {
            let expect = if k == 2 { 4.0 } else { 0.0 };
            assert!((mag.data()[k] - expect).abs() < 1e-9, "bin {k}");
            assert!((s.re()[k] - oracle[k].0).abs() < 1e-9);
            assert!((s.im()[k] - oracle[k].1).abs() < 1e-9);
        }
    }

    #[test]
    fn dc_only_spectrum_inverts_to_constant() {
        // X = [c, 0, 0, 0, 0] for T = 8 => x_t = c / 8
        let c = 3.0;
        let spec = ComplexTensor::new(vec![5], vec![c, 0.0, 0.0, 0.0, 0.0], vec![0.0; 5]).unwrap();
        let x = ifft_real(&spec, 8).unwrap();
        for v in x.data() {
            assert!((v - c / 8.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_spectrum_inverts_to_zero() {
        let spec = ComplexTensor::new(vec![4], vec![0.0; 4], vec![0.0; 4]).unwrap();
        let x = ifft_real(&spec, 7).unwrap();
        assert!(x.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mismatched_bin_count_is_rejected() {
        let spec = ComplexTensor::new(vec![4], vec![0.0; 4], vec![0.0; 4]).unwrap();
        assert!(ifft_real(&spec, 8).is_err());
    }

    #[test]
    fn transform_along_middle_axis_matches_last_axis() {
        // [2, 5, 3] along axis 1 vs transposed to last axis.
        let data: Vec<f64> = (0..30).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let lanes = Lanes::new(&[2, 5, 3], 1);
        let (re, im) = rfft_lanes(&data, lanes);
        for b in 0..2 {
            for d in 0..3 {
                let lane: Vec<f64> = (0..5).map(|t| data[(b * 5 + t) * 3 + d]).collect();
                let oracle = naive_dft(&lane);
                for k in 0..3 {
                    let idx = (b * 3 + k) * 3 + d;
                    assert!((re[idx] - oracle[k].0).abs() < 1e-12);
                    assert!((im[idx] - oracle[k].1).abs() < 1e-12);
                }
            }
        }
    }
}
