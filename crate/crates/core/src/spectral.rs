//! Learnable Gaussian frequency bands applied along the time axis: each band
//! masks the one-sided spectrum, is weighted by a per-sample importance gate,
//! and mixes features through its own complex matrix before the inverse FFT.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::rng::Rng;
use crate::tensor::{
    fft, flops, gemm, softplus, softplus_inv, CustomOp, ParamId, ParamStore, Tape, Tensor, Var,
};

/// Canonical initial band centers in Hz.
pub const DEFAULT_CENTERS_HZ: [f64; 4] = [4.0, 10.0, 20.0, 40.0];
/// Canonical initial bandwidth in Hz.
pub const DEFAULT_SIGMA_HZ: f64 = 2.0;
/// Smallest bandwidth the reparameterization allows, in Hz.
pub const SIGMA_FLOOR_HZ: f64 = 0.1;

/// Density of `N(mu, sigma²)` at `f`.
pub fn gaussian(f: f64, mu: f64, sigma: f64) -> f64 {
    let z = (f - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * PI).sqrt())
}

/// Mask over the `t/2 + 1` one-sided bins of a length-`t` signal sampled at
/// `rate`: bin `f` sits at `f·rate/t` Hz.
pub fn band_mask(mu: f64, sigma: f64, t: usize, rate: f64) -> Result<Tensor> {
    if t < 2 || !(rate > 0.0) || !(sigma > 0.0) {
        return Err(Error::invalid(format!(
            "band mask needs t >= 2, rate > 0, sigma > 0 (t={t}, rate={rate}, sigma={sigma})"
        )));
    }
    let bins = fft::bins(t);
    let data = (0..bins)
        .map(|f| gaussian(f as f64 * rate / t as f64, mu, sigma))
        .collect();
    Tensor::new([bins], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralConfig {
    pub d_model: usize,
    /// Sampling rate of the sequence the branch sees (samples per unit).
    pub rate: f64,
    /// Initial centers, one per band, in the same unit as `rate`.
    pub centers: Vec<f64>,
    pub sigma: f64,
    pub sigma_floor: f64,
    /// Standard deviation of the noise added to the mixing matrices at init.
    pub init_noise: f64,
}

impl SpectralConfig {
    pub fn new(d_model: usize, rate: f64) -> Self {
        Self {
            d_model,
            rate,
            centers: DEFAULT_CENTERS_HZ.to_vec(),
            sigma: DEFAULT_SIGMA_HZ,
            sigma_floor: SIGMA_FLOOR_HZ,
            init_noise: 0.02,
        }
    }

    pub fn n_bands(&self) -> usize {
        self.centers.len()
    }

    /// Rescales every frequency by `factor` (used to map Hz-valued defaults
    /// onto a slower token rate).
    pub fn rescaled(mut self, factor: f64) -> Self {
        self.centers.iter_mut().for_each(|c| *c *= factor);
        self.sigma *= factor;
        self.sigma_floor *= factor;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.centers.is_empty() {
            return Err(Error::invalid("at least one band is required"));
        }
        if !(self.rate > 0.0) {
            return Err(Error::invalid(format!("rate must be positive, got {}", self.rate)));
        }
        if self.centers.iter().any(|&c| !(c > 0.0)) {
            return Err(Error::invalid("band centers must be positive"));
        }
        if !(self.sigma > self.sigma_floor) || !(self.sigma_floor > 0.0) {
            return Err(Error::invalid(format!(
                "bandwidth {} must exceed its floor {} > 0",
                self.sigma, self.sigma_floor
            )));
        }
        Ok(())
    }
}

/// Parameters of one spectral branch, stored in a shared [`ParamStore`].
#[derive(Clone, Debug)]
pub struct SpectralBranch {
    pub d_model: usize,
    pub n_bands: usize,
    pub rate: f64,
    pub sigma_floor: f64,
    /// `[K]`, `mu = softplus(mu_raw)`
    pub mu_raw: ParamId,
    /// `[K]`, `sigma = floor + softplus(sigma_raw)`
    pub sigma_raw: ParamId,
    /// `[K, D, D]`
    pub w_r: ParamId,
    /// `[K, D, D]`
    pub w_i: ParamId,
    /// `[K, D]`
    pub w_gate: ParamId,
}

/// Branch output plus the per-sample band gate `[N, K]`.
pub struct SpectralOutput {
    pub y: Var,
    pub band_gate: Var,
}

impl SpectralBranch {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &SpectralConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, k) = (cfg.d_model, cfg.n_bands());
        let mu = cfg.centers.iter().map(|&c| softplus_inv(c)).collect();
        let sigma = vec![softplus_inv(cfg.sigma - cfg.sigma_floor); k];
        let mut w_r = Tensor::randn([k, d, d], cfg.init_noise, rng);
        for b in 0..k {
            for i in 0..d {
                w_r.data_mut()[(b * d + i) * d + i] += 0.5;
            }
        }
        let w_i = Tensor::randn([k, d, d], cfg.init_noise, rng);
        let w_gate = Tensor::uniform([k, d], 1.0 / (d as f64).sqrt(), rng);
        Ok(Self {
            d_model: d,
            n_bands: k,
            rate: cfg.rate,
            sigma_floor: cfg.sigma_floor,
            mu_raw: store.add(format!("{prefix}.mu_raw"), Tensor::from_vec(mu), false),
            sigma_raw: store.add(format!("{prefix}.sigma_raw"), Tensor::from_vec(sigma), false),
            w_r: store.add(format!("{prefix}.w_r"), w_r, true),
            w_i: store.add(format!("{prefix}.w_i"), w_i, true),
            w_gate: store.add(format!("{prefix}.w_gate"), w_gate, true),
        })
    }

    /// Current `(mu, sigma)` per band, in the branch's rate unit.
    pub fn bands(&self, store: &ParamStore) -> Vec<(f64, f64)> {
        let mu = store.get(self.mu_raw).data();
        let sigma = store.get(self.sigma_raw).data();
        mu.iter()
            .zip(sigma)
            .map(|(&m, &s)| (softplus(m), self.sigma_floor + softplus(s)))
            .collect()
    }

    /// Band masks `[K, T/2+1]` on the tape.
    pub fn masks(&self, tape: &Tape, t: usize) -> Result<Var> {
        if t < 2 {
            return Err(Error::invalid(format!("spectral branch needs T >= 2, got {t}")));
        }
        let k = self.n_bands;
        let bins = fft::bins(t);
        let freqs = (0..bins).map(|f| f as f64 * self.rate / t as f64).collect();
        let freqs = tape.constant(Tensor::raw(vec![1, bins], freqs));
        let mu_raw = tape.param(self.mu_raw);
        let mu = tape.softplus(mu_raw);
        let mu = tape.reshape(mu, &[k, 1])?;
        let sigma_raw = tape.param(self.sigma_raw);
        let sigma = tape.softplus(sigma_raw);
        let sigma = tape.add_scalar(sigma, self.sigma_floor);
        let sigma = tape.reshape(sigma, &[k, 1])?;
        let diff = tape.sub(freqs, mu)?;
        let z = tape.div(diff, sigma)?;
        let z2 = tape.square(z);
        let bump = tape.exp(tape.scale(z2, -0.5));
        let norm = tape.scale(sigma, (2.0 * PI).sqrt());
        tape.div(bump, norm)
    }

    /// `Z_k = Σ_f M_k(f)|X[f]|` then `α_k = sigmoid(Σ_d W_gate[k, d] Z_k[d])`.
    /// `mag: [N, F, D]`, `masks: [K, F]` → `[N, K]`.
    pub fn band_gate(&self, tape: &Tape, mag: Var, masks: Var) -> Result<Var> {
        let z = tape.matmul(masks, mag)?;
        let weighted = tape.mul(z, tape.param(self.w_gate))?;
        let pre = tape.sum_axis(weighted, 2)?;
        let s = tape.shape(pre);
        let pre = tape.reshape(pre, &s[..2])?;
        Ok(tape.sigmoid(pre))
    }

    /// `X̃[f] = Σ_k α_k M_k(f) X[f](W_r + iW_i)` on split planes `[N, F, D]`.
    pub fn mix(&self, tape: &Tape, re: Var, im: Var, masks: Var, gate: Var) -> Result<(Var, Var)> {
        let s = tape.shape(re);
        if s.len() != 3 || tape.shape(im) != s {
            return Err(Error::shape(format!("spectral planes must be [N, F, D], got {s:?}")));
        }
        let (n, bins, d) = (s[0], s[1], s[2]);
        let k = self.n_bands;
        let g = tape.reshape(gate, &[n, k, 1])?;
        let coef = tape.mul(g, masks)?;
        let (wr, wi) = (tape.param(self.w_r), tape.param(self.w_i));
        let dims = MixDims { n, k, f: bins, d };
        let out = {
            let (rv, iv, cv) = (tape.value(re), tape.value(im), tape.value(coef));
            let (wrv, wiv) = (tape.value(wr), tape.value(wi));
            dims.forward(rv.data(), iv.data(), cv.data(), wrv.data(), wiv.data())
        };
        let out = tape.custom(
            &[re, im, coef, wr, wi],
            Tensor::raw(vec![2, n, bins, d], out),
            Box::new(dims),
        );
        let out_re = tape.narrow(out, 0, 0, 1)?;
        let out_im = tape.narrow(out, 0, 1, 1)?;
        Ok((
            tape.reshape(out_re, &[n, bins, d])?,
            tape.reshape(out_im, &[n, bins, d])?,
        ))
    }

    /// Full branch on `x: [N, T, D]` with the gate computed from `x` itself.
    pub fn forward(&self, tape: &Tape, x: Var) -> Result<SpectralOutput> {
        self.forward_with(tape, x, None)
    }

    /// Like [`SpectralBranch::forward`], but a supplied `[N, K]` gate
    /// replaces the input-dependent one.
    pub fn forward_with(&self, tape: &Tape, x: Var, gate: Option<Var>) -> Result<SpectralOutput> {
        let s = tape.shape(x);
        if s.len() != 3 || s[2] != self.d_model {
            return Err(Error::shape(format!(
                "spectral branch expects [N, T, {}], got {s:?}",
                self.d_model
            )));
        }
        let t = s[1];
        let masks = self.masks(tape, t)?;
        let (re, im) = tape.rfft(x, 1)?;
        let band_gate = match gate {
            Some(g) => g,
            None => {
                let mag = tape.complex_abs(re, im)?;
                self.band_gate(tape, mag, masks)?
            }
        };
        let (mre, mim) = self.mix(tape, re, im, masks, band_gate)?;
        let y = tape.irfft(mre, mim, 1, t)?;
        Ok(SpectralOutput { y, band_gate })
    }
}

/// Fused per-band complex mixing. Inputs `re, im: [N, F, D]`,
/// `coef: [N, K, F]`, `w_r, w_i: [K, D, D]`; output `[2, N, F, D]` holding
/// `Σ_k coef·(re W_r − im W_i)` and `Σ_k coef·(re W_i + im W_r)`. Fusing avoids
/// materializing `[N, K, F, D]` intermediates, which dominate memory traffic
/// for long sequences.
#[derive(Clone, Copy)]
struct MixDims {
    n: usize,
    k: usize,
    f: usize,
    d: usize,
}

/// Mask coefficients below this are treated as exactly zero. Far Gaussian
/// tails otherwise feed subnormal numbers into the matrix kernels, which
/// run orders of magnitude slower on them; the dropped terms sit ~150
/// orders of magnitude below double precision.
const COEF_FLUSH: f64 = 1e-150;

fn scale_rows(src: &[f64], coef: &[f64], d: usize, dst: &mut [f64]) {
    for ((row, out), &c) in src.chunks_exact(d).zip(dst.chunks_exact_mut(d)).zip(coef) {
        let c = if c.abs() < COEF_FLUSH { 0.0 } else { c };
        for (o, v) in out.iter_mut().zip(row) {
            *o = c * v;
        }
    }
}

impl MixDims {
    fn forward(&self, re: &[f64], im: &[f64], coef: &[f64], wr: &[f64], wi: &[f64]) -> Vec<f64> {
        let MixDims { n, k, f, d } = *self;
        let plane = f * d;
        let mut out = vec![0.0; 2 * n * plane];
        let (mut sre, mut sim) = (vec![0.0; plane], vec![0.0; plane]);
        for b in 0..n {
            let (xr, xi) = (&re[b * plane..][..plane], &im[b * plane..][..plane]);
            for band in 0..k {
                let c = &coef[(b * k + band) * f..][..f];
                let (wrk, wik) = (&wr[band * d * d..][..d * d], &wi[band * d * d..][..d * d]);
                scale_rows(xr, c, d, &mut sre);
                scale_rows(xi, c, d, &mut sim);
                let (out_re, out_im) = out.split_at_mut(n * plane);
                let (ore, oim) = (&mut out_re[b * plane..][..plane], &mut out_im[b * plane..][..plane]);
                gemm(f, d, d, 1.0, &sre, false, wrk, false, ore);
                gemm(f, d, d, -1.0, &sim, false, wik, false, ore);
                gemm(f, d, d, 1.0, &sre, false, wik, false, oim);
                gemm(f, d, d, 1.0, &sim, false, wrk, false, oim);
            }
        }
        flops::add((4 * n * k * f * d * d) as u64);
        out
    }
}

impl CustomOp for MixDims {
    fn name(&self) -> &str {
        "spectral_mix"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let MixDims { n, k, f, d } = *self;
        let (re, im, coef) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let (wr, wi) = (inputs[3].data(), inputs[4].data());
        let plane = f * d;
        let (g_re, g_im) = grad.split_at(n * plane);
        let mut d_re = vec![0.0; n * plane];
        let mut d_im = vec![0.0; n * plane];
        let mut d_coef = vec![0.0; n * k * f];
        let mut d_wr = vec![0.0; k * d * d];
        let mut d_wi = vec![0.0; k * d * d];
        let (mut gr, mut gi) = (vec![0.0; plane], vec![0.0; plane]);
        let (mut u, mut v) = (vec![0.0; plane], vec![0.0; plane]);
        for b in 0..n {
            let (xr, xi) = (&re[b * plane..][..plane], &im[b * plane..][..plane]);
            let (yr, yi) = (&g_re[b * plane..][..plane], &g_im[b * plane..][..plane]);
            for band in 0..k {
                let ci = (b * k + band) * f;
                let c = &coef[ci..][..f];
                let wo = band * d * d;
                let (wrk, wik) = (&wr[wo..][..d * d], &wi[wo..][..d * d]);
                scale_rows(yr, c, d, &mut gr);
                scale_rows(yi, c, d, &mut gi);
                {
                    let dr = &mut d_re[b * plane..][..plane];
                    gemm(f, d, d, 1.0, &gr, false, wrk, true, dr);
                    gemm(f, d, d, 1.0, &gi, false, wik, true, dr);
                    let di = &mut d_im[b * plane..][..plane];
                    gemm(f, d, d, -1.0, &gr, false, wik, true, di);
                    gemm(f, d, d, 1.0, &gi, false, wrk, true, di);
                }
                gemm(d, f, d, 1.0, xr, true, &gr, false, &mut d_wr[wo..][..d * d]);
                gemm(d, f, d, 1.0, xi, true, &gi, false, &mut d_wr[wo..][..d * d]);
                gemm(d, f, d, -1.0, xi, true, &gr, false, &mut d_wi[wo..][..d * d]);
                gemm(d, f, d, 1.0, xr, true, &gi, false, &mut d_wi[wo..][..d * d]);
                u.fill(0.0);
                v.fill(0.0);
                gemm(f, d, d, 1.0, xr, false, wrk, false, &mut u);
                gemm(f, d, d, -1.0, xi, false, wik, false, &mut u);
                gemm(f, d, d, 1.0, xr, false, wik, false, &mut v);
                gemm(f, d, d, 1.0, xi, false, wrk, false, &mut v);
                for fi in 0..f {
                    let row = fi * d..(fi + 1) * d;
                    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
                    d_coef[ci + fi] = dot(&yr[row.clone()], &u[row.clone()]) + dot(&yi[row.clone()], &v[row]);
                }
            }
        }
        vec![Some(d_re), Some(d_im), Some(d_coef), Some(d_wr), Some(d_wi)]
    }
}
