//! Dynamic multi-kernel branch: whole-sample statistics drive a small
//! meta-network that weights a bank of causal depthwise kernels, and the
//! mixture is gated elementwise by `sigmoid(x W_gate)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::ssm::{materialize_kernel, DiscreteSsm};
use crate::tensor::rng::Rng;
use crate::tensor::{fft, ParamId, ParamStore, Tape, Tensor, Var};

pub const DEFAULT_KERNEL_SIZES: [usize; 4] = [3, 5, 7, 11];
/// Hidden width of the meta-network.
pub const META_HIDDEN: usize = 16;
/// Pole of the scalar SSM whose impulse response seeds the kernels.
pub const INIT_POLE: f64 = 0.7;

/// Mean squared deviation of every entry of `x` from the global mean.
pub fn temporal_variance(x: &Tensor) -> f64 {
    let n = x.numel() as f64;
    let mean = x.data().iter().sum::<f64>() / n;
    x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Per-bin magnitudes of `x: [T, D]` pooled over features by Euclidean norm.
pub fn pooled_spectrum(x: &Tensor) -> Result<Vec<f64>> {
    if x.rank() != 2 {
        return Err(Error::shape(format!("expected [T, D], got {:?}", x.shape())));
    }
    let (t, d) = (x.shape()[0], x.shape()[1]);
    let bins = fft::bins(t);
    // transpose to [D, T] so the transform runs along the last axis
    let mut lanes = vec![0.0; t * d];
    for s in 0..t {
        for c in 0..d {
            lanes[c * t + s] = x.data()[s * d + c];
        }
    }
    let spec = fft::fft_real(&Tensor::new([d, t], lanes)?);
    Ok((0..bins)
        .map(|f| {
            (0..d)
                .map(|c| spec.re()[c * bins + f].powi(2) + spec.im()[c * bins + f].powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Shannon entropy (nats) of the normalized pooled magnitude spectrum.
/// An all-zero input has no distribution and maps to 0.
pub fn spectral_entropy(x: &Tensor) -> Result<f64> {
    let mag = pooled_spectrum(x)?;
    let total: f64 = mag.iter().sum();
    if total <= 0.0 {
        return Ok(0.0);
    }
    Ok(-mag
        .iter()
        .filter(|&&m| m > 0.0)
        .map(|&m| (m / total) * (m / total).ln())
        .sum::<f64>())
}

/// Meta-network inputs: `[log(1 + variance), entropy / ln F]`.
pub fn normalized_stats(variance: f64, entropy: f64, bins: usize) -> [f64; 2] {
    let scale = if bins > 1 { (bins as f64).ln() } else { 1.0 };
    [variance.ln_1p(), entropy / scale]
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicConfig {
    pub d_model: usize,
    pub kernel_sizes: Vec<usize>,
    /// Standard deviation of the noise added to the SSM-derived kernels.
    pub init_noise: f64,
}

impl DynamicConfig {
    pub fn new(d_model: usize) -> Self {
        Self {
            d_model,
            kernel_sizes: DEFAULT_KERNEL_SIZES.to_vec(),
            init_noise: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 {
            return Err(Error::invalid("d_model must be positive"));
        }
        if self.kernel_sizes.is_empty() || self.kernel_sizes.contains(&0) {
            return Err(Error::invalid(format!(
                "kernel sizes must be a non-empty list of positive sizes, got {:?}",
                self.kernel_sizes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DynamicBranch {
    pub d_model: usize,
    pub kernel_sizes: Vec<usize>,
    /// One `[K_m, D]` kernel per size; the last tap multiplies the current sample.
    pub kernels: Vec<ParamId>,
    /// `[D, D]`
    pub w_gate: ParamId,
    /// `[16, 2]`
    pub w1: ParamId,
    /// `[M, 16]`
    pub w2: ParamId,
}

pub struct DynamicOutput {
    pub y: Var,
    /// `[N, M]` mixture weights.
    pub alpha: Var,
    /// `[N]` raw temporal variance.
    pub variance: Var,
    /// `[N]` raw spectral entropy (nats).
    pub entropy: Var,
}

impl DynamicBranch {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &DynamicConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let m = cfg.kernel_sizes.len();
        let pole = DiscreteSsm {
            a_bar: DMatrix::from_element(1, 1, INIT_POLE),
            b_bar: DVector::from_element(1, 1.0),
            c: DVector::from_element(1, 1.0),
            d_skip: 0.0,
            delta: 1.0,
        };
        let mut kernels = Vec::with_capacity(m);
        for &k in &cfg.kernel_sizes {
            let response = materialize_kernel(&pole, k)?;
            let mut w = Tensor::randn([k, d], cfg.init_noise, rng);
            for j in 0..k {
                let tap = response.data()[k - 1 - j];
                w.data_mut()[j * d..(j + 1) * d].iter_mut().for_each(|v| *v += tap);
            }
            kernels.push(store.add(format!("{prefix}.kernel{k}"), w, true));
        }
        let w_gate = Tensor::uniform([d, d], 1.0 / (d as f64).sqrt(), rng);
        let w1 = Tensor::uniform([META_HIDDEN, 2], 1.0 / 2f64.sqrt(), rng);
        let w2 = Tensor::uniform([m, META_HIDDEN], 1.0 / (META_HIDDEN as f64).sqrt(), rng);
        Ok(Self {
            d_model: d,
            kernel_sizes: cfg.kernel_sizes.clone(),
            kernels,
            w_gate: store.add(format!("{prefix}.w_gate"), w_gate, true),
            w1: store.add(format!("{prefix}.meta.w1"), w1, true),
            w2: store.add(format!("{prefix}.meta.w2"), w2, true),
        })
    }

    pub fn n_kernels(&self) -> usize {
        self.kernel_sizes.len()
    }

    /// Raw per-sample `(variance, entropy)` of `x: [N, T, D]`, each `[N]`.
    pub fn statistics(&self, tape: &Tape, x: Var) -> Result<(Var, Var)> {
        let s = tape.shape(x);
        let (n, t, d) = (s[0], s[1], s[2]);
        let flat = tape.reshape(x, &[n, t * d])?;
        let mean = tape.mean_axis(flat, 1)?;
        let dev = tape.square(tape.sub(flat, mean)?);
        let variance = tape.reshape(tape.mean_axis(dev, 1)?, &[n])?;

        let (re, im) = tape.rfft(x, 1)?;
        let power = tape.add(tape.square(re), tape.square(im))?;
        let pooled = tape.sqrt(tape.sum_axis(power, 2)?);
        let pooled = tape.reshape(pooled, &[n, fft::bins(t)])?;
        let entropy = tape.reshape(tape.entropy(pooled)?, &[n])?;
        Ok((variance, entropy))
    }

    /// `α = softmax(W2 GELU(W1 s))` per sample from raw statistics `[N]` of
    /// sequences with `bins` spectrum bins. Returns `[N, M]`.
    pub fn predict_weights(&self, tape: &Tape, variance: Var, entropy: Var, bins: usize) -> Result<Var> {
        let n = tape.shape(variance)[0];
        let scale = if bins > 1 { 1.0 / (bins as f64).ln() } else { 1.0 };
        let v = tape.log(tape.add_scalar(variance, 1.0));
        let e = tape.scale(entropy, scale);
        let v = tape.reshape(v, &[n, 1])?;
        let e = tape.reshape(e, &[n, 1])?;
        let s = tape.concat(&[v, e], 1)?;
        let w1t = tape.transpose(tape.param(self.w1))?;
        let h = tape.gelu(tape.matmul(s, w1t)?);
        let w2t = tape.transpose(tape.param(self.w2))?;
        let logits = tape.matmul(h, w2t)?;
        Ok(tape.softmax(logits))
    }

    /// Plain-value version of [`DynamicBranch::predict_weights`] for one sample.
    pub fn weights_for(&self, store: &ParamStore, variance: f64, entropy: f64, bins: usize) -> Result<Vec<f64>> {
        let tape = Tape::with_params(store);
        let v = tape.constant(Tensor::from_vec(vec![variance]));
        let e = tape.constant(Tensor::from_vec(vec![entropy]));
        let alpha = self.predict_weights(&tape, v, e, bins)?;
        Ok(tape.value(alpha).data().to_vec())
    }

    pub fn forward(&self, tape: &Tape, x: Var) -> Result<DynamicOutput> {
        self.forward_with(tape, x, None)
    }

    /// Like [`DynamicBranch::forward`], but a supplied `[N, M]` weight matrix
    /// replaces the meta-network prediction.
    pub fn forward_with(&self, tape: &Tape, x: Var, alpha: Option<Var>) -> Result<DynamicOutput> {
        let s = tape.shape(x);
        if s.len() != 3 || s[2] != self.d_model {
            return Err(Error::shape(format!(
                "dynamic branch expects [N, T, {}], got {s:?}",
                self.d_model
            )));
        }
        let (n, t, m) = (s[0], s[1], self.n_kernels());
        let (variance, entropy) = self.statistics(tape, x)?;
        let alpha = match alpha {
            Some(a) => {
                if tape.shape(a) != [n, m] {
                    return Err(Error::shape(format!("forced weights must be [{n}, {m}]")));
                }
                a
            }
            None => self.predict_weights(tape, variance, entropy, fft::bins(t))?,
        };
        let mut agg: Option<Var> = None;
        for (i, &k) in self.kernels.iter().enumerate() {
            let y = tape.depthwise_conv(x, tape.param(k))?;
            let a = tape.reshape(tape.narrow(alpha, 1, i, 1)?, &[n, 1, 1])?;
            let term = tape.mul(y, a)?;
            agg = Some(match agg {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        let gate = tape.sigmoid(tape.matmul(x, tape.param(self.w_gate))?);
        let y = tape.mul(agg.expect("at least one kernel"), gate)?;
        Ok(DynamicOutput {
            y,
            alpha,
            variance,
            entropy,
        })
    }
}
