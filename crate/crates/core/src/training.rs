//! Optimizer, learning-rate schedule, loss, augmentation, synthetic data and
//! the train/evaluate loops.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{NakulModel, TrainNoise};
use crate::tensor::rng::{Rng, Streams};
use crate::tensor::{fft, Gradients, ParamStore, Tape, Tensor, Var};

pub const ADAM_EPS: f64 = 1e-8;
/// Initial learning rate is `lr / ONECYCLE_DIV`.
pub const ONECYCLE_DIV: f64 = 25.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub final_lr: f64,
    pub label_smoothing: f64,
    pub patience: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub val_fraction: f64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epochs: 200,
            batch_size: 16,
            warmup_fraction: 0.3,
            final_lr: 1e-6,
            label_smoothing: 0.1,
            patience: 25,
            seed: 0,
            grad_clip: 1.0,
            val_fraction: 0.2,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::config("warmup_fraction", "must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("label_smoothing", "must lie in [0, 1)"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config("val_fraction", "must lie in (0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        for (k, v) in [
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("final_lr", self.final_lr),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(k, "must be a non-negative number"));
            }
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(k, "must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

// ---- optimizer -------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Some gradient entry was NaN or infinite; nothing changed.
    Skipped,
}

/// AdamW state: first and second moments per parameter.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub steps: u64,
    pub skipped: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            steps: 0,
            skipped: 0,
        }
    }

    /// One update with gradients `grads` (indexed like the store; `None`
    /// means zero). Gradients are first clipped to global norm `grad_clip`
    /// (disabled at 0). Weight decay is decoupled and applies only to
    /// parameters flagged for decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], cfg: &TrainConfig, lr: f64) -> StepOutcome {
        let finite = grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()));
        if !finite {
            self.skipped += 1;
            return StepOutcome::Skipped;
        }
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            cfg.grad_clip / norm
        } else {
            1.0
        };
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let decay = if store.decays(id) { cfg.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads.get(i).and_then(|g| g.as_deref());
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.map_or(0.0, |g| g[j] * clip);
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * decay * p[j];
                p[j] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        StepOutcome::Applied
    }
}

/// Gradients in store order, as consumed by [`AdamW::step`].
pub fn collect_grads(store: &ParamStore, grads: &Gradients) -> Vec<Option<Vec<f64>>> {
    store.ids().map(|id| grads.param(id).map(<[f64]>::to_vec)).collect()
}

/// Linear warm-up from `lr/25` to `lr` over the first `warmup_fraction` of
/// the steps, then cosine decay to `final_lr` at the last step.
pub fn onecycle_lr(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    let warm = (cfg.warmup_fraction * total as f64).round() as usize;
    let start = cfg.lr / ONECYCLE_DIV;
    if step < warm {
        return start + (cfg.lr - start) * step as f64 / warm as f64;
    }
    let span = total.saturating_sub(1).saturating_sub(warm);
    if span == 0 {
        return cfg.lr;
    }
    let progress = ((step - warm) as f64 / span as f64).min(1.0);
    cfg.final_lr + (cfg.lr - cfg.final_lr) * 0.5 * (1.0 + (PI * progress).cos())
}

/// Mean over the batch of `−Σ_c q_c log softmax(logits)_c` with
/// `q = (1 − eps)·onehot + eps/n`.
pub fn smoothed_cross_entropy(tape: &Tape, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
    let s = tape.shape(logits);
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape(format!("logits {s:?} do not match {} labels", labels.len())));
    }
    let n = s[1];
    let mut q = vec![eps / n as f64; labels.len() * n];
    for (i, &l) in labels.iter().enumerate() {
        if l >= n {
            return Err(Error::invalid(format!("label {l} out of range for {n} classes")));
        }
        q[i * n + l] += 1.0 - eps;
    }
    let lp = tape.log_softmax(logits);
    let weighted = tape.mul(lp, tape.constant(Tensor::new(s, q)?))?;
    Ok(tape.scale(tape.sum_all(weighted)?, -1.0 / labels.len() as f64))
}

// ---- augmentation ----------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Augment {
    pub max_shift: usize,
    pub scale_range: (f64, f64),
    pub noise_sigma: f64,
}

impl Augment {
    /// ±50 ms circular jitter (half-sample ties round to even, so 12 samples
    /// at 250 Hz), 0.9–1.1 amplitude scaling, σ = 0.05 noise.
    pub fn for_rate(rate: f64) -> Self {
        Self {
            max_shift: (0.05 * rate).round_ties_even() as usize,
            scale_range: (0.9, 1.1),
            noise_sigma: 0.05,
        }
    }

    /// Applies to one trial `[C, T]`.
    pub fn apply(&self, x: &Tensor, rng: &mut Rng) -> Tensor {
        let (c, t) = (x.shape()[0], x.shape()[1]);
        let m = self.max_shift as i64;
        let shift = rng.gen_range(-m..=m).rem_euclid(t as i64) as usize;
        let (lo, hi) = self.scale_range;
        let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let mut out = vec![0.0; c * t];
        for ch in 0..c {
            for s in 0..t {
                let src = (s + t - shift) % t;
                out[ch * t + s] = scale * x.data()[ch * t + src];
            }
        }
        if self.noise_sigma > 0.0 {
            for v in &mut out {
                *v += self.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Tensor::new([c, t], out).expect("finite augmentation")
    }
}

// ---- data ------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Each `[C, T]`.
    pub trials: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub rate: f64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.trials.first().map_or(0, |t| t.shape()[0])
    }

    pub fn length(&self) -> usize {
        self.trials.first().map_or(0, |t| t.shape()[1])
    }

    pub fn classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Stacks trials into `[B, C, T]`.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.channels() * self.length());
        for &i in idx {
            data.extend_from_slice(self.trials[i].data());
        }
        Tensor::new([idx.len(), self.channels(), self.length()], data).expect("finite trials")
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            trials: idx.iter().map(|&i| self.trials[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            rate: self.rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub channels: usize,
    pub length: usize,
    pub rate: f64,
    /// Planted frequencies (Hz) per class.
    pub band_centers: Vec<Vec<f64>>,
    /// Channels carrying the class signal, per class.
    pub active_channels: Vec<Vec<usize>>,
    pub noise_sigma: f64,
    pub trials_per_class: usize,
}

/// Frequencies planted by default for class `k`.
pub const DEFAULT_CLASS_BANDS_HZ: [f64; 4] = [6.0, 11.0, 20.0, 32.0];

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::with_shape(4, 8, 1000, 250.0)
    }
}

impl SyntheticSpec {
    /// Default planted layout for the given shape: class `k` carries
    /// `DEFAULT_CLASS_BANDS_HZ[k]` (spaced further for more classes) on
    /// channels `2k .. 2k + C/2` (wrapping).
    pub fn with_shape(classes: usize, channels: usize, length: usize, rate: f64) -> Self {
        let band_centers = (0..classes)
            .map(|k| {
                vec![DEFAULT_CLASS_BANDS_HZ
                    .get(k)
                    .copied()
                    .unwrap_or(6.0 + 7.0 * k as f64)]
            })
            .collect();
        let half = (channels / 2).max(1);
        let active_channels = (0..classes)
            .map(|k| (0..half).map(|j| (2 * k + j) % channels).collect())
            .collect();
        Self {
            classes,
            channels,
            length,
            rate,
            band_centers,
            active_channels,
            noise_sigma: 0.2,
            trials_per_class: 200,
        }
    }

    /// Errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("classes", "need at least two classes"));
        }
        if self.channels == 0 || self.length < 2 || self.trials_per_class == 0 {
            return Err(Error::config("channels", "channels, length and trials_per_class must be positive"));
        }
        if !(self.rate > 0.0) || !self.rate.is_finite() {
            return Err(Error::config("rate", "must be positive"));
        }
        if self.band_centers.len() != self.classes {
            return Err(Error::config("band_centers", format!("need one entry per class ({})", self.classes)));
        }
        let nyquist = self.rate / 2.0;
        for bands in &self.band_centers {
            if bands.is_empty() || bands.iter().any(|&f| !(f > 0.0 && f < nyquist)) {
                return Err(Error::config(
                    "band_centers",
                    format!("every class needs frequencies inside (0, {nyquist}) Hz"),
                ));
            }
        }
        if self.active_channels.len() != self.classes {
            return Err(Error::config("active_channels", format!("need one set per class ({})", self.classes)));
        }
        for set in &self.active_channels {
            if set.is_empty() || set.iter().any(|&c| c >= self.channels) {
                return Err(Error::config("active_channels", "sets must be non-empty and name existing channels"));
            }
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::config("noise_sigma", "must be non-negative"));
        }
        Ok(())
    }
}

/// Class-balanced synthetic trials; trial `i` has label `i % classes`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = Streams::new(seed).stream("data");
    let (c, t) = (spec.channels, spec.length);
    let n = spec.classes * spec.trials_per_class;
    let mut trials = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % spec.classes;
        let mut x = vec![0.0; c * t];
        for &ch in &spec.active_channels[label] {
            for &f in &spec.band_centers[label] {
                let phase: f64 = rng.gen_range(0.0..2.0 * PI);
                let w = 2.0 * PI * f / spec.rate;
                for s in 0..t {
                    x[ch * t + s] += (w * s as f64 + phase).sin();
                }
            }
        }
        if spec.noise_sigma > 0.0 {
            for v in &mut x {
                *v += spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        trials.push(Tensor::new([c, t], x)?);
        labels.push(label);
    }
    Ok(Dataset {
        trials,
        labels,
        rate: spec.rate,
    })
}

/// Stratified split: per class, a seeded shuffle puts `round(fraction·n_c)`
/// trials into validation. Returns sorted `(train, val)` indices.
pub fn stratified_split(labels: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = Streams::new(seed).stream("split");
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for k in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        idx.shuffle(&mut rng);
        let nv = (fraction * idx.len() as f64).round() as usize;
        val.extend_from_slice(&idx[..nv]);
        train.extend_from_slice(&idx[nv..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

// ---- band-power probe ------------------------------------------------------

/// Linear baseline that knows where the classes were planted: per channel
/// log band power around each planted frequency, standardized, fed to a
/// multinomial logistic regression.
#[derive(Clone, Debug)]
pub struct BandPowerProbe {
    pub freqs: Vec<f64>,
    /// Half-width of each power window in Hz.
    pub half_width: f64,
    mean: Vec<f64>,
    std: Vec<f64>,
    /// `[features + 1, classes]`, last row is the bias.
    weights: Vec<f64>,
    classes: usize,
}

impl BandPowerProbe {
    pub fn features(freqs: &[f64], half_width: f64, x: &Tensor, rate: f64) -> Vec<f64> {
        let (c, t) = (x.shape()[0], x.shape()[1]);
        let spec = fft::fft_real(x);
        let bins = fft::bins(t);
        let mut out = Vec::with_capacity(c * freqs.len());
        for ch in 0..c {
            for &f in freqs {
                let mut power = 0.0;
                let mut count = 0;
                for b in 0..bins {
                    let hz = b as f64 * rate / t as f64;
                    if (hz - f).abs() <= half_width {
                        let (re, im) = (spec.re()[ch * bins + b], spec.im()[ch * bins + b]);
                        power += re * re + im * im;
                        count += 1;
                    }
                }
                out.push((power / count.max(1) as f64 / t as f64).ln_1p());
            }
        }
        out
    }

    /// Full-batch gradient descent on the softmax cross-entropy with a small
    /// L2 penalty; deterministic.
    pub fn fit(train: &Dataset, freqs: &[f64], half_width: f64) -> Self {
        let feats: Vec<Vec<f64>> = train
            .trials
            .iter()
            .map(|x| Self::features(freqs, half_width, x, train.rate))
            .collect();
        let nf = feats[0].len();
        let n = feats.len() as f64;
        let mean: Vec<f64> = (0..nf).map(|j| feats.iter().map(|f| f[j]).sum::<f64>() / n).collect();
        let std: Vec<f64> = (0..nf)
            .map(|j| {
                let v = feats.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n;
                v.sqrt().max(1e-12)
            })
            .collect();
        let classes = train.classes();
        let mut probe = Self {
            freqs: freqs.to_vec(),
            half_width,
            mean,
            std,
            weights: vec![0.0; (nf + 1) * classes],
            classes,
        };
        let z: Vec<Vec<f64>> = feats.iter().map(|f| probe.standardize(f)).collect();
        let (lr, l2) = (0.5, 1e-4);
        for _ in 0..500 {
            let mut grad = vec![0.0; probe.weights.len()];
            for (zi, &label) in z.iter().zip(&train.labels) {
                let p = probe.probs(zi);
                for k in 0..classes {
                    let err = p[k] - if k == label { 1.0 } else { 0.0 };
                    for j in 0..nf {
                        grad[j * classes + k] += err * zi[j];
                    }
                    grad[nf * classes + k] += err;
                }
            }
            for (w, g) in probe.weights.iter_mut().zip(&grad) {
                *w -= lr * (g / n + l2 * *w);
            }
        }
        probe
    }

    fn standardize(&self, f: &[f64]) -> Vec<f64> {
        f.iter().enumerate().map(|(j, v)| (v - self.mean[j]) / self.std[j]).collect()
    }

    fn probs(&self, z: &[f64]) -> Vec<f64> {
        let nf = z.len();
        let logits: Vec<f64> = (0..self.classes)
            .map(|k| self.weights[nf * self.classes + k] + (0..nf).map(|j| z[j] * self.weights[j * self.classes + k]).sum::<f64>())
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    pub fn predict(&self, x: &Tensor, rate: f64) -> usize {
        let z = self.standardize(&Self::features(&self.freqs, self.half_width, x, rate));
        argmax(&self.probs(&z))
    }

    pub fn accuracy(&self, data: &Dataset) -> f64 {
        let hits = data
            .trials
            .iter()
            .zip(&data.labels)
            .filter(|(x, &l)| self.predict(x, data.rate) == l)
            .count();
        hits as f64 / data.len() as f64
    }
}

pub fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best })
}

// ---- evaluation ------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Confusion {
    /// `counts[true][predicted]`
    pub counts: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn new(classes: usize, truth: &[usize], predicted: &[usize]) -> Self {
        let mut counts = vec![vec![0; classes]; classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            counts[t][p] += 1;
        }
        Self { counts }
    }

    pub fn accuracy(&self) -> f64 {
        let total: usize = self.counts.iter().flatten().sum();
        let hits: usize = (0..self.counts.len()).map(|k| self.counts[k][k]).sum();
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    }

    /// F1 per class; a class that is never true nor predicted scores 0.
    pub fn f1(&self) -> Vec<f64> {
        let n = self.counts.len();
        (0..n)
            .map(|k| {
                let tp = self.counts[k][k] as f64;
                let fp = (0..n).map(|t| self.counts[t][k]).sum::<usize>() as f64 - tp;
                let fn_ = self.counts[k].iter().sum::<usize>() as f64 - tp;
                if tp == 0.0 {
                    0.0
                } else {
                    2.0 * tp / (2.0 * tp + fp + fn_)
                }
            })
            .collect()
    }

    /// Mean F1 over the classes that occur in the truth or the predictions.
    pub fn macro_f1(&self) -> f64 {
        let f = self.f1();
        let n = self.counts.len();
        let present: Vec<usize> = (0..n)
            .filter(|&k| self.counts[k].iter().sum::<usize>() > 0 || (0..n).any(|t| self.counts[t][k] > 0))
            .collect();
        if present.is_empty() {
            return 0.0;
        }
        present.iter().map(|&k| f[k]).sum::<f64>() / present.len() as f64
    }
}

/// Evaluation-mode predictions and mean (unsmoothed) cross-entropy.
pub fn evaluate(model: &NakulModel, store: &ParamStore, data: &Dataset, batch: usize) -> Result<(Vec<usize>, f64)> {
    let mut preds = Vec::with_capacity(data.len());
    let mut loss = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let tape = Tape::with_params(store);
        let out = model.forward(&tape, tape.constant(data.batch(chunk)), None)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let l = smoothed_cross_entropy(&tape, out.logits, &labels, 0.0)?;
        loss += tape.value(l).data()[0] * chunk.len() as f64;
        let logits = tape.value(out.logits);
        let n = logits.shape()[1];
        preds.extend(logits.data().chunks(n).map(argmax));
    }
    Ok((preds, loss / data.len().max(1) as f64))
}

// ---- training loop ---------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,val_loss,val_acc,lr";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.val_acc, r.lr));
    }
    s
}

pub fn write_metrics(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(metrics_csv(rows).as_bytes()).map_err(|e| Error::io(path, e))
}

pub struct TrainResult {
    /// Parameters at the best validation epoch (the initialization when no
    /// epoch ran).
    pub best: ParamStore,
    pub best_epoch: Option<usize>,
    pub metrics: Vec<EpochMetrics>,
    pub stopped_early: bool,
    pub skipped_steps: u64,
}

/// Trains `store` in place on `train`, selecting on `val`. `on_epoch` sees
/// each completed epoch's metrics.
pub fn train(
    model: &NakulModel,
    store: &mut ParamStore,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainResult> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    let streams = Streams::new(cfg.seed);
    let mut shuffle_rng = streams.stream("shuffle");
    let mut aug_rng = streams.stream("augment");
    let mut noise_rng = streams.stream("dropout");
    let augment = Augment::for_rate(train.rate);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut opt = AdamW::new(store);
    let mut best = store.clone();
    let mut best_key: Option<(f64, f64)> = None;
    let mut best_epoch = None;
    let mut best_acc = f64::NEG_INFINITY;
    let mut stale = 0;
    let mut metrics = Vec::new();
    let mut stopped_early = false;
    let mut step = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut lr = cfg.lr;
        for chunk in order.chunks(cfg.batch_size) {
            let x = if cfg.augment {
                let mut data = Vec::with_capacity(chunk.len() * train.channels() * train.length());
                for &i in chunk {
                    data.extend_from_slice(augment.apply(&train.trials[i], &mut aug_rng).data());
                }
                Tensor::new([chunk.len(), train.channels(), train.length()], data)?
            } else {
                train.batch(chunk)
            };
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let grads = {
                let tape = Tape::with_params(store);
                let noise = TrainNoise {
                    rng: &mut noise_rng,
                    dropout: model.cfg.dropout,
                    drop_edge: model.cfg.drop_edge,
                };
                let out = model.forward(&tape, tape.constant(x), Some(noise))?;
                let loss = smoothed_cross_entropy(&tape, out.logits, &labels, cfg.label_smoothing)?;
                let lv = tape.value(loss).data()[0];
                if !lv.is_finite() {
                    return Err(Error::TrainingAborted(format!(
                        "non-finite loss {lv} at epoch {epoch}, step {step}"
                    )));
                }
                loss_sum += lv * chunk.len() as f64;
                collect_grads(store, &tape.backward(loss)?)
            };
            lr = onecycle_lr(step, total, cfg);
            opt.step(store, &grads, cfg, lr);
            step += 1;
        }
        let (preds, val_loss) = evaluate(model, store, val, cfg.batch_size.max(32))?;
        let hits = preds.iter().zip(&val.labels).filter(|(p, l)| p == l).count();
        let val_acc = hits as f64 / val.len() as f64;
        let row = EpochMetrics {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            val_acc,
            lr,
        };
        on_epoch(&row);
        metrics.push(row);
        let better = match best_key {
            None => true,
            Some((acc, loss)) => val_acc > acc || (val_acc == acc && val_loss < loss),
        };
        if better {
            best_key = Some((val_acc, val_loss));
            best = store.clone();
            best_epoch = Some(epoch);
        }
        if val_acc > best_acc {
            best_acc = val_acc;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainResult {
        best,
        best_epoch,
        metrics,
        stopped_early,
        skipped_steps: opt.skipped,
    })
}
