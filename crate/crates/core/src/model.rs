//! The full classifier: patch embedding onto a `[B, C, T_p, D]` grid, a
//! stack of blocks that fuse the spectral, dynamic and graph branches, and a
//! pooled MLP head.
//!
//! Time-axis branches (spectral, dynamic) run per channel on `[B·C, T_p, D]`;
//! the graph branch runs per patch on `[B·T_p, C, D]`.

use rand::Rng as _;

use crate::dynamic::{DynamicBranch, DynamicConfig, DEFAULT_KERNEL_SIZES, META_HIDDEN};
use crate::error::{Error, Result};
use crate::graph::{build_graph, ElectrodeGraph, GraphBranch, GraphConfig, DEFAULT_RADIUS_M, DEFAULT_TOP_K};
use crate::spectral::{SpectralBranch, SpectralConfig, DEFAULT_CENTERS_HZ, DEFAULT_SIGMA_HZ, SIGMA_FLOOR_HZ};
use crate::tensor::rng::Rng;
use crate::tensor::{fft, flops, ParamId, ParamStore, Tape, Tensor, Var};

/// Residual scale on the fused mixing output.
pub const MIX_SCALE: f64 = 0.5;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    /// Samples per trial.
    pub length: usize,
    /// Sampling rate in Hz.
    pub rate: f64,
    pub classes: usize,
    pub patch: usize,
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Initial band centers in Hz of the raw signal; mapped onto the patch
    /// rate by the factor `1/patch`.
    pub band_centers: Vec<f64>,
    pub band_sigma: f64,
    pub kernel_sizes: Vec<usize>,
    pub top_k: usize,
    /// State size of the SSM used by the selective-scan machinery.
    pub state_dim: usize,
    pub ffn_hidden: usize,
    pub head_hidden: usize,
    /// Electrode neighbourhood radius in meters.
    pub radius: f64,
    pub dropout: f64,
    pub drop_path: f64,
    pub drop_edge: f64,
    /// Replaces the learned fusion softmax in every block when set.
    pub fusion_weights: Option<[f64; 3]>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            length: 1000,
            rate: 250.0,
            classes: 4,
            patch: 50,
            d_model: 128,
            blocks: 6,
            heads: 8,
            band_centers: DEFAULT_CENTERS_HZ.to_vec(),
            band_sigma: DEFAULT_SIGMA_HZ,
            kernel_sizes: DEFAULT_KERNEL_SIZES.to_vec(),
            top_k: DEFAULT_TOP_K,
            state_dim: 4,
            ffn_hidden: 512,
            head_hidden: 64,
            radius: DEFAULT_RADIUS_M,
            dropout: 0.1,
            drop_path: 0.1,
            drop_edge: 0.2,
            fusion_weights: None,
        }
    }
}

impl ModelConfig {
    /// Tokens per channel, `ceil(length / patch)`.
    pub fn patches(&self) -> usize {
        self.length.div_ceil(self.patch)
    }

    pub fn patch_rate(&self) -> f64 {
        self.rate / self.patch as f64
    }

    pub fn spectral(&self) -> SpectralConfig {
        let mut s = SpectralConfig::new(self.d_model, self.patch_rate());
        s.centers = self.band_centers.clone();
        s.sigma = self.band_sigma;
        s.sigma_floor = SIGMA_FLOOR_HZ;
        s.rescaled(1.0 / self.patch as f64)
    }

    pub fn dynamic(&self) -> DynamicConfig {
        let mut d = DynamicConfig::new(self.d_model);
        d.kernel_sizes = self.kernel_sizes.clone();
        d
    }

    pub fn graph(&self) -> GraphConfig {
        let mut g = GraphConfig::new(self.d_model, self.channels, self.heads);
        g.top_k = self.top_k;
        g
    }

    /// Checks every structural constraint; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("length", self.length),
            ("classes", self.classes),
            ("patch", self.patch),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("top_k", self.top_k),
            ("state_dim", self.state_dim),
            ("ffn_hidden", self.ffn_hidden),
            ("head_hidden", self.head_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.classes < 2 {
            return Err(Error::config("classes", "need at least two classes"));
        }
        if self.length < self.patch {
            return Err(Error::config("length", format!("{} is shorter than one patch ({})", self.length, self.patch)));
        }
        if self.patches() < 2 {
            return Err(Error::config("length", "need at least two patches per channel"));
        }
        if !(self.rate > 0.0) || !self.rate.is_finite() {
            return Err(Error::config("rate", "must be positive"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config("heads", format!("{} does not divide d_model {}", self.heads, self.d_model)));
        }
        if self.band_centers.is_empty() || self.band_centers.iter().any(|&c| !(c > 0.0 && c < self.rate / 2.0)) {
            return Err(Error::config("band_centers", format!("must be non-empty and inside (0, {}) Hz", self.rate / 2.0)));
        }
        if !(self.band_sigma > SIGMA_FLOOR_HZ) || !self.band_sigma.is_finite() {
            return Err(Error::config("band_sigma", format!("must exceed the floor {SIGMA_FLOOR_HZ} Hz")));
        }
        if self.kernel_sizes.is_empty() || self.kernel_sizes.contains(&0) {
            return Err(Error::config("kernel_sizes", "must list positive sizes"));
        }
        if !(self.radius >= 0.0) || !self.radius.is_finite() {
            return Err(Error::config("radius", "must be non-negative"));
        }
        for (name, p) in [("dropout", self.dropout), ("drop_path", self.drop_path), ("drop_edge", self.drop_edge)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(name, "must lie in [0, 1)"));
            }
        }
        if let Some(w) = self.fusion_weights {
            if w.iter().any(|v| !(*v >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(Error::config("fusion_weights", "must be a probability vector"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full([d], 1.0), false),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros([d]), false),
        }
    }

    pub fn forward(&self, tape: &Tape, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, LN_EPS);
        let scaled = tape.mul(n, tape.param(self.gamma))?;
        tape.add(scaled, tape.param(self.beta))
    }
}

/// Dense layer `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            w: store.add(format!("{prefix}.w"), Tensor::uniform([fan_in, fan_out], bound, rng), true),
            b: store.add(format!("{prefix}.b"), Tensor::uniform([fan_out], bound, rng), false),
        }
    }

    pub fn forward(&self, tape: &Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, tape.param(self.w))?;
        tape.add(y, tape.param(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct NakulBlock {
    pub spectral: SpectralBranch,
    pub dynamic: DynamicBranch,
    pub graph: GraphBranch,
    /// `[3]` logits over (spectral, dynamic, graph).
    pub fusion_logits: ParamId,
    /// `[D, D]`
    pub w_proj: ParamId,
    pub ln_mix: LayerNorm,
    pub ln_fuse: LayerNorm,
    pub ln_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    /// Probability of skipping this block's residual branches in training.
    pub drop_path: f64,
}

/// Intermediate values of one block, for inspection and dumps.
pub struct BlockTrace {
    /// `[B·C, K]`
    pub band_gate: Var,
    /// `[B·C, M]`
    pub kernel_weights: Var,
    /// `[B·C]` temporal variance and spectral entropy seen by the meta-network.
    pub variance: Var,
    pub entropy: Var,
    /// `[3]`
    pub fusion_weights: Var,
    /// `[B·T_p, H, C, C]` biased attention scores.
    pub scores: Var,
    pub y_spec: Var,
    pub y_dyn: Var,
    pub y_graph: Var,
}

/// Randomness used only in training mode.
pub struct TrainNoise<'a> {
    pub rng: &'a mut Rng,
    pub dropout: f64,
    pub drop_edge: f64,
}

fn dropout(tape: &Tape, x: Var, p: f64, noise: &mut Option<TrainNoise>) -> Result<Var> {
    let Some(n) = noise.as_mut() else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let shape = tape.shape(x);
    let keep = 1.0 / (1.0 - p);
    let count: usize = shape.iter().product();
    let mask = (0..count).map(|_| if n.rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
    tape.mul(x, tape.constant(Tensor::new(shape, mask)?))
}

/// Per-sample stochastic depth on a residual branch `[B, ...]`.
fn drop_path(tape: &Tape, x: Var, p: f64, noise: &mut Option<TrainNoise>) -> Result<Var> {
    let Some(n) = noise.as_mut() else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let mut shape = tape.shape(x);
    let b = shape[0];
    shape.iter_mut().skip(1).for_each(|s| *s = 1);
    let keep = 1.0 / (1.0 - p);
    let mask = (0..b).map(|_| if n.rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
    tape.mul(x, tape.constant(Tensor::new(shape, mask)?))
}

impl NakulBlock {
    fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, drop_path: f64, rng: &mut Rng) -> Result<Self> {
        let d = cfg.d_model;
        let spectral = SpectralBranch::new(store, &format!("{prefix}.spectral"), &cfg.spectral(), rng)?;
        let dynamic = DynamicBranch::new(store, &format!("{prefix}.dynamic"), &cfg.dynamic(), rng)?;
        let graph = GraphBranch::new(store, &format!("{prefix}.graph"), &cfg.graph(), rng)?;
        let fusion_logits = store.add(format!("{prefix}.fusion_logits"), Tensor::zeros([3]), false);
        let bound = 1.0 / (d as f64).sqrt();
        let w_proj = store.add(format!("{prefix}.w_proj"), Tensor::uniform([d, d], bound, rng), true);
        Ok(Self {
            spectral,
            dynamic,
            graph,
            fusion_logits,
            w_proj,
            ln_mix: LayerNorm::new(store, &format!("{prefix}.ln_mix"), d),
            ln_fuse: LayerNorm::new(store, &format!("{prefix}.ln_fuse"), d),
            ln_ffn: LayerNorm::new(store, &format!("{prefix}.ln_ffn"), d),
            ffn_in: Linear::new(store, &format!("{prefix}.ffn_in"), d, cfg.ffn_hidden, rng),
            ffn_out: Linear::new(store, &format!("{prefix}.ffn_out"), cfg.ffn_hidden, d, rng),
            drop_path,
        })
    }

    /// `x: [B, C, T_p, D]` → same shape.
    pub fn forward(
        &self,
        tape: &Tape,
        x: Var,
        g: &ElectrodeGraph,
        forced: Option<[f64; 3]>,
        noise: &mut Option<TrainNoise>,
    ) -> Result<(Var, BlockTrace)> {
        let s = tape.shape(x);
        let (b, c, tp, d) = (s[0], s[1], s[2], s[3]);
        let xn = self.ln_mix.forward(tape, x)?;

        let rows = tape.reshape(xn, &[b * c, tp, d])?;
        let spec = self.spectral.forward(tape, rows)?;
        let dynm = self.dynamic.forward(tape, rows)?;
        let y_spec = tape.reshape(spec.y, &s)?;
        let y_dyn = tape.reshape(dynm.y, &s)?;

        let across = tape.permute(xn, &[0, 2, 1, 3])?;
        let across = tape.reshape(across, &[b * tp, c, d])?;
        let gout = self.graph.forward(tape, g, across)?;
        let y_graph = tape.reshape(gout.y, &[b, tp, c, d])?;
        let y_graph = tape.permute(y_graph, &[0, 2, 1, 3])?;

        let fusion = match forced {
            Some(w) => tape.constant(Tensor::from_vec(w.to_vec())),
            None => tape.softmax(tape.param(self.fusion_logits)),
        };
        let mut fused: Option<Var> = None;
        for (i, y) in [y_spec, y_dyn, y_graph].into_iter().enumerate() {
            let term = tape.mul(y, tape.narrow(fusion, 0, i, 1)?)?;
            fused = Some(match fused {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        let proj = tape.matmul(fused.expect("three branches"), tape.param(self.w_proj))?;
        let mixed = tape.scale(self.ln_fuse.forward(tape, proj)?, MIX_SCALE);
        let mixed = drop_path(tape, mixed, self.drop_path, noise)?;
        let z = tape.add(x, mixed)?;

        let h = self.ffn_in.forward(tape, self.ln_ffn.forward(tape, z)?)?;
        let h = tape.gelu(h);
        let p = noise.as_ref().map_or(0.0, |n| n.dropout);
        let h = dropout(tape, h, p, noise)?;
        let f = self.ffn_out.forward(tape, h)?;
        let f = drop_path(tape, f, self.drop_path, noise)?;
        let out = tape.add(z, f)?;
        Ok((
            out,
            BlockTrace {
                band_gate: spec.band_gate,
                kernel_weights: dynm.alpha,
                variance: dynm.variance,
                entropy: dynm.entropy,
                fusion_weights: fusion,
                scores: gout.scores,
                y_spec,
                y_dyn,
                y_graph,
            },
        ))
    }
}

#[derive(Clone, Debug)]
pub struct NakulModel {
    pub cfg: ModelConfig,
    pub graph: ElectrodeGraph,
    /// `[P, D]` shared across channels.
    pub embed: Linear,
    /// `[C, T_p, D]`
    pub pos: ParamId,
    pub blocks: Vec<NakulBlock>,
    pub head_hidden: Linear,
    pub head_out: Linear,
}

pub struct ModelOutput {
    /// `[B, classes]`
    pub logits: Var,
    /// `[B, C, T_p, D]`
    pub embedded: Var,
    /// `[B, C, T_p, D]` after the last block.
    pub features: Var,
    pub blocks: Vec<BlockTrace>,
}

impl NakulModel {
    /// Builds the model with electrode `positions` (meters), one per channel.
    pub fn new(cfg: &ModelConfig, positions: &[[f64; 3]], store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        if positions.len() != cfg.channels {
            return Err(Error::config(
                "positions",
                format!("{} positions for {} channels", positions.len(), cfg.channels),
            ));
        }
        let graph = build_graph(positions, cfg.radius)?;
        let d = cfg.d_model;
        let embed = Linear::new(store, "embed", cfg.patch, d, rng);
        let pos = store.add("embed.pos", Tensor::randn([cfg.channels, cfg.patches(), d], 0.02, rng), false);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let rate = if cfg.blocks > 1 {
                cfg.drop_path * i as f64 / (cfg.blocks - 1) as f64
            } else {
                0.0
            };
            blocks.push(NakulBlock::new(store, &format!("block{i}"), cfg, rate, rng)?);
        }
        Ok(Self {
            cfg: cfg.clone(),
            graph,
            embed,
            pos,
            head_hidden: Linear::new(store, "head.hidden", d, cfg.head_hidden, rng),
            head_out: Linear::new(store, "head.out", cfg.head_hidden, cfg.classes, rng),
            blocks,
        })
    }

    /// `x: [B, C, T]` → `[B, C, T_p, D]`, zero-padding the last patch.
    pub fn embed(&self, tape: &Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 3 || s[1] != self.cfg.channels || s[2] != self.cfg.length {
            return Err(Error::shape(format!(
                "model expects [B, {}, {}], got {s:?}",
                self.cfg.channels, self.cfg.length
            )));
        }
        let (b, c, t) = (s[0], s[1], s[2]);
        let (p, tp) = (self.cfg.patch, self.cfg.patches());
        let padded = if tp * p > t {
            let pad = tape.constant(Tensor::zeros([b, c, tp * p - t]));
            tape.concat(&[x, pad], 2)?
        } else {
            x
        };
        let windows = tape.reshape(padded, &[b, c, tp, p])?;
        let tokens = self.embed.forward(tape, windows)?;
        tape.add(tokens, tape.param(self.pos))
    }

    /// Blocks applied to an embedding `[B, C, T_p, D]`.
    pub fn blocks_forward(
        &self,
        tape: &Tape,
        mut h: Var,
        noise: &mut Option<TrainNoise>,
    ) -> Result<(Var, Vec<BlockTrace>)> {
        let dropped;
        let graph = match noise.as_mut() {
            Some(n) if n.drop_edge > 0.0 => {
                dropped = self.graph.drop_edges(n.drop_edge, n.rng);
                &dropped
            }
            _ => &self.graph,
        };
        let mut traces = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, trace) = block.forward(tape, h, graph, self.cfg.fusion_weights, noise)?;
            h = out;
            traces.push(trace);
        }
        Ok((h, traces))
    }

    /// Full forward pass. `noise` enables dropout, stochastic depth and
    /// DropEdge; `None` is deterministic evaluation.
    pub fn forward(&self, tape: &Tape, x: Var, mut noise: Option<TrainNoise>) -> Result<ModelOutput> {
        let embedded = self.embed(tape, x)?;
        let (features, blocks) = self.blocks_forward(tape, embedded, &mut noise)?;
        let s = tape.shape(features);
        let flat = tape.reshape(features, &[s[0], s[1] * s[2], s[3]])?;
        let pooled = tape.reshape(tape.mean_axis(flat, 1)?, &[s[0], s[3]])?;
        let h = tape.gelu(self.head_hidden.forward(tape, pooled)?);
        let p = noise.as_ref().map_or(0.0, |n| n.dropout);
        let h = dropout(tape, h, p, &mut noise)?;
        let logits = self.head_out.forward(tape, h)?;
        Ok(ModelOutput {
            logits,
            embedded,
            features,
            blocks,
        })
    }

    /// Evaluation-mode logits `[B, classes]` for a batch of trials.
    pub fn predict(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::with_params(store);
        let xv = tape.constant(x.clone());
        let out = self.forward(&tape, xv, None)?;
        Ok((*tape.value(out.logits)).clone())
    }

    /// Parameter-name prefixes of everything inside the residual branches
    /// (branches, projection, fusion norm and FFN).
    pub fn residual_prefixes(&self) -> Vec<String> {
        (0..self.blocks.len())
            .flat_map(|i| {
                ["spectral", "dynamic", "graph", "w_proj", "ln_fuse", "ffn_in", "ffn_out"]
                    .map(|p| format!("block{i}.{p}"))
            })
            .collect()
    }
}

/// Analytic multiply-add counts of one forward pass, per component.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlopReport {
    pub embed: u64,
    pub fft: u64,
    pub spectral_mixing: u64,
    pub ssm_branches: u64,
    pub meta_net: u64,
    pub graph_conv: u64,
    pub attention: u64,
    pub projection_ffn: u64,
    pub head: u64,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.embed
            + self.fft
            + self.spectral_mixing
            + self.ssm_branches
            + self.meta_net
            + self.graph_conv
            + self.attention
            + self.projection_ffn
            + self.head
    }
}

/// Multiply-adds for a forward pass on `batch` trials with `patches` tokens
/// per channel (defaults to the configured length when `None`).
pub fn count_flops(cfg: &ModelConfig, batch: usize, patches: Option<usize>) -> FlopReport {
    let tp = patches.unwrap_or_else(|| cfg.patches()) as u64;
    let (b, c, d) = (batch as u64, cfg.channels as u64, cfg.d_model as u64);
    let (p, k_bands, m) = (cfg.patch as u64, cfg.band_centers.len() as u64, cfg.kernel_sizes.len() as u64);
    let h = cfg.heads as u64;
    let bins = fft::bins(tp as usize) as u64;
    let rows = b * c; // sequences along time
    let tokens = b * c * tp;
    let groups = b * tp; // channel sets along the graph axis
    let k_eff = cfg.top_k.min(cfg.channels) as u64;
    let taps: u64 = cfg.kernel_sizes.iter().map(|&k| k as u64).sum();
    let n_blocks = cfg.blocks as u64;

    // forward and inverse transform of the spectral branch, forward one of
    // the dynamic branch statistics
    let fft = 3 * rows * d * flops::fft_cost(tp as usize);
    let spectral_mixing = rows * k_bands * bins * d + 4 * rows * k_bands * bins * d * d;
    let ssm_branches = tokens * d * taps + tokens * d * d;
    let meta_net = rows * (2 * META_HIDDEN as u64 + META_HIDDEN as u64 * m);
    let graph_conv = groups * c * c * d + groups * c * d * d + groups * h * c * d * c;
    let attention = 3 * groups * c * d * d + groups * c * c * d + groups * c * k_eff * d + groups * c * d * d;
    let projection_ffn = tokens * d * d + 2 * tokens * d * cfg.ffn_hidden as u64;
    FlopReport {
        embed: tokens * p * d,
        fft: n_blocks * fft,
        spectral_mixing: n_blocks * spectral_mixing,
        ssm_branches: n_blocks * ssm_branches,
        meta_net: n_blocks * meta_net,
        graph_conv: n_blocks * graph_conv,
        attention: n_blocks * attention,
        projection_ffn: n_blocks * projection_ffn,
        head: b * d * cfg.head_hidden as u64 + b * cfg.head_hidden as u64 * cfg.classes as u64,
    }
}
