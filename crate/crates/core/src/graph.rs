//! Attention across channels, biased by a graph built from electrode
//! positions: a graph convolution of the features yields per-head C×C
//! biases that are added to the scores before a sparse top-k softmax.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::tensor::rng::Rng;
use crate::tensor::{flops, softplus, softplus_inv, CustomOp, ParamId, ParamStore, Tape, Tensor, Var};

/// Default neighbourhood radius in meters.
pub const DEFAULT_RADIUS_M: f64 = 0.05;
/// Radius of the synthetic circular montage in meters.
pub const CIRCLE_RADIUS_M: f64 = 0.09;
pub const DEFAULT_TOP_K: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct ElectrodeGraph {
    pub positions: Vec<[f64; 3]>,
    /// `[C, C]`, 0/1 with self-loops.
    pub adjacency: Tensor,
    /// `[C, C]`, `D^-1/2 A D^-1/2`.
    pub norm_adjacency: Tensor,
}

/// Links channels closer than `radius` (inclusive) and adds self-loops.
pub fn build_graph(positions: &[[f64; 3]], radius: f64) -> Result<ElectrodeGraph> {
    if positions.is_empty() {
        return Err(Error::invalid("graph needs at least one channel"));
    }
    if positions.iter().flatten().any(|v| !v.is_finite()) || !radius.is_finite() {
        return Err(Error::NonFinite("electrode positions and radius must be finite".into()));
    }
    let c = positions.len();
    let mut adj = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            let dist = (0..3)
                .map(|a| (positions[i][a] - positions[j][a]).powi(2))
                .sum::<f64>()
                .sqrt();
            if i == j || dist <= radius {
                adj[i * c + j] = 1.0;
            }
        }
    }
    Ok(from_adjacency(positions.to_vec(), adj))
}

fn from_adjacency(positions: Vec<[f64; 3]>, adj: Vec<f64>) -> ElectrodeGraph {
    let c = positions.len();
    let inv_sqrt: Vec<f64> = adj
        .chunks_exact(c)
        .map(|row| 1.0 / row.iter().sum::<f64>().sqrt())
        .collect();
    let norm = (0..c * c)
        .map(|idx| adj[idx] * inv_sqrt[idx / c] * inv_sqrt[idx % c])
        .collect();
    ElectrodeGraph {
        positions,
        adjacency: Tensor::raw(vec![c, c], adj),
        norm_adjacency: Tensor::raw(vec![c, c], norm),
    }
}

impl ElectrodeGraph {
    pub fn n_channels(&self) -> usize {
        self.positions.len()
    }

    /// Copy with each off-diagonal edge removed independently (symmetrically)
    /// with probability `p`, renormalized. Self-loops are kept.
    pub fn drop_edges(&self, p: f64, rng: &mut Rng) -> ElectrodeGraph {
        let c = self.n_channels();
        let mut adj = self.adjacency.data().to_vec();
        for i in 0..c {
            for j in i + 1..c {
                if adj[i * c + j] != 0.0 && rng.gen::<f64>() < p {
                    adj[i * c + j] = 0.0;
                    adj[j * c + i] = 0.0;
                }
            }
        }
        from_adjacency(self.positions.clone(), adj)
    }
}

/// `c` points evenly spaced on a horizontal circle of `radius` meters.
pub fn circle_positions(c: usize, radius: f64) -> Vec<[f64; 3]> {
    (0..c)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / c as f64;
            [radius * a.cos(), radius * a.sin(), 0.0]
        })
        .collect()
}

/// Parses `name x y z` lines (meters); `#` lines and blank lines are skipped.
pub fn parse_positions(text: &str) -> Result<Vec<(String, [f64; 3])>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::format(
                "positions file",
                format!("line {}: expected `name x y z`, got {} fields", no + 1, fields.len()),
            ));
        }
        let mut p = [0.0; 3];
        for (a, f) in fields[1..].iter().enumerate() {
            p[a] = f
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::format("positions file", format!("line {}: bad coordinate `{f}`", no + 1)))?;
        }
        out.push((fields[0].to_string(), p));
    }
    if out.is_empty() {
        return Err(Error::format("positions file", "no channels listed"));
    }
    Ok(out)
}

pub fn load_positions(path: &Path) -> Result<Vec<[f64; 3]>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_positions(&text)?.into_iter().map(|(_, p)| p).collect())
}

/// Dense attention rows from scores `[..., C]`: the top `k` entries of each
/// row (ties to the lowest index) are softmaxed, the rest are zero.
pub fn topk_softmax(scores: &Tensor, k: usize) -> Tensor {
    let c = *scores.shape().last().unwrap();
    let mut out = vec![0.0; scores.numel()];
    let mut idx = Vec::new();
    for (row, dst) in scores.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        select_top(row, k.min(c), &mut idx);
        let probs = softmax_at(row, &idx);
        for (&j, p) in idx.iter().zip(probs) {
            dst[j] = p;
        }
    }
    Tensor::raw(scores.shape().to_vec(), out)
}

/// Indices of the `k` largest entries, lowest index first among equals.
fn select_top(row: &[f64], k: usize, idx: &mut Vec<usize>) {
    idx.clear();
    idx.extend(0..row.len());
    let order = |&a: &usize, &b: &usize| row[b].total_cmp(&row[a]).then(a.cmp(&b));
    if k < row.len() {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
}

fn softmax_at(row: &[f64], idx: &[usize]) -> Vec<f64> {
    let max = idx.iter().map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = idx.iter().map(|&j| (row[j] - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphConfig {
    pub d_model: usize,
    pub n_channels: usize,
    pub heads: usize,
    pub top_k: usize,
}

impl GraphConfig {
    pub fn new(d_model: usize, n_channels: usize, heads: usize) -> Self {
        Self {
            d_model,
            n_channels,
            heads,
            top_k: DEFAULT_TOP_K,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        if self.n_channels == 0 || self.top_k == 0 {
            return Err(Error::invalid("channel count and top_k must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GraphBranch {
    pub d_model: usize,
    pub n_channels: usize,
    pub heads: usize,
    pub top_k: usize,
    /// `[D, D]` each; head `h` uses columns `h·d_k..(h+1)·d_k`.
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    /// `[D, D]`
    pub w_graph: ParamId,
    /// `[H, D, C]`
    pub w_bias: ParamId,
    /// `[1]`, `beta = softplus(beta_raw)`
    pub beta_raw: ParamId,
    /// `[D, D]`
    pub w_o: ParamId,
}

pub struct GraphOutput {
    pub y: Var,
    /// `[N, H, C, C]` biased scores before masking.
    pub scores: Var,
}

impl GraphBranch {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &GraphConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, c, h) = (cfg.d_model, cfg.n_channels, cfg.heads);
        let bound = 1.0 / (d as f64).sqrt();
        let mut mat = |name: &str, shape: Vec<usize>| {
            store.add(format!("{prefix}.{name}"), Tensor::uniform(shape, bound, rng), true)
        };
        let w_q = mat("w_q", vec![d, d]);
        let w_k = mat("w_k", vec![d, d]);
        let w_v = mat("w_v", vec![d, d]);
        let w_graph = mat("w_graph", vec![d, d]);
        let w_bias = mat("w_bias", vec![h, d, c]);
        let w_o = mat("w_o", vec![d, d]);
        let beta_raw = store.add(format!("{prefix}.beta_raw"), Tensor::from_vec(vec![softplus_inv(1.0)]), false);
        Ok(Self {
            d_model: d,
            n_channels: c,
            heads: h,
            top_k: cfg.top_k,
            w_q,
            w_k,
            w_v,
            w_graph,
            w_bias,
            beta_raw,
            w_o,
        })
    }

    pub fn beta(&self, store: &ParamStore) -> f64 {
        softplus(store.get(self.beta_raw).data()[0])
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    fn check_input(&self, tape: &Tape, x: Var, g: &ElectrodeGraph) -> Result<(usize, usize, usize)> {
        let s = tape.shape(x);
        if s.len() != 3 || s[1] != self.n_channels || s[2] != self.d_model {
            return Err(Error::shape(format!(
                "graph branch expects [N, {}, {}], got {s:?}",
                self.n_channels, self.d_model
            )));
        }
        if g.n_channels() != self.n_channels {
            return Err(Error::shape(format!(
                "graph has {} channels, branch was built for {}",
                g.n_channels(),
                self.n_channels
            )));
        }
        Ok((s[0], s[1], s[2]))
    }

    /// `GELU(Â X W)` on `x: [N, C, D]`.
    pub fn graph_conv(&self, tape: &Tape, g: &ElectrodeGraph, x: Var) -> Result<Var> {
        let a = tape.constant(g.norm_adjacency.clone());
        let ax = tape.matmul(a, x)?;
        Ok(tape.gelu(tape.matmul(ax, tape.param(self.w_graph))?))
    }

    /// Per-head biases `H̃ W_bias^(h)`: `[N, C, D]` → `[N, H, C, C]`.
    pub fn spatial_biases(&self, tape: &Tape, h_feat: Var) -> Result<Var> {
        let s = tape.shape(h_feat);
        let h4 = tape.reshape(h_feat, &[s[0], 1, s[1], s[2]])?;
        tape.matmul(h4, tape.param(self.w_bias))
    }

    /// Splits `[N, C, D]` into heads `[N, H, C, d_k]`.
    fn split_heads(&self, tape: &Tape, v: Var, n: usize, c: usize) -> Result<Var> {
        let r = tape.reshape(v, &[n, c, self.heads, self.head_dim()])?;
        tape.permute(r, &[0, 2, 1, 3])
    }

    /// Biased scores `QKᵀ/√d_k + β·B` as `[N, H, C, C]`, plus `V` as `[N, H, C, d_k]`.
    pub fn scores(&self, tape: &Tape, g: &ElectrodeGraph, x: Var) -> Result<(Var, Var)> {
        let (n, c, _) = self.check_input(tape, x, g)?;
        let q = self.split_heads(tape, tape.matmul(x, tape.param(self.w_q))?, n, c)?;
        let k = self.split_heads(tape, tape.matmul(x, tape.param(self.w_k))?, n, c)?;
        let v = self.split_heads(tape, tape.matmul(x, tape.param(self.w_v))?, n, c)?;
        let kt = tape.permute(k, &[0, 1, 3, 2])?;
        let qk = tape.scale(tape.matmul(q, kt)?, 1.0 / (self.head_dim() as f64).sqrt());
        let h_feat = self.graph_conv(tape, g, x)?;
        let bias = self.spatial_biases(tape, h_feat)?;
        let beta = tape.softplus(tape.param(self.beta_raw));
        let scores = tape.add(qk, tape.mul(bias, beta)?)?;
        Ok((scores, v))
    }

    /// Full branch on `x: [N, C, D]`.
    pub fn forward(&self, tape: &Tape, g: &ElectrodeGraph, x: Var) -> Result<GraphOutput> {
        let (n, c, d) = self.check_input(tape, x, g)?;
        let (scores, v) = self.scores(tape, g, x)?;
        let heads = topk_attention(tape, scores, v, self.top_k)?;
        let merged = tape.reshape(tape.permute(heads, &[0, 2, 1, 3])?, &[n, c, d])?;
        let y = tape.matmul(merged, tape.param(self.w_o))?;
        Ok(GraphOutput { y, scores })
    }
}

/// Sparse attention: each score row keeps its top `k` entries, softmaxes
/// them and averages the matching rows of `v`. `scores: [..., C, C]`,
/// `v: [..., C, d]` → `[..., C, d]`. Work per row is `O(C + k·d)`.
pub fn topk_attention(tape: &Tape, scores: Var, v: Var, k: usize) -> Result<Var> {
    let (s, vv) = (tape.value(scores), tape.value(v));
    let ss = s.shape();
    let vs = vv.shape();
    let r = ss.len();
    if r < 2 || ss[r - 1] != ss[r - 2] || vs.len() != r || vs[..r - 1] != ss[..r - 1] {
        return Err(Error::shape(format!(
            "top-k attention needs scores [..., C, C] and values [..., C, d], got {ss:?} and {vs:?}"
        )));
    }
    if k == 0 {
        return Err(Error::invalid("top-k needs k >= 1"));
    }
    let c = ss[r - 1];
    let d = vs[r - 1];
    let k = k.min(c);
    let rows = s.numel() / c;
    let mut index = Vec::with_capacity(rows * k);
    let mut probs = Vec::with_capacity(rows * k);
    let mut out = vec![0.0; rows * d];
    let mut idx = Vec::with_capacity(c);
    for (ri, row) in s.data().chunks_exact(c).enumerate() {
        select_top(row, k, &mut idx);
        let p = softmax_at(row, &idx);
        let vbase = (ri / c) * c * d;
        let dst = &mut out[ri * d..(ri + 1) * d];
        for (&j, &pj) in idx.iter().zip(&p) {
            let src = &vv.data()[vbase + j * d..vbase + (j + 1) * d];
            for (o, x) in dst.iter_mut().zip(src) {
                *o += pj * x;
            }
        }
        index.extend_from_slice(&idx);
        probs.extend(p);
    }
    flops::add((rows * k * d) as u64);
    let op = TopkAttention { c, d, k, index, probs };
    let shape = vs.to_vec();
    Ok(tape.custom(&[scores, v], Tensor::raw(shape, out), Box::new(op)))
}

struct TopkAttention {
    c: usize,
    d: usize,
    k: usize,
    /// Selected columns per row, `rows × k`.
    index: Vec<usize>,
    probs: Vec<f64>,
}

impl CustomOp for TopkAttention {
    fn name(&self) -> &str {
        "topk_attention"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (c, d, k) = (self.c, self.d, self.k);
        let v = inputs[1].data();
        let mut gs = vec![0.0; inputs[0].numel()];
        let mut gv = vec![0.0; v.len()];
        let mut dp = vec![0.0; k];
        for (ri, g) in grad.chunks_exact(d).enumerate() {
            let vbase = (ri / c) * c * d;
            let idx = &self.index[ri * k..(ri + 1) * k];
            let p = &self.probs[ri * k..(ri + 1) * k];
            for (slot, (&j, &pj)) in idx.iter().zip(p).enumerate() {
                let src = &v[vbase + j * d..vbase + (j + 1) * d];
                dp[slot] = g.iter().zip(src).map(|(a, b)| a * b).sum();
                for (o, gi) in gv[vbase + j * d..vbase + (j + 1) * d].iter_mut().zip(g) {
                    *o += pj * gi;
                }
            }
            let mean: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for (slot, &j) in idx.iter().enumerate() {
                gs[ri * c + j] = p[slot] * (dp[slot] - mean);
            }
        }
        vec![Some(gs), Some(gv)]
    }
}
