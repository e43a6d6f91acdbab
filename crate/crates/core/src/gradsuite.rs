//! Finite-difference gradient suite over every differentiable component.
//!
//! Each group builds a small probe on top of one component, samples
//! parameter entries (inputs included where the component takes one) and
//! compares tape gradients to central differences.

use crate::dynamic::DynamicBranch;
use crate::error::Result;
use crate::graph::{circle_positions, GraphBranch, CIRCLE_RADIUS_M};
use crate::model::{ModelConfig, NakulModel};
use crate::spectral::SpectralBranch;
use crate::ssm::{SelectiveParams, SelectiveSsm, SsmParams};
use crate::tensor::gradcheck::{self, Report};
use crate::tensor::rng::{Rng, Streams};
use crate::tensor::{CustomOp, ParamId, ParamStore, Tape, Tensor, Var};
use crate::training::smoothed_cross_entropy;

pub const TOLERANCE: f64 = 1e-3;

pub const GROUPS: [&str; 8] = [
    "tensor_engine",
    "ssm_core",
    "spectral_branch",
    "dynamic_branch",
    "graph_branch",
    "fusion_block",
    "nakul_model",
    "training_loss",
];

#[derive(Clone, Debug)]
pub struct GroupReport {
    pub name: &'static str,
    pub report: Report,
}

impl GroupReport {
    pub fn passed(&self) -> bool {
        self.report.passed(TOLERANCE)
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub samples: usize,
    pub seed: u64,
    /// Routes the engine probe through an op whose backward is off by 1%.
    /// Negative control for the suite itself.
    pub inject_fault: bool,
}

/// Identity forward, backward scaled by 1.01.
struct Skewed;

impl CustomOp for Skewed {
    fn name(&self) -> &str {
        "skewed_identity"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.iter().map(|g| g * 1.01).collect())]
    }
}

fn weighted_sum(tape: &Tape, y: Var, w: &Tensor) -> Result<Var> {
    tape.sum_all(tape.mul(y, tape.constant(w.clone()))?)
}

fn sample(store: &ParamStore, ids: &[ParamId], n: usize, rng: &mut Rng) -> Vec<(ParamId, usize)> {
    gradcheck::sample_entries(store, ids, n, rng)
}

fn engine(opts: &SuiteOptions, rng: &mut Rng) -> Result<Report> {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::randn([6, 5], 1.0, rng), true);
    let b = store.add("b", Tensor::randn([5, 4], 0.5, rng), true);
    let k = store.add("kernel", Tensor::randn([3, 4], 0.5, rng), true);
    let s = store.add("shift", Tensor::randn([4], 0.5, rng), true);
    let w = Tensor::randn([6, 3], 1.0, rng);
    let ids: Vec<_> = store.ids().collect();
    let entries = sample(&store, &ids, opts.samples, rng);
    let fault = opts.inject_fault;
    gradcheck::check(&store, &entries, |tape| {
        let mut h = tape.matmul(tape.param(a), tape.param(b))?;
        if fault {
            let v = (*tape.value(h)).clone();
            h = tape.custom(&[h], v, Box::new(Skewed));
        }
        let h = tape.gelu(tape.layer_norm(h, 1e-5));
        let h = tape.depthwise_conv(h, tape.param(k))?;
        let h = tape.add(h, tape.param(s))?;
        let (re, im) = tape.rfft(h, 0)?;
        let mag = tape.complex_abs(re, im)?;
        let spec = tape.irfft(tape.mul(re, tape.sigmoid(mag))?, im, 0, 6)?;
        let p = tape.softmax(tape.narrow(spec, 1, 0, 3)?);
        let ent = tape.entropy(tape.transpose(p)?)?;
        let l = tape.add(weighted_sum(tape, tape.log(p), &w)?, tape.sum_all(ent)?)?;
        tape.add(l, tape.mean_all(tape.tanh(tape.square(spec)))?)
    })
}

fn ssm(cfg: &ModelConfig, opts: &SuiteOptions, rng: &mut Rng) -> Result<Report> {
    let (l, d, n) = (cfg.patches(), cfg.d_model.min(16), cfg.state_dim);
    let mut store = ParamStore::new();
    let block = SelectiveSsm::new(
        &mut store,
        "ssm",
        SelectiveParams::random(d, n, 0.3, rng),
        SsmParams::diagonal_init(n),
    );
    let x = store.add("input", Tensor::randn([l, d], 1.0, rng), false);
    let w = Tensor::randn([l], 1.0, rng);
    let ids: Vec<_> = store.ids().collect();
    let entries = sample(&store, &ids, opts.samples, rng);
    gradcheck::check(&store, &entries, |tape| {
        let y = block.forward(tape, tape.param(x))?;
        weighted_sum(tape, y, &w)
    })
}

fn branch_input(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut Rng) -> (ParamId, Tensor) {
    let shape = [2, cfg.patches(), cfg.d_model];
    let x = store.add("input", Tensor::randn(shape, 1.0, rng), false);
    (x, Tensor::randn(shape, 1.0, rng))
}

fn spectral(cfg: &ModelConfig, opts: &SuiteOptions, rng: &mut Rng) -> Result<Report> {
    let mut store = ParamStore::new();
    let branch = SpectralBranch::new(&mut store, "spectral", &cfg.spectral(), rng)?;
    let (x, w) = branch_input(cfg, &mut store, rng);
    let ids: Vec<_> = store.ids().collect();
    let entries = sample(&store, &ids, opts.samples, rng);
    gradcheck::check(&store, &entries, |tape| {
        let y = branch.forward(tape, tape.param(x))?.y;
        weighted_sum(tape, y, &w)
    })
}

fn dynamic(cfg: &ModelConfig, opts: &SuiteOptions, rng: &mut Rng) -> Result<Report> {
    let mut store = ParamStore::new();
    let branch = DynamicBranch::new(&mut store, "dynamic", &cfg.dynamic(), rng)?;
    let (x, w) = branch_input(cfg, &mut store, rng);
    let ids: Vec<_> = store.ids().collect();
    let entries = sample(&store, &ids, opts.samples, rng);
    gradcheck::check(&store, &entries, |tape| {
        let y = branch.forward(tape, tape.param(x))?.y;
        weighted_sum(tape, y, &w)
    })
}

fn graph(cfg: &ModelConfig, opts: &SuiteOptions, rng: &mut Rng) -> Result<Report> {
    let mut store = ParamStore::new();
    let branch = GraphBranch::new(&mut store, "graph", &cfg.graph(), rng)?;
    let g = crate::graph::build_graph(&circle_positions(cfg.channels, CIRCLE_RADIUS_M), cfg.radius)?;
    let shape = [2, cfg.channels, cfg.d_model];
    let x = store.add("input", Tensor::randn(shape, 1.0, rng), false);
    let w = Tensor::randn(shape, 1.0, rng);
    let ids: Vec<_> = store.ids().collect();
    let entries = sample(&store, &ids, opts.samples, rng);
    gradcheck::check(&store, &entries, |tape| {
        let y = branch.forward(tape, &g, tape.param(x))?.y;
        weighted_sum(tape, y, &w)
    })
}

fn model_probe(cfg: &ModelConfig, opts: &SuiteOptions, rng: &mut Rng, block_level: bool) -> Result<Report> {
    let mut store = ParamStore::new();
    let model = NakulModel::new(cfg, &circle_positions(cfg.channels, CIRCLE_RADIUS_M), &mut store, rng)?;
    let x = Tensor::randn([2, cfg.channels, cfg.length], 1.0, rng);
    let labels = [0, 1 % cfg.classes];
    let ids: Vec<_> = store
        .ids()
        .filter(|&id| {
            let name = store.name(id);
            let in_branch = [".spectral.", ".dynamic.", ".graph."].iter().any(|p| name.contains(p));
            !block_level || (name.starts_with("block") && !in_branch)
        })
        .collect();
    let entries = sample(&store, &ids, opts.samples, rng);
    gradcheck::check(&store, &entries, |tape| {
        let out = model.forward(tape, tape.constant(x.clone()), None)?;
        smoothed_cross_entropy(tape, out.logits, &labels, 0.1)
    })
}

fn loss(cfg: &ModelConfig, opts: &SuiteOptions, rng: &mut Rng) -> Result<Report> {
    let b = 8;
    let mut store = ParamStore::new();
    let logits = store.add("logits", Tensor::randn([b, cfg.classes], 2.0, rng), false);
    let labels: Vec<usize> = (0..b).map(|i| i % cfg.classes).collect();
    let entries = sample(&store, &[logits], opts.samples, rng);
    gradcheck::check(&store, &entries, |tape| {
        smoothed_cross_entropy(tape, tape.param(logits), &labels, 0.1)
    })
}

/// Runs every group in [`GROUPS`] order with its own random stream.
pub fn run(cfg: &ModelConfig, opts: &SuiteOptions) -> Result<Vec<GroupReport>> {
    cfg.validate()?;
    let streams = Streams::new(opts.seed);
    let mut out = Vec::with_capacity(GROUPS.len());
    for name in GROUPS {
        let mut rng = streams.stream(&format!("gradcheck.{name}"));
        let report = match name {
            "tensor_engine" => engine(opts, &mut rng)?,
            "ssm_core" => ssm(cfg, opts, &mut rng)?,
            "spectral_branch" => spectral(cfg, opts, &mut rng)?,
            "dynamic_branch" => dynamic(cfg, opts, &mut rng)?,
            "graph_branch" => graph(cfg, opts, &mut rng)?,
            "fusion_block" => model_probe(cfg, opts, &mut rng, true)?,
            "nakul_model" => model_probe(cfg, opts, &mut rng, false)?,
            _ => loss(cfg, opts, &mut rng)?,
        };
        out.push(GroupReport { name, report });
    }
    Ok(out)
}
