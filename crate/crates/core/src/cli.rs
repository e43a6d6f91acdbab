//! The `nakul` command line.
//!
//! Exit codes: 0 success, 1 other I/O failure, 2 configuration error,
//! 3 training aborted, 4 artifact load or shape mismatch, 5 verification
//! failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::checkpoint;
use crate::config::Config;
use crate::dataset;
use crate::error::Error;
use crate::gradsuite::{self, SuiteOptions, TOLERANCE};
use crate::graph::{circle_positions, load_positions, CIRCLE_RADIUS_M};
use crate::model::{count_flops, ModelConfig, NakulModel};
use crate::tensor::rng::Streams;
use crate::tensor::{ParamStore, Tape, Tensor};
use crate::training::{self, generate_synthetic, stratified_split, Confusion, Dataset};

pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_TRAIN: i32 = 3;
pub const EXIT_ARTIFACT: i32 = 4;
pub const EXIT_VERIFY: i32 = 5;

#[derive(Parser, Debug)]
#[command(name = "nakul", version, about = "Train, evaluate and inspect NAKUL sequence models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a synthetic band-power dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a dataset directory and write the best checkpoint plus
    /// metrics.csv beside it. Resuming is not supported.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Accuracy, macro-F1, per-class F1 and the confusion matrix.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare backward passes with central finite differences.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Learned spectral bands of one block as CSV.
    DumpBands {
        #[arg(long)]
        ckpt: PathBuf,
        /// Average the band gates over this dataset.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        block: usize,
    },
    /// Per-sequence kernel mixture weights of one block as CSV.
    DumpKernelWeights {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        block: usize,
    },
    /// Forward-pass timing against the analytic FLOP count.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Token counts per channel (patches), comma-separated.
        #[arg(long, value_delimiter = ',', default_value = "128,256,512,1024,2048")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        runs: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
    /// Partial results still worth printing to stdout.
    pub output: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            output: String::new(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn config_err(e: Error) -> Failure {
    Failure::new(EXIT_CONFIG, e.to_string())
}

fn artifact_err(e: Error) -> Failure {
    Failure::new(EXIT_ARTIFACT, e.to_string())
}

fn io_err(e: Error) -> Failure {
    Failure::new(EXIT_IO, e.to_string())
}

fn load_config(path: Option<&Path>) -> CliResult<Config> {
    match path {
        Some(p) => Config::load(p).map_err(config_err),
        None => Ok(Config::default()),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Results go to `out`; diagnostics go to `err`.
pub fn run<I, T>(args: I, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = write!(out, "{e}");
                return 0;
            }
            let _ = write!(err, "{e}");
            return EXIT_CONFIG;
        }
    };
    match dispatch(cli.cmd, err) {
        Ok(text) => {
            if out.write_all(text.as_bytes()).is_err() {
                return EXIT_IO;
            }
            0
        }
        Err(f) => {
            let _ = out.write_all(f.output.as_bytes());
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cmd: Cmd, err: &mut dyn std::io::Write) -> CliResult<String> {
    match cmd {
        Cmd::GenData { config, out, seed } => gen_data(config.as_deref(), &out, seed),
        Cmd::Train {
            config,
            data,
            out,
            epochs,
            seed,
        } => train(config.as_deref(), data, out, epochs, seed, err),
        Cmd::Eval { ckpt, data } => eval(&ckpt, &data),
        Cmd::GradCheck {
            config,
            samples,
            seed,
            inject_fault,
        } => grad_check(config.as_deref(), samples, seed, inject_fault),
        Cmd::DumpBands { ckpt, data, block } => dump_bands(&ckpt, data.as_deref(), block),
        Cmd::DumpKernelWeights { ckpt, data, block } => dump_kernel_weights(&ckpt, &data, block),
        Cmd::Bench {
            config,
            lengths,
            runs,
            warmup,
            seed,
        } => bench(config.as_deref(), &lengths, runs, warmup, seed),
    }
}

fn gen_data(config: Option<&Path>, out: &Path, seed: Option<u64>) -> CliResult<String> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let data = generate_synthetic(&cfg.data, cfg.train.seed).map_err(config_err)?;
    dataset::write_dataset(out, &data, Some(&cfg.data_manifest())).map_err(io_err)?;
    Ok(format!(
        "wrote {} trials ({} classes, {} channels, {} samples at {} Hz) to {}\n",
        data.len(),
        cfg.data.classes,
        cfg.data.channels,
        cfg.data.length,
        cfg.data.rate,
        out.display()
    ))
}

fn read_data(dir: &Path) -> CliResult<Dataset> {
    dataset::read_dataset(dir).map_err(artifact_err)
}

/// The configured model with its input shape taken from `data`.
fn model_config_for(cfg: &Config, data: &Dataset) -> CliResult<ModelConfig> {
    let m = ModelConfig {
        channels: data.channels(),
        length: data.length(),
        rate: data.rate,
        ..cfg.model.clone()
    };
    m.validate().map_err(|e| match e {
        Error::Config { key, msg } => Failure::new(EXIT_CONFIG, format!("config key `model.{key}`: {msg}")),
        other => config_err(other),
    })?;
    if let Some(&l) = data.labels.iter().find(|&&l| l >= m.classes) {
        return Err(Failure::new(
            EXIT_ARTIFACT,
            format!("dataset label {l} exceeds the configured {} classes", m.classes),
        ));
    }
    Ok(m)
}

fn positions(cfg: &Config, channels: usize) -> CliResult<Vec<[f64; 3]>> {
    match &cfg.paths.positions {
        Some(p) => {
            let pos = load_positions(p).map_err(artifact_err)?;
            if pos.len() != channels {
                return Err(Failure::new(
                    EXIT_ARTIFACT,
                    format!("{} lists {} electrodes for {channels} channels", p.display(), pos.len()),
                ));
            }
            Ok(pos)
        }
        None => Ok(circle_positions(channels, CIRCLE_RADIUS_M)),
    }
}

fn train(
    config: Option<&Path>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    epochs: Option<usize>,
    seed: Option<u64>,
    err: &mut dyn std::io::Write,
) -> CliResult<String> {
    let mut cfg = load_config(config)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let data_dir = data
        .or_else(|| cfg.paths.data.clone())
        .ok_or_else(|| Failure::new(EXIT_CONFIG, "no dataset: pass --data or set paths.data"))?;
    let out = out
        .or_else(|| cfg.paths.checkpoint.clone())
        .ok_or_else(|| Failure::new(EXIT_CONFIG, "no output: pass --out or set paths.checkpoint"))?;
    let data = read_data(&data_dir)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_err(Error::io(parent, e)))?;
    }
    let mcfg = model_config_for(&cfg, &data)?;
    let pos = positions(&cfg, mcfg.channels)?;
    let mut store = ParamStore::new();
    let mut rng = Streams::new(cfg.train.seed).stream("init");
    let model = NakulModel::new(&mcfg, &pos, &mut store, &mut rng).map_err(config_err)?;
    let (tr, va) = stratified_split(&data.labels, cfg.train.val_fraction, cfg.train.seed);
    let (tr, va) = (data.subset(&tr), data.subset(&va));
    if tr.is_empty() || va.is_empty() {
        return Err(Failure::new(EXIT_ARTIFACT, "dataset too small for a train/validation split"));
    }
    let res = training::train(&model, &mut store, &tr, &va, &cfg.train, |m| {
        let _ = writeln!(
            err,
            "epoch {:>3}  train_loss {:.4}  val_loss {:.4}  val_acc {:.4}  lr {:.3e}",
            m.epoch, m.train_loss, m.val_loss, m.val_acc, m.lr
        );
    })
    .map_err(|e| match e {
        Error::TrainingAborted(_) => Failure::new(EXIT_TRAIN, e.to_string()),
        Error::Config { .. } => Failure::new(EXIT_CONFIG, e.to_string()),
        other => Failure::new(EXIT_IO, other.to_string()),
    })?;
    checkpoint::save(&out, &model, &res.best).map_err(io_err)?;
    let metrics = out.with_file_name("metrics.csv");
    training::write_metrics(&metrics, &res.metrics).map_err(io_err)?;
    let mut s = format!("checkpoint: {}\nmetrics: {}\n", out.display(), metrics.display());
    match res.best_epoch {
        Some(e) => {
            let m = &res.metrics[e];
            writeln!(s, "best epoch {e}: val_acc {} val_loss {}", m.val_acc, m.val_loss).unwrap();
        }
        None => s.push_str("no epochs run; checkpoint holds the initialization\n"),
    }
    if res.stopped_early {
        writeln!(s, "stopped early after {} epochs", res.metrics.len()).unwrap();
    }
    if res.skipped_steps > 0 {
        writeln!(s, "skipped {} steps with non-finite gradients", res.skipped_steps).unwrap();
    }
    Ok(s)
}

fn load_matching(ckpt: &Path, data: &Dataset) -> CliResult<(NakulModel, ParamStore)> {
    let (model, store) = checkpoint::load(ckpt).map_err(artifact_err)?;
    let c = &model.cfg;
    if data.channels() != c.channels || data.length() != c.length {
        return Err(Failure::new(
            EXIT_ARTIFACT,
            format!(
                "shape mismatch: checkpoint expects {} channels × {} samples, dataset has {} × {}",
                c.channels,
                c.length,
                data.channels(),
                data.length()
            ),
        ));
    }
    if let Some(&l) = data.labels.iter().find(|&&l| l >= c.classes) {
        return Err(Failure::new(
            EXIT_ARTIFACT,
            format!("shape mismatch: label {l} but the checkpoint has {} classes", c.classes),
        ));
    }
    Ok((model, store))
}

fn eval(ckpt: &Path, data_dir: &Path) -> CliResult<String> {
    let data = read_data(data_dir)?;
    let (model, store) = load_matching(ckpt, &data)?;
    let (preds, _) = training::evaluate(&model, &store, &data, 32).map_err(artifact_err)?;
    let n = model.cfg.classes;
    let conf = Confusion::new(n, &data.labels, &preds);
    let mut s = String::from("metric,value\n");
    writeln!(s, "accuracy,{}", conf.accuracy()).unwrap();
    writeln!(s, "macro_f1,{}", conf.macro_f1()).unwrap();
    for (k, f) in conf.f1().iter().enumerate() {
        writeln!(s, "f1_class_{k},{f}").unwrap();
    }
    s.push('\n');
    s.push_str("true_label");
    for k in 0..n {
        write!(s, ",pred_{k}").unwrap();
    }
    s.push('\n');
    for (k, row) in conf.counts.iter().enumerate() {
        write!(s, "{k}").unwrap();
        for c in row {
            write!(s, ",{c}").unwrap();
        }
        s.push('\n');
    }
    Ok(s)
}

fn grad_check(config: Option<&Path>, samples: usize, seed: Option<u64>, inject_fault: bool) -> CliResult<String> {
    let cfg = load_config(config)?;
    if samples == 0 {
        return Err(Failure::new(EXIT_CONFIG, "--samples must be positive"));
    }
    let opts = SuiteOptions {
        samples,
        seed: seed.unwrap_or(cfg.train.seed),
        inject_fault,
    };
    let reports = gradsuite::run(&cfg.model, &opts).map_err(|e| Failure::new(EXIT_VERIFY, e.to_string()))?;
    let mut s = String::from("module,samples,max_rel_error,status\n");
    let mut worst: Option<(&str, &crate::tensor::gradcheck::Probe)> = None;
    for g in &reports {
        let status = if g.passed() { "ok" } else { "FAIL" };
        writeln!(s, "{},{},{:e},{status}", g.name, g.report.probes.len(), g.report.max_rel_error()).unwrap();
        if let Some(p) = g.report.worst() {
            if worst.is_none_or(|(_, w)| p.rel_error > w.rel_error) {
                worst = Some((g.name, p));
            }
        }
    }
    if reports.iter().all(|g| g.passed()) {
        return Ok(s);
    }
    let (group, p) = worst.expect("a failing group has probes");
    let mut f = Failure::new(
        EXIT_VERIFY,
        format!(
            "gradient check failed (tolerance {TOLERANCE:e}); worst: {group} `{}`[{}] analytic {:e} numeric {:e} rel {:e}",
            p.param, p.index, p.analytic, p.numeric, p.rel_error
        ),
    );
    f.output = s;
    Err(f)
}

fn block_index(model: &NakulModel, block: usize) -> CliResult<usize> {
    if block >= model.blocks.len() {
        return Err(Failure::new(
            EXIT_CONFIG,
            format!("--block {block} out of range ({} blocks)", model.blocks.len()),
        ));
    }
    Ok(block)
}

/// Evaluation-mode traces for every trial, batched.
fn traces<F>(model: &NakulModel, store: &ParamStore, data: &Dataset, mut f: F) -> CliResult<()>
where
    F: FnMut(&Tape, &crate::model::ModelOutput, usize),
{
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(16) {
        let tape = Tape::with_params(store);
        let out = model
            .forward(&tape, tape.constant(data.batch(chunk)), None)
            .map_err(artifact_err)?;
        f(&tape, &out, chunk[0]);
    }
    Ok(())
}

fn dump_bands(ckpt: &Path, data_dir: Option<&Path>, block: usize) -> CliResult<String> {
    let (model, store) = checkpoint::load(ckpt).map_err(artifact_err)?;
    let block = block_index(&model, block)?;
    let bands = model.blocks[block].spectral.bands(&store);
    let mut gate_sum = vec![0.0; bands.len()];
    let mut rows = 0usize;
    if let Some(dir) = data_dir {
        let data = read_data(dir)?;
        let (model, store) = load_matching(ckpt, &data)?;
        traces(&model, &store, &data, |tape, out, _| {
            let g = tape.value(out.blocks[block].band_gate);
            for row in g.data().chunks(bands.len()) {
                for (s, v) in gate_sum.iter_mut().zip(row) {
                    *s += v;
                }
                rows += 1;
            }
        })?;
    }
    let mut s = String::from("band_index,mu_hz,sigma_hz,mean_alpha\n");
    for (k, (mu, sigma)) in bands.iter().enumerate() {
        let alpha = if rows > 0 {
            (gate_sum[k] / rows as f64).to_string()
        } else {
            String::new()
        };
        writeln!(s, "{k},{mu},{sigma},{alpha}").unwrap();
    }
    Ok(s)
}

fn dump_kernel_weights(ckpt: &Path, data_dir: &Path, block: usize) -> CliResult<String> {
    let data = read_data(data_dir)?;
    let (model, store) = load_matching(ckpt, &data)?;
    let block = block_index(&model, block)?;
    let sizes = &model.cfg.kernel_sizes;
    let mut s = String::from("sample");
    for k in sizes {
        write!(s, ",alpha_{k}").unwrap();
    }
    s.push_str(",variance,entropy\n");
    let mut next = 0usize;
    traces(&model, &store, &data, |tape, out, _| {
        let trace = &out.blocks[block];
        let alpha = tape.value(trace.kernel_weights);
        let var = tape.value(trace.variance);
        let ent = tape.value(trace.entropy);
        for (i, a) in alpha.data().chunks(sizes.len()).enumerate() {
            write!(s, "{next}").unwrap();
            for v in a {
                write!(s, ",{v}").unwrap();
            }
            writeln!(s, ",{},{}", var.data()[i], ent.data()[i]).unwrap();
            next += 1;
        }
    })?;
    Ok(s)
}

fn bench(config: Option<&Path>, lengths: &[usize], runs: usize, warmup: usize, seed: Option<u64>) -> CliResult<String> {
    let cfg = load_config(config)?;
    if runs == 0 || lengths.is_empty() {
        return Err(Failure::new(EXIT_CONFIG, "need at least one run and one length"));
    }
    let seed = seed.unwrap_or(cfg.train.seed);
    let mut s = String::from("patches,samples,median_seconds,flops\n");
    for &tp in lengths {
        let mcfg = ModelConfig {
            length: tp * cfg.model.patch,
            ..cfg.model.clone()
        };
        mcfg.validate().map_err(config_err)?;
        let mut store = ParamStore::new();
        let streams = Streams::new(seed);
        let model = NakulModel::new(&mcfg, &circle_positions(mcfg.channels, CIRCLE_RADIUS_M), &mut store, &mut streams.stream("init"))
            .map_err(config_err)?;
        let x = Tensor::randn([1, mcfg.channels, mcfg.length], 1.0, &mut streams.stream("bench"));
        let mut times = Vec::with_capacity(runs);
        for i in 0..warmup + runs {
            let t = Instant::now();
            model.predict(&store, &x).map_err(config_err)?;
            if i >= warmup {
                times.push(t.elapsed().as_secs_f64());
            }
        }
        times.sort_by(f64::total_cmp);
        let median = if runs % 2 == 1 {
            times[runs / 2]
        } else {
            0.5 * (times[runs / 2 - 1] + times[runs / 2])
        };
        let flops = count_flops(&mcfg, 1, None).total();
        writeln!(s, "{tp},{},{median},{flops}", mcfg.length).unwrap();
    }
    Ok(s)
}
