//! On-disk datasets: one text file per trial plus `labels.csv`.
//!
//! A trial file starts with `# channels=<C> samples=<T> rate=<Hz> label=<L>`
//! followed by C lines of T comma-separated values. `labels.csv` has the
//! header `filename,label`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::Dataset;

pub const LABELS_FILE: &str = "labels.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";

pub fn trial_name(i: usize) -> String {
    format!("trial_{i:05}.csv")
}

/// Renders one trial `[C, T]`. Values use the shortest round-trip decimal
/// form, so reading back is exact.
pub fn format_trial(x: &Tensor, rate: f64, label: usize) -> String {
    let (c, t) = (x.shape()[0], x.shape()[1]);
    let mut s = format!("# channels={c} samples={t} rate={rate} label={label}\n");
    for row in x.data().chunks(t) {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            write!(s, "{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Parses a trial file into `(signal [C, T], rate, label)`.
pub fn parse_trial(text: &str, what: &str) -> Result<(Tensor, f64, usize)> {
    let bad = |msg: String| Error::format(what, msg);
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let fields = header
        .strip_prefix('#')
        .ok_or_else(|| bad("missing `#` header".into()))?;
    let (mut c, mut t, mut rate, mut label) = (None, None, None, None);
    for kv in fields.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("bad header field `{kv}`")))?;
        let num = || bad(format!("bad value in header field `{kv}`"));
        match k {
            "channels" => c = Some(v.parse::<usize>().map_err(|_| num())?),
            "samples" => t = Some(v.parse::<usize>().map_err(|_| num())?),
            "rate" => rate = Some(v.parse::<f64>().map_err(|_| num())?),
            "label" => label = Some(v.parse::<usize>().map_err(|_| num())?),
            _ => return Err(bad(format!("unknown header field `{k}`"))),
        }
    }
    let (Some(c), Some(t), Some(rate), Some(label)) = (c, t, rate, label) else {
        return Err(bad("header needs channels, samples, rate and label".into()));
    };
    let mut data = Vec::with_capacity(c * t);
    let mut rows = 0;
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let before = data.len();
        for v in line.split(',') {
            data.push(v.trim().parse::<f64>().map_err(|_| bad(format!("row {}: bad value `{v}`", rows + 1)))?);
        }
        if data.len() - before != t {
            return Err(bad(format!("row {} has {} values, expected {t}", rows + 1, data.len() - before)));
        }
        rows += 1;
    }
    if rows != c {
        return Err(bad(format!("{rows} rows, header says {c} channels")));
    }
    let x = Tensor::new([c, t], data).map_err(|e| bad(e.to_string()))?;
    Ok((x, rate, label))
}

/// Writes trials, `labels.csv` and, if given, a manifest.
pub fn write_dataset(dir: &Path, data: &Dataset, manifest: Option<&str>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut labels = String::from("filename,label\n");
    for (i, (x, &l)) in data.trials.iter().zip(&data.labels).enumerate() {
        let name = trial_name(i);
        let path = dir.join(&name);
        std::fs::write(&path, format_trial(x, data.rate, l)).map_err(|e| Error::io(&path, e))?;
        writeln!(labels, "{name},{l}").unwrap();
    }
    let path = dir.join(LABELS_FILE);
    std::fs::write(&path, labels).map_err(|e| Error::io(&path, e))?;
    if let Some(m) = manifest {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, m).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Reads the trials listed in `labels.csv`, in file order. Shapes, rates and
/// labels must agree across files and with the listing.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let lpath = dir.join(LABELS_FILE);
    let listing = std::fs::read_to_string(&lpath).map_err(|e| Error::io(&lpath, e))?;
    let mut lines = listing.lines();
    if lines.next().map(str::trim) != Some("filename,label") {
        return Err(Error::format(LABELS_FILE, "header must be `filename,label`"));
    }
    let mut trials = Vec::new();
    let mut labels = Vec::new();
    let mut rate = None;
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let (name, label) = line
            .split_once(',')
            .ok_or_else(|| Error::format(LABELS_FILE, format!("bad row `{line}`")))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| Error::format(LABELS_FILE, format!("bad label in `{line}`")))?;
        let path = dir.join(name.trim());
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let (x, r, l) = parse_trial(&text, name.trim())?;
        if l != label {
            return Err(Error::format(name.trim(), format!("label {l} disagrees with labels.csv ({label})")));
        }
        if let Some(first) = trials.first().map(|t: &Tensor| t.shape().to_vec()) {
            if x.shape() != first.as_slice() {
                return Err(Error::shape(format!("{} has shape {:?}, expected {:?}", name.trim(), x.shape(), first)));
            }
        }
        match rate {
            None => rate = Some(r),
            Some(r0) if r0 != r => {
                return Err(Error::format(name.trim(), format!("rate {r} differs from {r0}")));
            }
            _ => {}
        }
        trials.push(x);
        labels.push(label);
    }
    let rate = rate.ok_or_else(|| Error::format(LABELS_FILE, "no trials listed"))?;
    Ok(Dataset { trials, labels, rate })
}
