//! `NAKL` checkpoint files: named tensors stored as little-endian `f32`.
//!
//! Layout: magic `NAKL`, `u32` version (1), `u32` tensor count, then per
//! tensor a `u16` name length, the UTF-8 name, a `u8` rank, `rank` × `u32`
//! dims and the values. Model hyperparameters travel as `meta.*` tensors and
//! the electrode layout as `graph.positions`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, NakulModel};
use crate::tensor::rng::Streams;
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"NAKL";
pub const VERSION: u32 = 1;

pub fn write_tensors(w: &mut impl Write, tensors: &[(String, Tensor)]) -> Result<()> {
    let io = |e| Error::io("<checkpoint>", e);
    let count = u32::try_from(tensors.len()).map_err(|_| Error::invalid("too many tensors"))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::invalid(format!("rank too large: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(rank);
        for &dim in t.shape() {
            let dim = u32::try_from(dim).map_err(|_| Error::invalid(format!("dimension too large: {name}")))?;
            buf.extend_from_slice(&dim.to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(io)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format("checkpoint", "unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_tensors(r: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::io("<checkpoint>", e))?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic bytes"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?
            .to_string();
        let rank = cur.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let bytes = cur.take(n.checked_mul(4).ok_or_else(|| Error::format("checkpoint", "tensor too large"))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format("checkpoint", format!("tensor `{name}`: {e}")))?;
        out.push((name, t));
    }
    if cur.pos != buf.len() {
        return Err(Error::format("checkpoint", "trailing bytes after the last tensor"));
    }
    Ok(out)
}

fn scalar(v: f64) -> Tensor {
    Tensor::from_vec(vec![v])
}

fn meta_tensors(model: &NakulModel) -> Vec<(String, Tensor)> {
    let c = &model.cfg;
    let mut m: Vec<(&str, Tensor)> = vec![
        ("channels", scalar(c.channels as f64)),
        ("length", scalar(c.length as f64)),
        ("rate", scalar(c.rate)),
        ("classes", scalar(c.classes as f64)),
        ("patch", scalar(c.patch as f64)),
        ("d_model", scalar(c.d_model as f64)),
        ("blocks", scalar(c.blocks as f64)),
        ("heads", scalar(c.heads as f64)),
        ("band_centers", Tensor::from_vec(c.band_centers.clone())),
        ("band_sigma", scalar(c.band_sigma)),
        ("kernel_sizes", Tensor::from_vec(c.kernel_sizes.iter().map(|&k| k as f64).collect())),
        ("top_k", scalar(c.top_k as f64)),
        ("state_dim", scalar(c.state_dim as f64)),
        ("ffn_hidden", scalar(c.ffn_hidden as f64)),
        ("head_hidden", scalar(c.head_hidden as f64)),
        ("radius", scalar(c.radius)),
        ("dropout", scalar(c.dropout)),
        ("drop_path", scalar(c.drop_path)),
        ("drop_edge", scalar(c.drop_edge)),
    ];
    if let Some(w) = c.fusion_weights {
        m.push(("fusion_weights", Tensor::from_vec(w.to_vec())));
    }
    let mut out: Vec<(String, Tensor)> = m.into_iter().map(|(k, v)| (format!("meta.{k}"), v)).collect();
    let pos = model.graph.positions.iter().flatten().copied().collect();
    out.push((
        "graph.positions".into(),
        Tensor::new([model.cfg.channels, 3], pos).expect("finite positions"),
    ));
    out
}

pub fn save(path: &Path, model: &NakulModel, store: &ParamStore) -> Result<()> {
    let mut tensors = meta_tensors(model);
    tensors.extend(store.ids().map(|id| (store.name(id).to_string(), store.get(id).clone())));
    let mut buf = Vec::new();
    write_tensors(&mut buf, &tensors)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn take_meta(tensors: &[(String, Tensor)], key: &str) -> Option<Tensor> {
    tensors.iter().find(|(n, _)| n == &format!("meta.{key}")).map(|(_, t)| t.clone())
}

fn need(tensors: &[(String, Tensor)], key: &str) -> Result<Tensor> {
    take_meta(tensors, key).ok_or_else(|| Error::format("checkpoint", format!("missing meta.{key}")))
}

fn count(tensors: &[(String, Tensor)], key: &str) -> Result<usize> {
    let v = need(tensors, key)?.data()[0];
    if v < 0.0 || v.fract() != 0.0 {
        return Err(Error::format("checkpoint", format!("meta.{key} is not a count: {v}")));
    }
    Ok(v as usize)
}

/// Rebuilds the configuration and electrode layout stored in a checkpoint.
pub fn config_from(tensors: &[(String, Tensor)]) -> Result<(ModelConfig, Vec<[f64; 3]>)> {
    let real = |k: &str| need(tensors, k).map(|t| t.data()[0]);
    let fusion = match take_meta(tensors, "fusion_weights") {
        Some(t) if t.numel() == 3 => Some([t.data()[0], t.data()[1], t.data()[2]]),
        Some(_) => return Err(Error::format("checkpoint", "meta.fusion_weights must hold 3 values")),
        None => None,
    };
    let cfg = ModelConfig {
        channels: count(tensors, "channels")?,
        length: count(tensors, "length")?,
        rate: real("rate")?,
        classes: count(tensors, "classes")?,
        patch: count(tensors, "patch")?,
        d_model: count(tensors, "d_model")?,
        blocks: count(tensors, "blocks")?,
        heads: count(tensors, "heads")?,
        band_centers: need(tensors, "band_centers")?.data().to_vec(),
        band_sigma: real("band_sigma")?,
        kernel_sizes: need(tensors, "kernel_sizes")?.data().iter().map(|&k| k as usize).collect(),
        top_k: count(tensors, "top_k")?,
        state_dim: count(tensors, "state_dim")?,
        ffn_hidden: count(tensors, "ffn_hidden")?,
        head_hidden: count(tensors, "head_hidden")?,
        radius: real("radius")?,
        dropout: real("dropout")?,
        drop_path: real("drop_path")?,
        drop_edge: real("drop_edge")?,
        fusion_weights: fusion,
    };
    cfg.validate().map_err(|e| Error::format("checkpoint", e.to_string()))?;
    let pos = tensors
        .iter()
        .find(|(n, _)| n == "graph.positions")
        .map(|(_, t)| t)
        .ok_or_else(|| Error::format("checkpoint", "missing graph.positions"))?;
    if pos.shape() != [cfg.channels, 3] {
        return Err(Error::format("checkpoint", "graph.positions must be [channels, 3]"));
    }
    let positions = pos.data().chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect();
    Ok((cfg, positions))
}

pub fn load(path: &Path) -> Result<(NakulModel, ParamStore)> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let tensors = read_tensors(&mut f)?;
    let (cfg, positions) = config_from(&tensors)?;
    let mut store = ParamStore::new();
    let mut rng = Streams::new(0).stream("init");
    let model = NakulModel::new(&cfg, &positions, &mut store, &mut rng)
        .map_err(|e| Error::format("checkpoint", e.to_string()))?;
    let mut seen = 0;
    for (name, t) in &tensors {
        if name.starts_with("meta.") || name == "graph.positions" {
            continue;
        }
        let id = store
            .find(name)
            .ok_or_else(|| Error::format("checkpoint", format!("unknown tensor `{name}`")))?;
        if store.get(id).shape() != t.shape() {
            return Err(Error::format(
                "checkpoint",
                format!("`{name}` has shape {:?}, model expects {:?}", t.shape(), store.get(id).shape()),
            ));
        }
        *store.get_mut(id) = t.clone();
        seen += 1;
    }
    if seen != store.len() {
        return Err(Error::format("checkpoint", format!("{} of {} parameters present", seen, store.len())));
    }
    Ok((model, store))
}
