//! Binary checkpoint format.
//!
//! ```text
//! "RNL1"  u32 version  u32 count
//! count x { u16 name_len, name (UTF-8), u8 rank, rank x u64 dim, f32 data... }
//! ```
//! All integers and floats are little-endian. Model metadata is stored as
//! entries named `meta.<key>=<value>` with a single zero-length dimension.

use std::collections::BTreeMap;
use std::path::Path;

use super::{build_zoo, Arch, DatasetSpec, Model};
use crate::error::{Error, Result};
use crate::norm::NormKind;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RNL1";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Entry {
    name: String,
    dims: Vec<usize>,
    data: Vec<f32>,
}

fn meta_entries(model: &Model) -> Vec<(String, String)> {
    let ds = &model.dataset;
    vec![
        ("arch".into(), model.arch.to_string()),
        ("dataset".into(), ds.name.clone()),
        (
            "input".into(),
            ds.input_shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x"),
        ),
        ("classes".into(), ds.num_classes.to_string()),
        ("norm".into(), model.norm.to_string()),
        ("p".into(), model.p.to_string()),
        ("tau".into(), model.tau.to_string()),
        ("eps".into(), model.eps.to_string()),
        ("seed".into(), model.seed.to_string()),
    ]
}

/// Serialises a model. Parameters are rounded to `f32`.
pub fn write_checkpoint(model: &Model) -> Vec<u8> {
    let mut entries: Vec<Entry> = meta_entries(model)
        .into_iter()
        .map(|(k, v)| Entry {
            name: format!("meta.{k}={v}"),
            dims: vec![0],
            data: Vec::new(),
        })
        .collect();
    for (name, t) in model.named_tensors() {
        entries.push(Entry {
            name,
            dims: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f32).collect(),
        });
    }

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in &entries {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.dims.len() as u8);
        for &d in &e.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}: need {n}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn parse_entries(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic, expected RNL1".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32("entry count")?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64("dimension")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: dimensions overflow")))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint(format!("{name}: too large")))?, &name)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        entries.push(Entry { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(entries)
}

fn meta<'a>(map: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    map.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("missing metadata: {key}")))
}

fn meta_f64(map: &BTreeMap<String, String>, key: &str) -> Result<f64> {
    meta(map, key)?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("metadata {key} is not a number")))
}

/// Rebuilds a model from checkpoint bytes. Every tensor the architecture
/// expects must be present, and nothing else.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Model> {
    let entries = parse_entries(bytes)?;
    let mut metadata = BTreeMap::new();
    let mut tensors = Vec::new();
    for e in entries {
        match e.name.strip_prefix("meta.") {
            Some(kv) => {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::Checkpoint(format!("malformed metadata entry {}", e.name)))?;
                metadata.insert(k.to_string(), v.to_string());
            }
            None => tensors.push(e),
        }
    }
    let arch: Arch = meta(&metadata, "arch")?.parse()?;
    let norm: NormKind = meta(&metadata, "norm")?.parse()?;
    let input_shape = meta(&metadata, "input")?
        .split('x')
        .map(|d| d.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::Checkpoint("metadata input is malformed".into()))?;
    let num_classes = meta(&metadata, "classes")?
        .parse()
        .map_err(|_| Error::Checkpoint("metadata classes is malformed".into()))?;
    let dataset = DatasetSpec {
        name: meta(&metadata, "dataset")?.to_string(),
        input_shape,
        num_classes,
    };
    let (p, tau, eps) = (
        meta_f64(&metadata, "p")?,
        meta_f64(&metadata, "tau")?,
        meta_f64(&metadata, "eps")?,
    );

    let seed = meta(&metadata, "seed")?
        .parse()
        .map_err(|_| Error::Checkpoint("metadata seed is malformed".into()))?;
    let mut model = build_zoo(arch, &dataset, norm, p, tau, seed)?;
    model.set_norm_eps(eps)?;
    let expected: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    if tensors.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            expected.len(),
            tensors.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for e in &tensors {
        if !seen.insert(e.name.as_str()) {
            return Err(Error::Checkpoint(format!("duplicate entry {}", e.name)));
        }
        let values: Vec<f64> = e.data.iter().map(|&v| v as f64).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("{}: non-finite value", e.name)));
        }
        model.set_named(&e.name, &values, &e.dims).map_err(|err| match err {
            Error::Unknown { .. } => Error::Checkpoint(format!("unexpected entry {}", e.name)),
            other => other,
        })?;
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
