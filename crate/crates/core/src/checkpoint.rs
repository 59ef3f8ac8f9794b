//! Binary model snapshots.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VRFNOCKP"            8-byte magic
//! version               u32
//! header length         u32, then that many bytes of JSON metadata
//! tensor count          u32
//! per tensor:
//!   name length         u32, then UTF-8 name
//!   rank                u32
//!   dims                rank x u64
//!   payload             prod(dims) x f32
//! ```
//!
//! Parameters come first in model order. With Adam they are followed by
//! the first moments (`adam.m.<param>`) and then the second moments
//! (`adam.v.<param>`); the shared step counter lives in the JSON header.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::{Model, OptimizerKind, OptimizerState, TrainConfig};

pub const MAGIC: &[u8; 8] = b"VRFNOCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Rf,
    Reflow,
    Vrfno,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Rf, ModelKind::Reflow, ModelKind::Vrfno];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Rf => "rf",
            ModelKind::Reflow => "reflow",
            ModelKind::Vrfno => "vrfno",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model `{s}` (expected rf, reflow or vrfno)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    /// Configuration the parameters were trained with.
    pub train: TrainConfig,
    pub iteration: u64,
    pub optimizer_step: u64,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model,
    pub optimizer: OptimizerState,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len())?;
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn moment_names(names: &[String], kind: OptimizerKind) -> Vec<String> {
    match kind {
        OptimizerKind::Adam => ["m", "v"]
            .iter()
            .flat_map(|m| names.iter().map(move |n| format!("adam.{m}.{n}")))
            .collect(),
        OptimizerKind::Sgd => Vec::new(),
    }
}

pub fn encode(header: &CheckpointHeader, model: &Model, optimizer: &OptimizerState) -> Result<Vec<u8>> {
    if optimizer.kind != header.train.optimizer || optimizer.step != header.optimizer_step {
        return Err(Error::Checkpoint("optimizer state does not match the header".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let meta = serde_json::to_vec(header)?;
    put_u32(&mut out, meta.len())?;
    out.extend_from_slice(&meta);
    let names = model.param_names();
    let params = model.params();
    let moments = moment_names(&names, optimizer.kind);
    put_u32(&mut out, params.len() + moments.len())?;
    for (name, t) in names.iter().zip(&params) {
        put_tensor(&mut out, name, t.shape(), t.data())?;
    }
    let slots = optimizer.first.iter().chain(&optimizer.second);
    let shapes = params.iter().chain(&params);
    for ((name, data), p) in moments.iter().zip(slots).zip(shapes) {
        if data.len() != p.numel() {
            return Err(Error::Checkpoint(format!("moment `{name}` has {} values", data.len())));
        }
        put_tensor(&mut out, name, p.shape(), data)?;
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let b = self.take(8, what)?;
        usize::try_from(u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .map_err(|_| Error::Checkpoint(format!("{what} does not fit in memory")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = c.u32("version")? as u32;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let meta_len = c.u32("header length")?;
    let header: CheckpointHeader = serde_json::from_slice(c.take(meta_len, "header")?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    header.train.validate()?;

    let mut model = Model::new(&header.train);
    let names = model.param_names();
    let moments = moment_names(&names, header.train.optimizer);
    let count = c.u32("tensor count")?;
    if count != names.len() + moments.len() {
        return Err(Error::Checkpoint(format!(
            "{count} tensors stored, model and optimizer need {}",
            names.len() + moments.len()
        )));
    }
    for (want, slot) in names.iter().zip(model.params_mut()) {
        let shape = slot.shape().to_vec();
        read_tensor(&mut c, want, &shape, slot.data_mut())?;
    }
    let mut optimizer = OptimizerState::new(header.train.optimizer, &model.params());
    optimizer.step = header.optimizer_step;
    let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
    let slots = optimizer.first.iter_mut().chain(optimizer.second.iter_mut());
    for ((want, slot), shape) in moments.iter().zip(slots).zip(shapes.iter().cycle()) {
        read_tensor(&mut c, want, shape, slot)?;
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(Checkpoint {
        header,
        model,
        optimizer,
    })
}

fn read_tensor(c: &mut Cursor<'_>, want: &str, shape: &[usize], dst: &mut [f32]) -> Result<()> {
    let len = c.u32("name length")?;
    let name = std::str::from_utf8(c.take(len, "name")?)
        .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
    if name != want {
        return Err(Error::Checkpoint(format!("expected tensor `{want}`, found `{name}`")));
    }
    let rank = c.u32("rank")?;
    let dims = (0..rank).map(|_| c.u64("dim")).collect::<Result<Vec<_>>>()?;
    if dims != shape {
        return Err(Error::Checkpoint(format!(
            "tensor `{name}` has shape {dims:?}, expected {shape:?}"
        )));
    }
    let payload = c.take(dst.len() * 4, name)?;
    for (d, b) in dst.iter_mut().zip(payload.chunks_exact(4)) {
        *d = f32::from_le_bytes(b.try_into().expect("4 bytes"));
    }
    Ok(())
}

pub fn save(path: &Path, header: &CheckpointHeader, model: &Model, optimizer: &OptimizerState) -> Result<()> {
    let bytes = encode(header, model, optimizer)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
