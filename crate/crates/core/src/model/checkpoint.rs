//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    "BESTCKPT"
//! version  u32
//! config   u64 length + UTF-8 JSON of ModelConfig
//! count    u32
//! entries  count x { kind u8, name u16 length + UTF-8, rank u8, dims u64 x rank, payload }
//! ```
//!
//! `kind` is 0 for a trainable tensor, 1 for a buffer (f32 payloads) and
//! 2 for the packed binary image of a projection (`BPK1` payload). Packed
//! entries follow the latent weights they are derived from and are verified
//! against them on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::binary::{PackedBits, WeightMode};
use crate::error::{Error, Result};
use crate::param::{Module, ParamKind, Visitor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BESTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND_PARAM: u8 = 0;
const KIND_BUFFER: u8 = 1;
const KIND_PACKED: u8 = 2;

struct Entry {
    kind: u8,
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

struct Collect(Vec<Entry>);

impl Visitor for Collect {
    fn param(&mut self, name: &str, shape: &[usize], value: &mut [f32], _: &mut [f32], _: ParamKind) {
        self.0.push(Entry {
            kind: KIND_PARAM,
            name: name.into(),
            shape: shape.to_vec(),
            data: value.to_vec(),
        });
    }
    fn buffer(&mut self, name: &str, value: &mut [f32]) {
        self.0.push(Entry {
            kind: KIND_BUFFER,
            name: name.into(),
            shape: vec![value.len()],
            data: value.to_vec(),
        });
    }
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        path: "<checkpoint>".into(),
        reason: reason.into(),
    }
}

/// Serializes a model. The output depends only on the model state.
pub fn write_checkpoint(model: &Model, w: &mut impl Write) -> Result<()> {
    let mut m = model.clone();
    let mut c = Collect(Vec::new());
    m.visit("", &mut c);
    let packed: Vec<(String, PackedBits)> = match model.config().weights {
        WeightMode::Binary => model
            .projections()
            .into_iter()
            .map(|p| Ok((p.name().to_string(), p.binary_weights()?.clone())))
            .collect::<Result<_>>()?,
        WeightMode::Full => Vec::new(),
    };

    let cfg = serde_json::to_vec(model.config()).map_err(|e| bad(e.to_string()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(cfg.len() as u64).to_le_bytes())?;
    w.write_all(&cfg)?;
    w.write_all(&((c.0.len() + packed.len()) as u32).to_le_bytes())?;
    let header = |w: &mut dyn Write, kind: u8, name: &str, shape: &[usize]| -> Result<()> {
        w.write_all(&[kind])?;
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        Ok(())
    };
    for e in &c.0 {
        header(w, e.kind, &e.name, &e.shape)?;
        for v in &e.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for (name, bits) in &packed {
        header(w, KIND_PACKED, name, &[bits.rows(), bits.cols()])?;
        bits.write_to(w)?;
    }
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| bad(format!("truncated: {e}")))?;
    Ok(b)
}

/// Reads a checkpoint and rebuilds the model it describes.
pub fn read_checkpoint(r: &mut impl Read) -> Result<Model> {
    if &read_array::<8>(r)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(read_array(r)?);
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(read_array(r)?) as usize;
    if len > 1 << 24 {
        return Err(bad("config block too large"));
    }
    let mut cfg = vec![0u8; len];
    r.read_exact(&mut cfg).map_err(|e| bad(format!("truncated config: {e}")))?;
    let cfg: ModelConfig = serde_json::from_slice(&cfg).map_err(|e| bad(format!("config: {e}")))?;
    let mut model = Model::new(&cfg, 0)?;

    let count = u32::from_le_bytes(read_array(r)?) as usize;
    let mut tensors = Vec::with_capacity(count);
    let mut packed = Vec::new();
    for _ in 0..count {
        let [kind] = read_array::<1>(r)?;
        let nlen = u16::from_le_bytes(read_array(r)?) as usize;
        let mut name = vec![0u8; nlen];
        r.read_exact(&mut name).map_err(|e| bad(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| bad("entry name is not UTF-8"))?;
        let [rank] = read_array::<1>(r)?;
        let shape: Vec<usize> = (0..rank)
            .map(|_| Ok(u64::from_le_bytes(read_array(r)?) as usize))
            .collect::<Result<_>>()?;
        match kind {
            KIND_PARAM | KIND_BUFFER => {
                let n: usize = shape.iter().product();
                let mut raw = vec![0u8; n * 4];
                r.read_exact(&mut raw).map_err(|e| bad(format!("truncated {name}: {e}")))?;
                let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                tensors.push(Entry {
                    kind,
                    name,
                    shape,
                    data,
                });
            }
            KIND_PACKED => {
                let bits = PackedBits::read_from(r)?;
                if shape != [bits.rows(), bits.cols()] {
                    return Err(bad(format!("{name}: packed shape mismatch")));
                }
                packed.push((name, bits));
            }
            k => return Err(bad(format!("unknown entry kind {k}"))),
        }
    }

    struct Load {
        entries: std::collections::HashMap<String, Entry>,
        err: Option<Error>,
    }
    impl Load {
        fn take(&mut self, kind: u8, name: &str, shape: &[usize], value: &mut [f32]) {
            if self.err.is_some() {
                return;
            }
            match self.entries.remove(name) {
                Some(e) if e.kind == kind && e.shape == shape && e.data.len() == value.len() => {
                    value.copy_from_slice(&e.data)
                }
                Some(_) => self.err = Some(bad(format!("{name}: kind or shape mismatch"))),
                None => self.err = Some(bad(format!("missing entry {name}"))),
            }
        }
    }
    impl Visitor for Load {
        fn param(&mut self, name: &str, shape: &[usize], value: &mut [f32], _: &mut [f32], _: ParamKind) {
            self.take(KIND_PARAM, name, shape, value);
        }
        fn buffer(&mut self, name: &str, value: &mut [f32]) {
            self.take(KIND_BUFFER, name, &[value.len()], value);
        }
    }
    let mut load = Load {
        entries: tensors.into_iter().map(|e| (e.name.clone(), e)).collect(),
        err: None,
    };
    model.visit("", &mut load);
    if let Some(e) = load.err {
        return Err(e);
    }
    if let Some(name) = load.entries.keys().next() {
        return Err(bad(format!("unexpected entry {name}")));
    }

    let projections = model.projections();
    if cfg.weights == WeightMode::Binary && packed.len() != projections.len() {
        return Err(bad("packed weight count does not match the architecture"));
    }
    for (name, bits) in &packed {
        let p = projections
            .iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| bad(format!("packed entry {name} has no projection")))?;
        if p.binary_weights()? != bits {
            return Err(bad(format!("{name}: packed bits disagree with latent weights")));
        }
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r).map_err(|e| match e {
        Error::Format { reason, .. } => Error::Format {
            path: path.to_path_buf(),
            reason,
        },
        e => e,
    })
}
