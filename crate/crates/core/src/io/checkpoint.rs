//! The ASDM1 checkpoint container.
//!
//! All integers are little-endian. Layout, in order:
//!
//! | field | encoding |
//! |---|---|
//! | magic | the 5 bytes `ASDM1` |
//! | version | `u32`, currently 1 |
//! | kind | `u8` ([`ModelKind`] code) |
//! | spec | `u64` byte length, then UTF-8 JSON of the [`UNetSpec`] |
//! | tensor table | `u32` count, then per tensor: name, `u8` dtype (0 = f64), `u8` rank, `rank × u64` dims, `u64` payload byte length, payload |
//! | freeze mask | `u32` count, then per entry: name, `u8` flag (0 trainable, 1 frozen) |
//! | provenance | `u32` count, then per entry: name, `u8` (0 teacher, 1 student, 2 fresh) |
//!
//! A name is a `u32` byte length followed by UTF-8 bytes. Nothing may follow
//! the provenance table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compress::{FreezeMask, Provenance, ProvenanceMap, Recombined};
use crate::diffkit::Tensor;
use crate::error::{Error, Result};
use crate::unet::{ParamStore, UNetModel, UNetSpec};

pub const MAGIC: &[u8; 5] = b"ASDM1";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 0;

/// What stage of the pipeline produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Teacher,
    Pruned,
    CondConv,
    Recombined,
    Distilled,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Teacher,
        ModelKind::Pruned,
        ModelKind::CondConv,
        ModelKind::Recombined,
        ModelKind::Distilled,
    ];

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

fn provenance_code(p: Provenance) -> u8 {
    match p {
        Provenance::Teacher => 0,
        Provenance::Student => 1,
        Provenance::Fresh => 2,
    }
}

fn provenance_from_code(c: u8) -> Option<Provenance> {
    match c {
        0 => Some(Provenance::Teacher),
        1 => Some(Provenance::Student),
        2 => Some(Provenance::Fresh),
        _ => None,
    }
}

/// A model with its trainability and origin metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub model: UNetModel,
    pub freeze: FreezeMask,
    pub provenance: ProvenanceMap,
}

/// One row of [`Checkpoint::inventory`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InventoryEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub numel: usize,
    pub provenance: Option<Provenance>,
    pub frozen: bool,
}

impl Checkpoint {
    /// A checkpoint with every parameter trainable and no provenance.
    pub fn new(kind: ModelKind, model: UNetModel) -> Self {
        let freeze = FreezeMask::none(&model);
        Self {
            kind,
            model,
            freeze,
            provenance: ProvenanceMap::new(),
        }
    }

    pub fn from_recombined(kind: ModelKind, r: Recombined) -> Self {
        Self {
            kind,
            model: r.model,
            freeze: r.freeze,
            provenance: r.provenance,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Vec::with_capacity(self.model.param_count() * 8 + 4096);
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        w.push(self.kind.code());
        let spec = serde_json::to_vec(self.model.spec())?;
        w.extend_from_slice(&(spec.len() as u64).to_le_bytes());
        w.extend_from_slice(&spec);

        let params = self.model.params();
        put_count(&mut w, params.len())?;
        for (name, t) in params.iter() {
            put_name(&mut w, name)?;
            w.push(DTYPE_F64);
            let rank = u8::try_from(t.rank())
                .map_err(|_| Error::contract(format!("`{name}` has rank {}", t.rank())))?;
            w.push(rank);
            for &d in t.shape() {
                w.extend_from_slice(&(d as u64).to_le_bytes());
            }
            w.extend_from_slice(&(t.numel() as u64 * 8).to_le_bytes());
            for v in t.data() {
                w.extend_from_slice(&v.to_le_bytes());
            }
        }

        let frozen: Vec<(&str, bool)> = self.freeze.iter().collect();
        put_count(&mut w, frozen.len())?;
        for (name, f) in frozen {
            put_name(&mut w, name)?;
            w.push(u8::from(f));
        }

        put_count(&mut w, self.provenance.len())?;
        for (name, p) in &self.provenance {
            put_name(&mut w, name)?;
            w.push(provenance_code(*p));
        }
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(MAGIC.len())?;
        if magic != MAGIC {
            return Err(Error::UnsupportedFormat(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(magic),
                std::str::from_utf8(MAGIC).expect("ascii")
            )));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedFormat(format!(
                "format version {version}, this build reads version {FORMAT_VERSION}"
            )));
        }
        let at = r.pos;
        let kind = ModelKind::from_code(r.u8()?)
            .ok_or_else(|| r.corrupt(at, "unknown model kind code"))?;
        let spec_len = r.len_u64()?;
        let at = r.pos;
        let spec: UNetSpec = serde_json::from_slice(r.take(spec_len)?)
            .map_err(|e| r.corrupt(at, format!("spec document: {e}")))?;

        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let at = r.pos;
            let name = r.name()?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F64 {
                return Err(r.corrupt(at, format!("`{name}` has unknown dtype tag {dtype}")));
            }
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.len_u64()?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| r.corrupt(at, format!("`{name}` shape {shape:?} overflows")))?;
            let payload_at = r.pos;
            let payload = r.len_u64()?;
            if Some(payload) != numel.checked_mul(8) {
                return Err(r.corrupt(
                    payload_at,
                    format!(
                        "`{name}` payload is {payload} bytes, shape {shape:?} needs {}",
                        numel.saturating_mul(8)
                    ),
                ));
            }
            let data: Vec<f64> = r
                .take(payload)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if params.contains(&name) {
                return Err(r.corrupt(at, format!("tensor `{name}` listed twice")));
            }
            params.insert(name, Tensor::new(shape, data)?);
        }
        let model_at = r.pos;
        let model = UNetModel::from_parts(spec, params)
            .map_err(|e| r.corrupt(model_at, format!("tensor table does not match spec: {e}")))?;

        let mut frozen = BTreeMap::new();
        for _ in 0..r.u32()? {
            let at = r.pos;
            let name = r.name()?;
            let flag = match r.u8()? {
                0 => false,
                1 => true,
                f => return Err(r.corrupt(at, format!("`{name}` has freeze flag {f}"))),
            };
            if !model.params().contains(&name) {
                return Err(r.corrupt(at, format!("freeze entry for unknown tensor `{name}`")));
            }
            if frozen.insert(name.clone(), flag).is_some() {
                return Err(r.corrupt(at, format!("freeze entry `{name}` listed twice")));
            }
        }

        let mut provenance = ProvenanceMap::new();
        for _ in 0..r.u32()? {
            let at = r.pos;
            let name = r.name()?;
            let code = r.u8()?;
            let p = provenance_from_code(code)
                .ok_or_else(|| r.corrupt(at, format!("`{name}` has provenance code {code}")))?;
            if !model.params().contains(&name) {
                return Err(r.corrupt(at, format!("provenance entry for unknown tensor `{name}`")));
            }
            if provenance.insert(name.clone(), p).is_some() {
                return Err(r.corrupt(at, format!("provenance entry `{name}` listed twice")));
            }
        }
        if r.pos != bytes.len() {
            return Err(r.corrupt(
                r.pos,
                format!(
                    "{} trailing bytes after provenance table",
                    bytes.len() - r.pos
                ),
            ));
        }
        Ok(Self {
            kind,
            model,
            freeze: FreezeMask::from_map(frozen),
            provenance,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Bitwise equality of kind, spec, tensors, freeze mask and provenance.
    pub fn bitwise_eq(&self, other: &Checkpoint) -> bool {
        self.kind == other.kind
            && self.model.spec() == other.model.spec()
            && self.model.params().bitwise_eq(other.model.params())
            && self.freeze == other.freeze
            && self.provenance == other.provenance
    }

    /// One entry per tensor, in name order.
    pub fn inventory(&self) -> Vec<InventoryEntry> {
        self.model
            .params()
            .iter()
            .map(|(name, t)| InventoryEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                numel: t.numel(),
                provenance: self.provenance.get(name).copied(),
                frozen: self.freeze.is_frozen(name),
            })
            .collect()
    }

    /// Tensor counts per provenance; untracked tensors are not counted.
    pub fn provenance_counts(&self) -> BTreeMap<Provenance, usize> {
        let mut counts = BTreeMap::new();
        for p in self.provenance.values() {
            *counts.entry(*p).or_insert(0) += 1;
        }
        counts
    }

    /// Plain-text inventory: a header, then one line per tensor.
    pub fn render_inventory(&self) -> String {
        let entries = self.inventory();
        let frozen = entries.iter().filter(|e| e.frozen).count();
        let mut s = String::new();
        let _ = writeln!(
            s,
            "kind {:?}, {} tensors, {} parameters, {} frozen tensors",
            self.kind,
            entries.len(),
            self.model.param_count(),
            frozen
        );
        let width = entries.iter().map(|e| e.name.len()).max().unwrap_or(4);
        let _ = writeln!(
            s,
            "{:<width$}  {:<18} {:>10}  {:<10} {}",
            "name", "shape", "numel", "provenance", "frozen"
        );
        for e in &entries {
            let prov = match e.provenance {
                Some(p) => format!("{p:?}").to_lowercase(),
                None => "-".to_string(),
            };
            let _ = writeln!(
                s,
                "{:<width$}  {:<18} {:>10}  {:<10} {}",
                e.name,
                format!("{:?}", e.shape),
                e.numel,
                prov,
                if e.frozen { "yes" } else { "no" }
            );
        }
        s
    }
}

fn put_count(w: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::contract(format!("{n} entries exceed u32")))?;
    w.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

fn put_name(w: &mut Vec<u8>, name: &str) -> Result<()> {
    put_count(w, name.len())?;
    w.extend_from_slice(name.as_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let left = self.buf.len() - self.pos;
        if n > left {
            return Err(Error::Truncated {
                offset: self.pos,
                expected: n,
                actual: left,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn len_u64(&mut self) -> Result<usize> {
        let at = self.pos;
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| self.corrupt(at, format!("length {v} does not fit usize")))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.corrupt(at, "name is not UTF-8"))
    }

    fn corrupt(&self, offset: usize, detail: impl Into<String>) -> Error {
        Error::Corrupt {
            offset,
            detail: detail.into(),
        }
    }
}
