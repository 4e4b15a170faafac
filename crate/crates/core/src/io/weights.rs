//! `LMWT` checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic   "LMWT"
//! version u16 = 1
//! count   u32
//! entry*  name_len u16 | name (UTF-8) | dtype u8 (0 = f32) | rank u8 | dims u32 × rank | payload f32 × Π dims
//! ```

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result, WeightError};
use crate::model::LeMoReModel;
use crate::params::ParamStore;

pub const WEIGHT_MAGIC: &[u8; 4] = b"LMWT";
pub const WEIGHT_VERSION: u16 = 1;
pub const WEIGHT_DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

/// Every registry entry, buffers included, in registry order.
pub fn encode_weights(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    let count = u32::try_from(store.len()).map_err(|_| Error::invalid("too many entries"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (_, e) in store.iter() {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| Error::invalid(format!("entry name `{}` is too long", e.name)))?;
        let rank = u8::try_from(e.value.rank())
            .map_err(|_| Error::invalid(format!("entry `{}` has too many dimensions", e.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(WEIGHT_DTYPE_F32);
        out.push(rank);
        for &d in e.value.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::invalid(format!("entry `{}` dimension overflow", e.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in e.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], WeightError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(WeightError::Truncated {
                offset: self.pos,
                what: what.to_string(),
            }),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8, WeightError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, WeightError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32, WeightError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<Vec<WeightEntry>, WeightError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic").map_err(|_| WeightError::BadMagic)? != WEIGHT_MAGIC {
        return Err(WeightError::BadMagic);
    }
    let version = r.u16("version")?;
    if version != WEIGHT_VERSION {
        return Err(WeightError::UnsupportedVersion(version));
    }
    let count = r.u32("entry count")?;
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| WeightError::BadName { offset: at })?
            .to_string();
        let tag = r.u8("dtype")?;
        if tag != WEIGHT_DTYPE_F32 {
            return Err(WeightError::BadDtype { name, tag });
        }
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32(&format!("dims of `{name}`"))? as usize);
        }
        let what = format!("payload of `{name}`");
        let bytes_needed = dims
            .iter()
            .try_fold(4usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| WeightError::Truncated {
                offset: r.pos,
                what: what.clone(),
            })?;
        let payload = r.take(bytes_needed, &what)?;
        let values = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if !seen.insert(name.clone()) {
            return Err(WeightError::DuplicateEntry(name));
        }
        entries.push(WeightEntry { name, dims, values });
    }
    if r.pos != bytes.len() {
        return Err(WeightError::TrailingBytes {
            offset: r.pos,
            count: bytes.len() - r.pos,
        });
    }
    Ok(entries)
}

/// Copies decoded entries into `store`. Nothing is written unless every
/// name and shape matches the registry exactly.
pub fn apply_weights(store: &mut ParamStore, entries: &[WeightEntry]) -> Result<(), WeightError> {
    let mut ids = Vec::with_capacity(entries.len());
    for e in entries {
        let id = store
            .id_of(&e.name)
            .ok_or_else(|| WeightError::UnknownEntry(e.name.clone()))?;
        let expected = store.get(id).shape();
        if expected != e.dims.as_slice() {
            return Err(WeightError::ShapeMismatch {
                name: e.name.clone(),
                expected: expected.to_vec(),
                found: e.dims.clone(),
            });
        }
        ids.push(id);
    }
    let present: HashSet<&str> = entries.iter().map(|e| e.name.as_str()).collect();
    if let Some((_, missing)) = store
        .iter()
        .find(|(_, p)| !present.contains(p.name.as_str()))
    {
        return Err(WeightError::MissingEntry(missing.name.clone()));
    }
    for (id, e) in ids.into_iter().zip(entries) {
        for (dst, &v) in store.get_mut(id).data_mut().iter_mut().zip(&e.values) {
            *dst = f64::from(v);
        }
    }
    Ok(())
}

pub fn save_weights(model: &LeMoReModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_weights(model.store())?)?;
    Ok(())
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<Vec<WeightEntry>> {
    Ok(decode_weights(&std::fs::read(path)?)?)
}

pub fn load_weights(model: &mut LeMoReModel, path: impl AsRef<Path>) -> Result<()> {
    let entries = read_weights(path)?;
    Ok(apply_weights(model.store_mut(), &entries)?)
}
