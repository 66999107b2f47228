//! Little-endian checkpoint container: magic `DRMC`, a `u32` version, a
//! `u32` record count, then named records
//! `{name_len u32, name, dtype u8, ndim u32, dims u64.., payload}`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{CheckpointError, Result};

pub const MAGIC: [u8; 4] = *b"DRMC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    Bytes(Vec<u8>),
}

impl Payload {
    fn dtype(&self) -> u8 {
        match self {
            Payload::F32(_) => 1,
            Payload::F64(_) => 2,
            Payload::Bytes(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::Bytes(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl Record {
    pub fn f32(shape: &[usize], data: Vec<f32>) -> Self {
        Self {
            shape: shape.to_vec(),
            payload: Payload::F32(data),
        }
    }

    pub fn f64(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            payload: Payload::F64(data),
        }
    }

    pub fn bytes(data: Vec<u8>) -> Self {
        Self {
            shape: vec![data.len()],
            payload: Payload::Bytes(data),
        }
    }
}

pub type Records = BTreeMap<String, Record>;

pub fn encode(records: &Records) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, rec) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rec.payload.dtype());
        out.extend_from_slice(&(rec.shape.len() as u32).to_le_bytes());
        for &d in &rec.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &rec.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::Bytes(v) => out.extend_from_slice(v),
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(format!(
                "{what}: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> std::result::Result<Records, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32("record count")?;
    let mut records = Records::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(len, "name")?.to_vec())
            .map_err(|_| CheckpointError::Malformed("record name is not UTF-8".into()))?;
        let dtype = r.take(1, "dtype")?[0];
        let ndim = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64("dims")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed(format!("{name}: shape overflows")))?;
        let payload = match dtype {
            1 => Payload::F32(
                r.take(numel.saturating_mul(4), &name)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            2 => Payload::F64(
                r.take(numel.saturating_mul(8), &name)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            3 => Payload::Bytes(r.take(numel, &name)?.to_vec()),
            other => {
                return Err(CheckpointError::Malformed(format!(
                    "{name}: unknown dtype {other}"
                )))
            }
        };
        debug_assert_eq!(payload.len(), numel);
        records.insert(name, Record { shape, payload });
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after last record",
            buf.len() - r.pos
        )));
    }
    Ok(records)
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save(path: &Path, records: &Records) -> Result<()> {
    write_atomic(path, &encode(records))
}

pub fn load(path: &Path) -> Result<Records> {
    let bytes = fs::read(path)?;
    Ok(decode(&bytes)?)
}

pub fn take_f32(
    records: &mut Records,
    name: &str,
    shape: &[usize],
) -> std::result::Result<Vec<f32>, CheckpointError> {
    let rec = records
        .remove(name)
        .ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
    if rec.shape != shape {
        return Err(CheckpointError::ShapeMismatch {
            name: name.to_string(),
            found: rec.shape,
            expected: shape.to_vec(),
        });
    }
    match rec.payload {
        Payload::F32(v) => Ok(v),
        _ => Err(CheckpointError::Malformed(format!("{name}: expected f32 data"))),
    }
}

pub fn take_f64(records: &mut Records, name: &str) -> std::result::Result<Vec<f64>, CheckpointError> {
    match records.remove(name) {
        Some(Record {
            payload: Payload::F64(v),
            ..
        }) => Ok(v),
        Some(_) => Err(CheckpointError::Malformed(format!("{name}: expected f64 data"))),
        None => Err(CheckpointError::Missing(name.to_string())),
    }
}

pub fn take_bytes(records: &mut Records, name: &str) -> std::result::Result<Vec<u8>, CheckpointError> {
    match records.remove(name) {
        Some(Record {
            payload: Payload::Bytes(v),
            ..
        }) => Ok(v),
        Some(_) => Err(CheckpointError::Malformed(format!("{name}: expected bytes"))),
        None => Err(CheckpointError::Missing(name.to_string())),
    }
}
