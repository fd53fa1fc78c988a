//! Little-endian binary codecs for parameter files (`LCMP`) and feature
//! containers (`LCMA` atlases, `LCMC` corpus splits), each ending in a CRC32
//! of every preceding byte.

use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{Dense, ModelDims, ModelParams};

pub const PARAMS_MAGIC: [u8; 4] = *b"LCMP";
pub const ATLAS_MAGIC: [u8; 4] = *b"LCMA";
pub const CORPUS_MAGIC: [u8; 4] = *b"LCMC";
pub const FORMAT_VERSION: u32 = 1;

fn corrupt(offset: usize, reason: impl ToString) -> Error {
    Error::Corrupt { offset, reason: reason.to_string() }
}

/// Cursor over a byte slice that reports offsets on failure.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(corrupt(self.pos, alloc::format!("truncated while reading {what}")));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Splits off and checks the trailing CRC32, returning the body.
fn verify_crc(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 4 {
        return Err(corrupt(0, "file shorter than its checksum"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(corrupt(body.len(), alloc::format!("CRC32 mismatch (stored {stored:08x}, computed {actual:08x})")));
    }
    Ok(body)
}

fn check_header(r: &mut Reader<'_>, magic: [u8; 4]) -> Result<()> {
    let got = r.take(4, "magic")?;
    if got != magic {
        return Err(corrupt(0, alloc::format!("bad magic {:?}, expected {:?}", got, core::str::from_utf8(&magic).unwrap())));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(corrupt(4, alloc::format!("unsupported format version {version}")));
    }
    Ok(())
}

fn seal(mut body: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&body);
    body.extend_from_slice(&crc.to_le_bytes());
    body
}

/// Canonical parameter bytes (everything in an `LCMP` file except the CRC).
pub fn params_body(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.param_count() * 8);
    out.extend_from_slice(&PARAMS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let layers: Vec<&Dense> = params.layers().collect();
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for l in &layers {
        out.extend_from_slice(&(l.inputs as u32).to_le_bytes());
        out.extend_from_slice(&(l.outputs as u32).to_le_bytes());
    }
    for l in &layers {
        for v in l.weight.iter().chain(&l.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn encode_params(params: &ModelParams) -> Vec<u8> {
    seal(params_body(params))
}

/// Parses an `LCMP` file. Encoder layers come first, then the two head layers.
pub fn decode_params(bytes: &[u8]) -> Result<ModelParams> {
    let body = verify_crc(bytes)?;
    let mut r = Reader { bytes: body, pos: 0 };
    check_header(&mut r, PARAMS_MAGIC)?;
    let count_at = r.pos;
    let count = r.u32("layer count")? as usize;
    if count < 3 {
        return Err(corrupt(count_at, alloc::format!("need at least 3 layers, found {count}")));
    }
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.pos;
        let i = r.u32("layer inputs")? as usize;
        let o = r.u32("layer outputs")? as usize;
        if i == 0 || o == 0 {
            return Err(corrupt(at, "zero layer dimension"));
        }
        if let Some(&(_, prev)) = shapes.last() {
            // The head takes |u - v| of encoder outputs, so widths chain throughout.
            if prev != i {
                return Err(corrupt(at, alloc::format!("layer input {i} does not match previous output {prev}")));
            }
        }
        shapes.push((i, o));
    }
    if shapes[count - 1].1 != 1 {
        return Err(corrupt(r.pos, "head must end in a single logit"));
    }
    let enc = &shapes[..count - 2];
    let dims = ModelDims {
        input: enc[0].0,
        encoder_hidden: enc[..enc.len() - 1].iter().map(|s| s.1).collect(),
        feature: enc[enc.len() - 1].1,
        head_hidden: shapes[count - 2].1,
    };
    let mut params = ModelParams::zeros(dims).map_err(|e| corrupt(count_at, e))?;
    for l in params.layers_mut() {
        for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
            let at = r.pos;
            *v = f64::from_le_bytes(r.take(8, "parameter payload")?.try_into().unwrap());
            if !v.is_finite() {
                return Err(corrupt(at, "non-finite parameter"));
            }
        }
    }
    if r.pos != body.len() {
        return Err(corrupt(r.pos, "trailing bytes after parameter payload"));
    }
    Ok(params)
}

/// Rows of `f32` vectors with per-row ids and identities (`-1` when unknown)
/// and a 32-byte fingerprint.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub magic: [u8; 4],
    pub dim: usize,
    pub fingerprint: [u8; 32],
    pub ids: Vec<u64>,
    pub identities: Vec<i64>,
    pub payload: Vec<f32>,
}

impl Container {
    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let n = self.rows();
        let mut out = Vec::with_capacity(52 + n * (16 + 4 * self.dim));
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        for id in &self.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        for id in &self.identities {
            out.extend_from_slice(&id.to_le_bytes());
        }
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        seal(out)
    }

    pub fn decode(bytes: &[u8], magic: [u8; 4]) -> Result<Self> {
        let body = verify_crc(bytes)?;
        let mut r = Reader { bytes: body, pos: 0 };
        check_header(&mut r, magic)?;
        let n_at = r.pos;
        let n = r.u64("row count")? as usize;
        let dim = r.u32("dimension")? as usize;
        let expected = 52usize.checked_add(n.checked_mul(16 + 4 * dim).unwrap_or(usize::MAX));
        if expected != Some(body.len()) {
            return Err(corrupt(n_at, alloc::format!("{n} rows of dimension {dim} do not match a {}-byte body", body.len())));
        }
        let fingerprint: [u8; 32] = r.take(32, "fingerprint")?.try_into().unwrap();
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            ids.push(r.u64("id table")?);
        }
        let mut identities = Vec::with_capacity(n);
        for _ in 0..n {
            identities.push(r.u64("identity table")? as i64);
        }
        let mut payload = Vec::with_capacity(n * dim);
        for _ in 0..n * dim {
            let at = r.pos;
            let v = f32::from_le_bytes(r.take(4, "payload")?.try_into().unwrap());
            if !v.is_finite() {
                return Err(corrupt(at, "non-finite value in payload"));
            }
            payload.push(v);
        }
        Ok(Container { magic, dim, fingerprint, ids, identities, payload })
    }
}
