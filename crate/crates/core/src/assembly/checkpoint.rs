//! Versioned little-endian binary checkpoints.
//!
//! Layout: magic `MADICKPT`, u32 version, u32-length-prefixed JSON model
//! config, vocabulary (u32 count, then length-prefixed strings), parameter
//! records (u32 name length, name, u32 rank, u32 dims, f32 payload), then the
//! codebook state (u8 initialised flag, u32 levels, per level u32 rows, cols,
//! window and f64 codes, counts and sums).

use std::path::Path;

use super::model::{Madi, ModelConfig};
use crate::diffcore::Tensor;
use crate::encoders::TextVocab;
use crate::error::{MadiError, Result};

pub const MAGIC: &[u8; 8] = b"MADICKPT";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| MadiError::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn to_bytes(model: &Madi) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_string(&model.config).map_err(|e| MadiError::Checkpoint(e.to_string()))?;
    put_str(&mut out, &cfg)?;
    put_u32(&mut out, model.vocab.len())?;
    for tok in model.vocab.tokens() {
        put_str(&mut out, tok)?;
    }
    put_u32(&mut out, model.store.len())?;
    for (_, name, value) in model.store.iter() {
        put_str(&mut out, name)?;
        put_u32(&mut out, value.rank())?;
        for &d in value.shape() {
            put_u32(&mut out, d)?;
        }
        for &v in value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let h = &model.codebooks;
    out.push(h.initialized as u8);
    put_u32(&mut out, h.levels.len())?;
    for l in &h.levels {
        put_u32(&mut out, l.codes.rows())?;
        put_u32(&mut out, l.codes.cols())?;
        put_u32(&mut out, l.window)?;
        for &v in l.codes.data().iter().chain(&l.counts).chain(l.sums.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(MadiError::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as f64)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| MadiError::Checkpoint(e.to_string()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Madi> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(MadiError::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(MadiError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let config: ModelConfig =
        serde_json::from_str(&r.string()?).map_err(|e| MadiError::Checkpoint(format!("config: {e}")))?;
    let nv = r.u32()?;
    let toks = (0..nv).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let vocab = TextVocab::from_tokens(&toks);
    if vocab.tokens() != toks.as_slice() {
        return Err(MadiError::Checkpoint("vocabulary does not start with the special tokens".into()));
    }
    let mut model = Madi::new(config, vocab, 0)?;
    let np = r.u32()?;
    if np != model.store.len() {
        return Err(MadiError::Checkpoint(format!(
            "checkpoint has {np} parameters, model expects {}",
            model.store.len()
        )));
    }
    for _ in 0..np {
        let name = r.string()?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let id = model
            .store
            .by_name(&name)
            .ok_or_else(|| MadiError::Checkpoint(format!("unknown parameter {name}")))?;
        model.store.set(id, Tensor::new(shape, data)?)?;
    }
    let h = &mut model.codebooks;
    h.initialized = r.take(1)?[0] != 0;
    let levels = r.u32()?;
    if levels != h.levels.len() {
        return Err(MadiError::Checkpoint(format!("{levels} codebook levels, config says {}", h.levels.len())));
    }
    for l in &mut h.levels {
        let (rows, cols, window) = (r.u32()?, r.u32()?, r.u32()?);
        if rows != l.codes.rows() || cols != l.codes.cols() || window != l.window {
            return Err(MadiError::Checkpoint("codebook layout does not match config".into()));
        }
        l.codes = Tensor::matrix(rows, cols, r.f64s(rows * cols)?)?;
        l.counts = r.f64s(rows)?;
        l.sums = Tensor::matrix(rows, cols, r.f64s(rows * cols)?)?;
    }
    if r.pos != buf.len() {
        return Err(MadiError::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(model)
}

pub fn save(model: &Madi, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?).map_err(|e| MadiError::io(path, e))
}

pub fn load(path: &Path) -> Result<Madi> {
    let buf = std::fs::read(path).map_err(|e| MadiError::io(path, e))?;
    from_bytes(&buf)
}
