//! Binary checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! b"HPNCKPT\0" | version u32 | hash len u32 | hash bytes | meta len u32 | meta bytes
//! n_params u32 | n_buffers u32
//! per param:  rank u32 | dims u64… | value f64… | rms cache f64… | momentum f64…
//! per buffer: rank u32 | dims u64… | value f64…
//! ```
//!
//! A text manifest of names and shapes is written next to the binary file
//! with the extension `.manifest`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Result, TensorError};
use crate::param::ParamStore;

const MAGIC: &[u8; 8] = b"HPNCKPT\0";
pub const VERSION: u32 = 1;

pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest")
}

fn dims_str(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

pub fn manifest(store: &ParamStore) -> String {
    let mut s = String::new();
    for p in store.params() {
        s.push_str(&format!("param {} group={} {}\n", p.name, p.group, dims_str(p.value.shape())));
    }
    for b in store.buffers() {
        s.push_str(&format!("buffer {} {}\n", b.name, dims_str(b.value.shape())));
    }
    s
}

pub fn encode(store: &ParamStore, config_hash: &[u8], meta: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_scalars() * 24);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config_hash.len() as u32).to_le_bytes());
    out.extend_from_slice(config_hash);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta);
    out.extend_from_slice(&(store.params().len() as u32).to_le_bytes());
    out.extend_from_slice(&(store.buffers().len() as u32).to_le_bytes());
    let put_shape = |out: &mut Vec<u8>, shape: &[usize]| {
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    };
    for p in store.params() {
        put_shape(&mut out, p.value.shape());
        for t in [&p.value, &p.cache, &p.momentum] {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    for b in store.buffers() {
        put_shape(&mut out, b.value.shape());
        for v in b.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(path: &Path, store: &ParamStore, config_hash: &[u8], meta: &[u8]) -> Result<()> {
    let bytes = encode(store, config_hash, meta);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    fs::write(manifest_path(path), manifest(store))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(TensorError::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, dst: &mut [f64]) -> Result<()> {
        let bytes = self.take(dst.len() * 8)?;
        for (d, c) in dst.iter_mut().zip(bytes.chunks_exact(8)) {
            *d = f64::from_le_bytes(c.try_into().unwrap());
        }
        Ok(())
    }

    fn shape(&mut self) -> Result<Vec<usize>> {
        let rank = self.u32()? as usize;
        (0..rank).map(|_| self.u64().map(|d| d as usize)).collect()
    }
}

/// Restores `store` in place from `bytes`, which must have been produced
/// for the same architecture. Returns the metadata blob.
pub fn decode_into(bytes: &[u8], store: &mut ParamStore, config_hash: &[u8]) -> Result<Vec<u8>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = r.u32()? as usize;
    if r.take(hlen)? != config_hash {
        return Err(TensorError::Checkpoint("architecture config hash mismatch".into()));
    }
    let mlen = r.u32()? as usize;
    let meta = r.take(mlen)?.to_vec();
    let (np, nb) = (r.u32()? as usize, r.u32()? as usize);
    if np != store.params().len() || nb != store.buffers().len() {
        return Err(TensorError::Checkpoint(format!(
            "expected {} params / {} buffers, file has {np} / {nb}",
            store.params().len(),
            store.buffers().len()
        )));
    }
    for p in store.params_mut() {
        let shape = r.shape()?;
        if shape != p.value.shape() {
            return Err(TensorError::Checkpoint(format!(
                "{}: shape {:?} in file, {:?} expected",
                p.name,
                shape,
                p.value.shape()
            )));
        }
        r.f64s(p.value.data_mut())?;
        r.f64s(p.cache.data_mut())?;
        r.f64s(p.momentum.data_mut())?;
        p.grad.data_mut().fill(0.0);
    }
    for b in store.buffers_mut() {
        let shape = r.shape()?;
        if shape != b.value.shape() {
            return Err(TensorError::Checkpoint(format!("{}: shape mismatch", b.name)));
        }
        r.f64s(b.value.data_mut())?;
    }
    if r.pos != bytes.len() {
        return Err(TensorError::Checkpoint("trailing bytes".into()));
    }
    Ok(meta)
}

pub fn load_into(path: &Path, store: &mut ParamStore, config_hash: &[u8]) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    decode_into(&bytes, store, config_hash)
}
