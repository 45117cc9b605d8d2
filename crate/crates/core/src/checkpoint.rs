//! Versioned binary checkpoints: architecture, every named parameter
//! tensor, both prototype stores and the step counter.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "SPGCKPT\0" | version u32
//! architecture: num_classes u64, encoder widths, decoder widths,
//!               projection_hidden u64, projection_dim u64
//! step u64
//! tensor count u64, then per tensor: name, rows u64, cols u64, f64 data
//! aux store, main store
//! ```
//!
//! Width lists are a u64 length followed by u64 entries; names are a u64
//! byte length followed by UTF-8 bytes.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Architecture, Model};
use crate::linalg::Tensor2D;
use crate::prototypes::PrototypeStore;

pub const MAGIC: &[u8; 8] = b"SPGCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub aux_store: PrototypeStore,
    pub main_store: PrototypeStore,
    pub step: u64,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usizes(&mut self, v: &[usize]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.u64(x as u64));
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn store(&mut self, s: &PrototypeStore) {
        self.u64(s.num_classes as u64);
        self.u64(s.dim as u64);
        self.f64(s.alpha);
        self.0.push(s.renormalize as u8);
        for c in 0..s.num_classes {
            match &s.prototypes[c] {
                Some(p) => {
                    self.0.push(1);
                    p.iter().for_each(|&v| self.f64(v));
                }
                None => self.0.push(0),
            }
            self.u64(s.updates[c]);
            match s.last_seen[c] {
                Some(t) => {
                    self.0.push(1);
                    self.u64(t);
                }
                None => self.0.push(0),
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self
            .buf
            .get(self.pos..end)
            .ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| CheckpointError::Corrupt(format!("implausible length {v}")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.len()?;
        (0..n).map(|_| self.len()).collect()
    }
    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(CheckpointError::Corrupt(format!("bad flag byte {b}"))),
        }
    }
    fn store(&mut self) -> Result<PrototypeStore> {
        let num_classes = self.len()?;
        let dim = self.len()?;
        let alpha = self.f64()?;
        let renormalize = self.flag()?;
        let mut store = PrototypeStore::new(num_classes, dim, alpha, renormalize)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        for c in 0..num_classes {
            if self.flag()? {
                store.prototypes[c] = Some((0..dim).map(|_| self.f64()).collect::<Result<_>>()?);
            }
            store.updates[c] = self.u64()?;
            if self.flag()? {
                store.last_seen[c] = Some(self.u64()?);
            }
        }
        Ok(store)
    }
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&VERSION.to_le_bytes());
    let arch = &ckpt.model.arch;
    w.u64(arch.num_classes as u64);
    w.usizes(&arch.encoder_widths);
    w.usizes(&arch.decoder_widths);
    w.u64(arch.projection_hidden as u64);
    w.u64(arch.projection_dim as u64);
    w.u64(ckpt.step);
    let params = ckpt.model.params();
    w.u64(params.len() as u64);
    for (name, p) in params {
        w.bytes(name.as_bytes());
        w.u64(p.value.rows() as u64);
        w.u64(p.value.cols() as u64);
        p.value.data().iter().for_each(|&v| w.f64(v));
    }
    w.store(&ckpt.aux_store);
    w.store(&ckpt.main_store);
    w.0
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let arch = Architecture {
        num_classes: r.len()?,
        encoder_widths: r.usizes()?,
        decoder_widths: r.usizes()?,
        projection_hidden: r.len()?,
        projection_dim: r.len()?,
    };
    if arch.num_classes < 2 || arch.encoder_widths.is_empty() || arch.decoder_widths.is_empty() {
        return Err(CheckpointError::Corrupt("invalid architecture".into()));
    }
    let step = r.u64()?;
    let mut model = Model::new(
        arch,
        &mut ChaCha8Rng::seed_from_u64(0),
        &mut ChaCha8Rng::seed_from_u64(0),
    );
    let count = r.len()?;
    let mut params = model.params_mut();
    if count != params.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{count} tensors stored, architecture has {}",
            params.len()
        )));
    }
    for (expected, p) in params.iter_mut() {
        let n = r.len()?;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?;
        if name != expected {
            return Err(CheckpointError::Corrupt(format!(
                "expected tensor {expected}, found {name}"
            )));
        }
        let rows = r.len()?;
        let cols = r.len()?;
        if (rows, cols) != p.value.shape() {
            return Err(CheckpointError::Corrupt(format!(
                "tensor {name} has shape {rows}x{cols}, expected {:?}",
                p.value.shape()
            )));
        }
        let data: Vec<f64> = (0..rows * cols).map(|_| r.f64()).collect::<Result<_>>()?;
        p.value = Tensor2D::from_vec(rows, cols, data)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        p.zero_grad();
    }
    drop(params);
    let aux_store = r.store()?;
    let main_store = r.store()?;
    if r.pos != buf.len() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok(Checkpoint {
        model,
        aux_store,
        main_store,
        step,
    })
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&encode(ckpt)).map_err(io)?;
    f.flush().map_err(io)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(io)?
        .read_to_end(&mut buf)
        .map_err(io)?;
    decode(&buf)
}
