//! Binary checkpoints: magic `MFCKPT1`, a format version, the configuration,
//! every parameter entry, the learned step sizes and the outer optimizer
//! state. All integers and floats are little-endian.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::encoder::EncoderConfig;
use crate::meta::{LearningRates, MetaModel, MetaTrainer, OptimizerState};
use crate::params::ParamTree;

pub const MAGIC: &[u8; 7] = b"MFCKPT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

struct Out<W: Write>(W);

impl<W: Write> Out<W> {
    fn u32(&mut self, v: u32) -> io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn usize(&mut self, v: usize) -> io::Result<()> {
        self.u64(v as u64)
    }
    fn str(&mut self, s: &str) -> io::Result<()> {
        self.u32(s.len() as u32)?;
        self.0.write_all(s.as_bytes())
    }
    fn f64s(&mut self, v: &[f64]) -> io::Result<()> {
        self.usize(v.len())?;
        v.iter().try_for_each(|&x| self.f64(x))
    }
}

struct In<R: Read>(R);

/// Sanity cap on any length field, to fail fast on corrupt input.
const MAX_LEN: u64 = 1 << 32;

impl<R: Read> In<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => CheckpointError::Corrupt("truncated".into()),
            _ => CheckpointError::Io(e),
        })?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn usize(&mut self) -> Result<usize, CheckpointError> {
        let v = self.u64()?;
        if v > MAX_LEN {
            return Err(CheckpointError::Corrupt(format!("length {v} out of range")));
        }
        Ok(v as usize)
    }
    fn str(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        let mut b = vec![0u8; n];
        self.0.read_exact(&mut b).map_err(|_| CheckpointError::Corrupt("truncated string".into()))?;
        String::from_utf8(b).map_err(|_| CheckpointError::Corrupt("non-UTF-8 string".into()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>, CheckpointError> {
        let n = self.usize()?;
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn write_checkpoint<W: Write>(w: W, trainer: &MetaTrainer) -> io::Result<()> {
    let mut o = Out(w);
    let m = &trainer.model;
    let c = &m.encoder.cfg;
    o.0.write_all(MAGIC)?;
    o.u32(VERSION)?;
    for v in [c.vocab_size, c.model_dim, c.ff_dim, c.n_layers, c.n_heads, c.max_seq_len, m.d()] {
        o.usize(v)?;
    }
    o.f64(c.dropout)?;
    o.usize(m.params.len())?;
    for e in m.params.entries() {
        o.str(&e.name)?;
        o.str(&e.group)?;
        o.0.write_all(&[e.is_warp as u8, e.inner_adaptable as u8])?;
        o.usize(e.tensor.ndim())?;
        for &d in e.tensor.shape() {
            o.usize(d)?;
        }
        e.tensor.data().iter().try_for_each(|&x| o.f64(x))?;
    }
    o.usize(m.lrs.len())?;
    for (g, &a) in m.lrs.groups().iter().zip(m.lrs.values()) {
        o.str(g)?;
        o.f64(a)?;
    }
    let st = &trainer.optimizer;
    o.u64(st.updates)?;
    o.usize(st.first.len())?;
    for (f, s) in st.first.iter().zip(&st.second) {
        o.f64s(f)?;
        o.f64s(s)?;
    }
    o.0.flush()
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<MetaTrainer, CheckpointError> {
    let mut i = In(r);
    if &i.bytes::<7>()? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = i.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = i.usize()?;
    }
    let cfg = EncoderConfig {
        vocab_size: dims[0],
        model_dim: dims[1],
        ff_dim: dims[2],
        n_layers: dims[3],
        n_heads: dims[4],
        max_seq_len: dims[5],
        dropout: i.f64()?,
    };
    let n = i.usize()?;
    let mut tree = ParamTree::new();
    for _ in 0..n {
        let name = i.str()?;
        let group = i.str()?;
        let (warp, adaptable) = (i.u8()? != 0, i.u8()? != 0);
        let ndim = i.usize()?;
        let shape: Vec<usize> = (0..ndim).map(|_| i.usize()).collect::<Result<_, _>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).filter(|&l| l as u64 <= MAX_LEN);
        let len = len.ok_or_else(|| CheckpointError::Corrupt(format!("bad shape {shape:?} for {name}")))?;
        let data: Vec<f64> = (0..len).map(|_| i.f64()).collect::<Result<_, _>>()?;
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(format!("{name}: {e}")))?;
        if tree.index_of(&name).is_some() || (warp && adaptable) {
            return Err(CheckpointError::Corrupt(format!("invalid entry {name}")));
        }
        tree.push(name, t, group, warp, adaptable);
    }
    let n = i.usize()?;
    let mut groups = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        groups.push(i.str()?);
        values.push(i.f64()?);
    }
    let lrs = LearningRates::from_parts(groups, values).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let updates = i.u64()?;
    let n = i.usize()?;
    let mut first = Vec::with_capacity(n);
    let mut second = Vec::with_capacity(n);
    for _ in 0..n {
        first.push(i.f64s()?);
        second.push(i.f64s()?);
    }
    let mut rest = [0u8; 1];
    if i.0.read(&mut rest)? != 0 {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    let model = MetaModel::from_parts(cfg, dims[6], tree, lrs).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    Ok(MetaTrainer {
        model,
        optimizer: OptimizerState { updates, first, second },
    })
}

pub fn save(path: &Path, trainer: &MetaTrainer) -> io::Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), trainer)
}

pub fn load(path: &Path) -> Result<MetaTrainer, CheckpointError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
