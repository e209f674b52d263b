//! Binary checkpoint format. All integers and floats are little-endian.
//!
//! ```text
//! magic      8 bytes  "CRWDCKPT"
//! version    u32      (currently 1)
//! hash       u32 length + UTF-8 config hash
//! meta       u64 length + UTF-8 JSON (trainer metadata)
//! params     param block
//! ema        u8 flag (0/1) [+ param block]
//! best       u8 flag (0/1) [+ param block]
//! frozen     u8 flag (0/1) [+ frozen block]
//!
//! param block:
//!   u64 optimizer step counter
//!   u32 count, then per parameter in name order:
//!   u32 length + UTF-8 name
//!   f64 lr_scale, f64 l1, f64 l2, u8 trainable
//!   u32 ndim, u64 per dimension
//!   f64 payloads: value, Adam first moment, Adam second moment
//!
//! frozen block (phase-2 cache of the training split):
//!   u64 examples, u32 heads, u32 classes, u32 hidden
//!   per example: f64[heads·classes] head predictions, f64[hidden] hidden
//!   vector, u32 labeler count + u32 per labeler, f64[classes] target
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamGroup, ParamSet, Tensor};
use crate::weighting::{FrozenExample, FrozenPredictions};

pub const MAGIC: &[u8; 8] = b"CRWDCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub meta: String,
    pub params: ParamSet,
    pub ema: Option<ParamSet>,
    pub best: Option<ParamSet>,
    pub frozen: Option<FrozenPredictions>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn str32(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }

    fn params(&mut self, ps: &ParamSet) {
        self.u64(ps.step());
        self.u32(ps.iter().count());
        for (name, p) in ps.iter() {
            self.str32(name);
            self.f64s(&[p.group.lr_scale, p.group.l1, p.group.l2]);
            self.u8(p.group.trainable as u8);
            self.u32(p.value.ndim());
            for &d in p.value.shape() {
                self.u64(d as u64);
            }
            self.f64s(p.value.data());
            self.f64s(p.first_moment().data());
            self.f64s(p.second_moment().data());
        }
    }

    fn frozen(&mut self, f: &FrozenPredictions) {
        self.u64(f.examples.len() as u64);
        self.u32(f.heads);
        self.u32(f.classes);
        self.u32(f.hidden);
        for e in &f.examples {
            self.f64s(e.probs.data());
            self.f64s(&e.hidden);
            self.u32(e.labelers.len());
            for &l in &e.labelers {
                self.u32(l);
            }
            self.f64s(&e.target);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Checkpoint(format!("bad flag byte {b}"))),
        }
    }

    fn params(&mut self) -> Result<ParamSet> {
        let step = self.u64()?;
        let count = self.u32()?;
        let mut ps = ParamSet::new();
        for _ in 0..count {
            let len = self.u32()?;
            let name = self.string(len)?;
            let g = self.f64s(3)?;
            let trainable = self.flag()?;
            let group = ParamGroup { lr_scale: g[0], l1: g[1], l2: g[2], trainable };
            let nd = self.u32()?;
            let shape = (0..nd).map(|_| Ok(self.u64()? as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let value = Tensor::new(&shape, self.f64s(n)?)?;
            let m = Tensor::new(&shape, self.f64s(n)?)?;
            let v = Tensor::new(&shape, self.f64s(n)?)?;
            ps.insert_with_state(name, value, m, v, group)?;
        }
        ps.set_step(step);
        Ok(ps)
    }

    fn frozen(&mut self) -> Result<FrozenPredictions> {
        let n = self.u64()? as usize;
        let heads = self.u32()?;
        let classes = self.u32()?;
        let hidden = self.u32()?;
        let mut examples = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let probs = Tensor::new(&[heads, classes], self.f64s(heads * classes)?)?;
            let h = self.f64s(hidden)?;
            let nl = self.u32()?;
            let labelers = (0..nl).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
            let target = self.f64s(classes)?;
            examples.push(FrozenExample { probs, hidden: h, labelers, target });
        }
        Ok(FrozenPredictions { heads, classes, hidden, examples })
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION as usize);
        w.str32(&self.config_hash);
        w.u64(self.meta.len() as u64);
        w.0.extend_from_slice(self.meta.as_bytes());
        w.params(&self.params);
        for extra in [&self.ema, &self.best] {
            w.u8(extra.is_some() as u8);
            if let Some(p) = extra {
                w.params(p);
            }
        }
        w.u8(self.frozen.is_some() as u8);
        if let Some(f) = &self.frozen {
            w.frozen(f);
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hl = r.u32()?;
        let config_hash = r.string(hl)?;
        let ml = r.u64()? as usize;
        let meta = r.string(ml)?;
        let params = r.params()?;
        let ema = if r.flag()? { Some(r.params()?) } else { None };
        let best = if r.flag()? { Some(r.params()?) } else { None };
        let frozen = if r.flag()? { Some(r.frozen()?) } else { None };
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { config_hash, meta, params, ema, best, frozen })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::data::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fails unless the checkpoint was written under the config with `hash`.
    pub fn expect_hash(&self, hash: &str) -> Result<()> {
        if self.config_hash != hash {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {} vs config {hash}",
                self.config_hash
            )));
        }
        Ok(())
    }
}
