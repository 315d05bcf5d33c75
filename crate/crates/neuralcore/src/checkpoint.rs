//! Binary checkpoint format.
//!
//! All integers and reals are little-endian. Strings are a `u32` byte length
//! followed by UTF-8.
//!
//! ```text
//! magic      8 bytes  "NCORECKP"
//! version    u32      1
//! sections   u32
//!   name       string
//!   step_count u64
//!   tensors    u32
//!     name     string
//!     rank     u32
//!     dims     u64 × rank
//!     values   f64 × product(dims)
//! adam       u8       0 = absent, 1 = present
//!   lr, beta1, beta2, eps   f64 × 4
//!   entries  u32
//!     name     string
//!     len      u64
//!     first    f64 × len
//!     second   f64 × len
//! ```
//!
//! Values are written with `to_le_bytes`, so a save/load round trip is
//! bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use crate::optim::{Adam, AdamConfig};
use crate::tensor::{ParamSet, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"NCORECKP";
pub const VERSION: u32 = 1;

/// A named, ordered group of tensors with a step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub step_count: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Section {
    pub fn from_params(name: impl Into<String>, params: &ParamSet) -> Self {
        Self {
            name: name.into(),
            step_count: params.step_count(),
            tensors: params.iter().map(|(n, t)| (n.to_string(), t.detached())).collect(),
        }
    }

    pub fn to_params(&self) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        for (n, t) in &self.tensors {
            p.insert(n.clone(), t.clone())?;
        }
        p.set_step_count(self.step_count);
        Ok(p)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub sections: Vec<Section>,
    pub adam: Option<Adam>,
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u32(self.sections.len() as u32);
        for s in &self.sections {
            w.str(&s.name);
            w.u64(s.step_count);
            w.u32(s.tensors.len() as u32);
            for (name, t) in &s.tensors {
                w.str(name);
                w.u32(t.rank() as u32);
                t.shape().iter().for_each(|&d| w.u64(d as u64));
                t.data().iter().for_each(|&v| w.f64(v));
            }
        }
        match &self.adam {
            None => w.0.push(0),
            Some(adam) => {
                w.0.push(1);
                let c = adam.config();
                [c.lr, c.beta1, c.beta2, c.eps].into_iter().for_each(|v| w.f64(v));
                let moments: Vec<_> = adam.moments().collect();
                w.u32(moments.len() as u32);
                for (name, m, v) in moments {
                    w.str(name);
                    w.u64(m.len() as u64);
                    m.iter().for_each(|&x| w.f64(x));
                    v.iter().for_each(|&x| w.f64(x));
                }
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n_sections = r.u32()?;
        let mut sections = Vec::with_capacity(n_sections as usize);
        for _ in 0..n_sections {
            let name = r.str()?;
            let step_count = r.u64()?;
            let n_tensors = r.u32()?;
            let mut tensors = Vec::with_capacity(n_tensors as usize);
            for _ in 0..n_tensors {
                let tname = r.str()?;
                let rank = r.u32()? as usize;
                let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let n: usize = shape.iter().product();
                let data = r.f64s(n)?;
                tensors.push((tname, Tensor::new(&shape, data)?));
            }
            sections.push(Section {
                name,
                step_count,
                tensors,
            });
        }
        let adam = match r.take(1)?[0] {
            0 => None,
            1 => {
                let config = AdamConfig {
                    lr: r.f64()?,
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    eps: r.f64()?,
                };
                let n = r.u32()?;
                let mut moments = BTreeMap::new();
                for _ in 0..n {
                    let name = r.str()?;
                    let len = r.u64()? as usize;
                    let m = r.f64s(len)?;
                    let v = r.f64s(len)?;
                    moments.insert(name, (m, v));
                }
                Some(Adam::from_parts(config, moments)?)
            }
            other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { sections, adam })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}
