//! Binary checkpoint format.
//!
//! ```text
//! magic            4 bytes  "ADC1"
//! version          u32 LE
//! record count     u32 LE
//! per record:      name length u32 LE, name UTF-8 bytes,
//!                  rows u64 LE, cols u64 LE, rows*cols f64 LE values
//! moments flag     u8 (0 = absent, 1 = present)
//! if present, per record in the same order:
//!                  step count u64 LE, m values f64 LE, v values f64 LE
//! ```

use std::path::Path;

use crate::error::{AdcError, Result};
use crate::nn::params::{ParamMatrix, ParamStore};

pub const MAGIC: &[u8; 4] = b"ADC1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub step_count: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<Tensor>,
    /// One entry per tensor when optimizer state is saved.
    pub moments: Option<Vec<Moments>>,
}

impl Checkpoint {
    /// Appends every parameter of `store` under `prefix/`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore, with_moments: bool) {
        if with_moments && self.moments.is_none() {
            self.moments = Some(
                self.tensors
                    .iter()
                    .map(|t| Moments {
                        step_count: 0,
                        m: vec![0.0; t.values.len()],
                        v: vec![0.0; t.values.len()],
                    })
                    .collect(),
            );
        }
        let mut moments = Vec::new();
        for (i, p) in store.iter().enumerate() {
            self.tensors.push(Tensor {
                name: format!("{prefix}/{}", p.name),
                rows: p.rows,
                cols: p.cols,
                values: p.values.clone(),
            });
            let (m, v) = (&store.adam_m[i], &store.adam_v[i]);
            moments.push(Moments {
                step_count: store.step_count,
                m: m.clone(),
                v: v.clone(),
            });
        }
        if let Some(m) = &mut self.moments {
            if with_moments {
                m.extend(moments);
            } else {
                m.extend(moments.into_iter().map(|mm| Moments {
                    step_count: 0,
                    m: vec![0.0; mm.m.len()],
                    v: vec![0.0; mm.v.len()],
                }));
            }
        }
    }

    pub fn push_meta(&mut self, name: &str, values: Vec<f64>) {
        let tensor = Tensor {
            name: format!("meta/{name}"),
            rows: values.len(),
            cols: 1,
            values,
        };
        if let Some(m) = &mut self.moments {
            m.push(Moments {
                step_count: 0,
                m: vec![0.0; tensor.values.len()],
                v: vec![0.0; tensor.values.len()],
            });
        }
        self.tensors.push(tensor);
    }

    pub fn meta(&self, name: &str) -> Option<&[f64]> {
        let full = format!("meta/{name}");
        self.tensors
            .iter()
            .find(|t| t.name == full)
            .map(|t| t.values.as_slice())
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}/");
        self.tensors.iter().any(|t| t.name.starts_with(&p))
    }

    /// Rebuilds the store saved under `prefix/`, restoring Adam state when present.
    pub fn store(&self, prefix: &str) -> Result<ParamStore> {
        let p = format!("{prefix}/");
        let mut store = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        let mut step = 0;
        for (i, t) in self.tensors.iter().enumerate() {
            let Some(name) = t.name.strip_prefix(&p) else { continue };
            store.insert(ParamMatrix::from_values(name, t.rows, t.cols, t.values.clone())?)?;
            if let Some(moments) = &self.moments {
                m.push(moments[i].m.clone());
                v.push(moments[i].v.clone());
                step = moments[i].step_count;
            }
        }
        if store.is_empty() {
            return Err(AdcError::Checkpoint(format!("no parameters under '{prefix}'")));
        }
        if self.moments.is_some() {
            store.set_optimizer_state(m, v, step)?;
        }
        Ok(store)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.rows as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols as u64).to_le_bytes());
            t.values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        match &self.moments {
            None => out.push(0),
            Some(moments) => {
                out.push(1);
                for m in moments {
                    out.extend_from_slice(&m.step_count.to_le_bytes());
                    m.m.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                    m.v.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(AdcError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(AdcError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| AdcError::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let values = r.f64s(rows.checked_mul(cols).ok_or_else(|| {
                AdcError::Checkpoint(format!("shape overflow for '{name}'"))
            })?)?;
            tensors.push(Tensor { name, rows, cols, values });
        }
        let moments = match r.take(1)?[0] {
            0 => None,
            1 => {
                let mut ms = Vec::with_capacity(count);
                for t in &tensors {
                    let step_count = r.u64()?;
                    let m = r.f64s(t.values.len())?;
                    let v = r.f64s(t.values.len())?;
                    ms.push(Moments { step_count, m, v });
                }
                Some(ms)
            }
            flag => return Err(AdcError::Checkpoint(format!("bad moments flag {flag}"))),
        };
        if r.pos != bytes.len() {
            return Err(AdcError::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { tensors, moments })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| AdcError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| AdcError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| AdcError::Checkpoint("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| AdcError::Checkpoint("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
