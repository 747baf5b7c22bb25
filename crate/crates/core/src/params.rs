//! Named numeric tensors and their binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"GRPK" | version: u32 | count: u32
//! count x ( name_len: u32 | name: utf-8 | ndim: u32 | dims: ndim x u64 )
//! all tensor data as f64, in header order
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"GRPK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamError {
    #[error("tensor `{name}`: shape {shape:?} needs {expected} values, got {got}")]
    ShapeData {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("parameter sets differ: {0}")]
    Mismatch(String),
    #[error("unknown tensor `{0}`")]
    Unknown(String),
    #[error("checkpoint: {0}")]
    Format(String),
    #[error("checkpoint io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Name-ordered collection of flat tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterMap {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        data: Vec<f64>,
    ) -> Result<(), ParamError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(ParamError::ShapeData {
                name: name.into(),
                shape,
                expected,
                got: data.len(),
            });
        }
        self.tensors
            .insert(name.to_string(), Tensor { shape, data });
        Ok(())
    }

    pub fn with(
        mut self,
        name: &str,
        shape: Vec<usize>,
        data: Vec<f64>,
    ) -> Result<Self, ParamError> {
        self.insert(name, shape, data)?;
        Ok(self)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ParamError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ParamError::Unknown(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, ParamError> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| ParamError::Unknown(name.into()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    /// Same names with the same shapes.
    pub fn check_layout(&self, other: &ParameterMap) -> Result<(), ParamError> {
        if self.tensors.len() != other.tensors.len() {
            return Err(ParamError::Mismatch(format!(
                "{} tensors vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for ((na, a), (nb, b)) in self.tensors.iter().zip(&other.tensors) {
            if na != nb {
                return Err(ParamError::Mismatch(format!("`{na}` vs `{nb}`")));
            }
            if a.shape != b.shape {
                return Err(ParamError::Mismatch(format!(
                    "`{na}` has shape {:?} vs {:?}",
                    a.shape, b.shape
                )));
            }
        }
        Ok(())
    }

    /// Elementwise combination of maps with identical layout.
    pub fn zip_with(
        maps: &[&ParameterMap],
        mut f: impl FnMut(&str, &[&[f64]]) -> Vec<f64>,
    ) -> Result<ParameterMap, ParamError> {
        let first = maps
            .first()
            .ok_or_else(|| ParamError::Mismatch("no parameter maps".into()))?;
        for m in &maps[1..] {
            first.check_layout(m)?;
        }
        let mut out = ParameterMap::new();
        for (name, t) in &first.tensors {
            let cols: Vec<&[f64]> = maps
                .iter()
                .map(|m| m.tensors[name].data.as_slice())
                .collect();
            out.insert(name, t.shape.clone(), f(name, &cols))?;
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.num_values() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
        }
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ParamError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(ParamError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(ParamError::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut header = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| ParamError::Format("tensor name is not utf-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(
                    usize::try_from(r.u64()?)
                        .map_err(|_| ParamError::Format("dimension overflow".into()))?,
                );
            }
            header.push((name, shape));
        }
        let mut map = ParameterMap::new();
        for (name, shape) in header {
            let n = shape
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .ok_or_else(|| ParamError::Format("tensor too large".into()))?;
            if n > (bytes.len() - r.pos) / 8 {
                return Err(ParamError::Format("truncated tensor data".into()));
            }
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            if map.tensors.contains_key(&name) {
                return Err(ParamError::Format(format!("duplicate tensor `{name}`")));
            }
            map.insert(&name, shape, data)?;
        }
        if r.pos != bytes.len() {
            return Err(ParamError::Format("trailing bytes".into()));
        }
        Ok(map)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ParamError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| ParamError::Io(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ParamError> {
        let bytes = std::fs::read(path).map_err(|e| ParamError::Io(e.to_string()))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ParamError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ParamError::Format("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ParamError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, ParamError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64, ParamError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// `(1 - alpha) * reference + alpha * current`, elementwise.
pub fn blend(
    reference: &ParameterMap,
    current: &ParameterMap,
    alpha: f64,
) -> Result<ParameterMap, ParamError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ParamError::Mismatch(format!(
            "blend rate {alpha} outside [0, 1]"
        )));
    }
    ParameterMap::zip_with(&[reference, current], |_, c| {
        c[0].iter()
            .zip(c[1])
            .map(|(r, x)| (1.0 - alpha) * r + alpha * x)
            .collect()
    })
}
