//! Binary tensor container.
//!
//! Layout: `RGNET`, version `u16`, then records until end of file. Each
//! record is `name_len u32`, UTF-8 name, dtype tag `u8`, rank `u8`, one `u64`
//! per extent, for int8 records `scale f64` and `zero_point i32`, then the
//! payload. All integers and floats are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::quant::{QuantScheme, QMAX, QMIN};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 5] = b"RGNET";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I8 {
        values: Vec<i8>,
        scale: f64,
        zero_point: i32,
    },
}

impl Payload {
    pub fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
            Payload::I8 { .. } => DType::I8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::I8 { values, .. } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl Record {
    /// Payload size in bytes, excluding the record header.
    pub fn payload_bytes(&self) -> usize {
        self.payload.len() * self.payload.dtype().byte_width()
    }

    /// Scheme of an int8 record. The observed range is reconstructed from the
    /// representable interval.
    pub fn scheme(&self) -> Option<QuantScheme> {
        match self.payload {
            Payload::I8 {
                scale, zero_point, ..
            } => Some(QuantScheme {
                scale,
                zero_point,
                min: (QMIN - zero_point) as f64 * scale,
                max: (QMAX - zero_point) as f64 * scale,
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn push_tensor<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let payload = match T::DTYPE {
            DType::F64 => Payload::F64(t.data().iter().map(|v| v.as_f64()).collect()),
            _ => Payload::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
        };
        self.records.push(Record {
            name: name.into(),
            shape: t.shape().to_vec(),
            payload,
        });
    }

    pub fn push_quantized(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        values: Vec<i8>,
        scheme: &QuantScheme,
    ) {
        self.records.push(Record {
            name: name.into(),
            shape: shape.to_vec(),
            payload: Payload::I8 {
                values,
                scale: scheme.scale,
                zero_point: scheme.zero_point,
            },
        });
    }

    /// Float record as a tensor of `T`. Integer records are dequantized.
    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let r = self
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing record '{name}'")))?;
        let data: Vec<T> = match &r.payload {
            Payload::F32(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
            Payload::F64(v) => v.iter().map(|&x| T::lit(x)).collect(),
            Payload::I8 { values, .. } => {
                let s = r.scheme().expect("int8 record");
                values.iter().map(|&q| T::lit(s.dequantize(q))).collect()
            }
        };
        Tensor::new(r.shape.clone(), data)
    }

    pub fn payload_bytes(&self) -> usize {
        self.records.iter().map(Record::payload_bytes).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(7 + self.payload_bytes() + 64 * self.records.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for r in &self.records {
            let numel: usize = r.shape.iter().product();
            if numel != r.payload.len() {
                return Err(Error::Format(format!(
                    "record '{}': shape {:?} does not match {} values",
                    r.name,
                    r.shape,
                    r.payload.len()
                )));
            }
            let rank = u8::try_from(r.shape.len())
                .map_err(|_| Error::Format(format!("record '{}': rank too large", r.name)))?;
            let name_len = u32::try_from(r.name.len())
                .map_err(|_| Error::Format(format!("record '{}': name too long", r.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.payload.dtype().tag());
            out.push(rank);
            for &e in &r.shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            match &r.payload {
                Payload::F32(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::F64(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::I8 {
                    values,
                    scale,
                    zero_point,
                } => {
                    out.extend_from_slice(&scale.to_le_bytes());
                    out.extend_from_slice(&zero_point.to_le_bytes());
                    out.extend(values.iter().map(|&q| q as u8));
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("bad magic; not a checkpoint".into()));
        }
        let version = u16::from_le_bytes(rd.array()?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut records = Vec::new();
        while rd.pos < bytes.len() {
            let name_len = u32::from_le_bytes(rd.array()?) as usize;
            let name = std::str::from_utf8(rd.take(name_len)?)
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?
                .to_string();
            let [tag, rank] = rd.array()?;
            let dtype = DType::from_tag(tag).ok_or_else(|| {
                Error::Format(format!("record '{name}': unknown dtype tag {tag}"))
            })?;
            let mut shape = Vec::with_capacity(rank as usize);
            let mut numel = 1usize;
            for _ in 0..rank {
                let e = usize::try_from(u64::from_le_bytes(rd.array()?))
                    .map_err(|_| Error::Format(format!("record '{name}': extent overflow")))?;
                numel = numel
                    .checked_mul(e)
                    .ok_or_else(|| Error::Format(format!("record '{name}': extent overflow")))?;
                shape.push(e);
            }
            let payload = match dtype {
                DType::F32 => {
                    let raw = rd.take(
                        numel
                            .checked_mul(4)
                            .ok_or_else(|| Error::Format("size overflow".into()))?,
                    )?;
                    Payload::F32(
                        raw.chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                DType::F64 => {
                    let raw = rd.take(
                        numel
                            .checked_mul(8)
                            .ok_or_else(|| Error::Format("size overflow".into()))?,
                    )?;
                    Payload::F64(
                        raw.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                DType::I8 => {
                    let scale = f64::from_le_bytes(rd.array()?);
                    let zero_point = i32::from_le_bytes(rd.array()?);
                    let values = rd.take(numel)?.iter().map(|&b| b as i8).collect();
                    Payload::I8 {
                        values,
                        scale,
                        zero_point,
                    }
                }
            };
            records.push(Record {
                name,
                shape,
                payload,
            });
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
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
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }
}
