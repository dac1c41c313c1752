//! Portable little-endian tensor files.
//!
//! Layout: `b"TNSR"`, `u32` version (1), `u32` dtype (1 = f64, 2 = u8),
//! `u32` rank, `rank × u64` dims, then the raw payload.

use std::fs;
use std::io;
use std::path::Path;

use karma_core::Tensor;

pub const MAGIC: [u8; 4] = *b"TNSR";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F64 = 1,
    U8 = 2,
}

impl Dtype {
    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(c: u32) -> Option<Self> {
        match c {
            1 => Some(Dtype::F64),
            2 => Some(Dtype::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic {0:?}, expected \"TNSR\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u32),
    #[error("truncated {what}: need {need} bytes, have {have}")]
    Truncated { what: &'static str, need: usize, have: usize },
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
    #[error("expected dtype {expected:?}, file holds {found:?}")]
    WrongDtype { expected: Dtype, found: Dtype },
    #[error("dims {0:?} overflow the address space")]
    Overflow(Vec<u64>),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

/// Shape plus typed payload.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F64(Tensor),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F64(_) => Dtype::F64,
            TensorData::U8 { .. } => Dtype::U8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F64(t) => t.shape(),
            TensorData::U8 { shape, .. } => shape,
        }
    }

    pub fn into_f64(self) -> Result<Tensor, FormatError> {
        match self {
            TensorData::F64(t) => Ok(t),
            other => Err(FormatError::WrongDtype { expected: Dtype::F64, found: other.dtype() }),
        }
    }

    pub fn into_u8(self) -> Result<(Vec<usize>, Vec<u8>), FormatError> {
        match self {
            TensorData::U8 { shape, data } => Ok((shape, data)),
            other => Err(FormatError::WrongDtype { expected: Dtype::U8, found: other.dtype() }),
        }
    }
}

pub fn encode(t: &TensorData) -> Vec<u8> {
    let shape = t.shape();
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(16 + 8 * shape.len() + n * t.dtype().size());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&t.dtype().code().to_le_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match t {
        TensorData::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        TensorData::U8 { data, .. } => out.extend_from_slice(data),
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let have = self.buf.len() - self.pos;
        if have < n {
            return Err(FormatError::Truncated { what, need: n, have });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<TensorData, FormatError> {
    let mut r = Reader { buf, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(FormatError::Version(version));
    }
    let code = r.u32("dtype")?;
    let dtype = Dtype::from_code(code).ok_or(FormatError::UnknownDtype(code))?;
    let rank = r.u32("rank")? as usize;
    let dims: Vec<u64> = (0..rank).map(|_| r.u64("dims")).collect::<Result<_, _>>()?;
    let shape: Vec<usize> = dims.iter().map(|&d| usize::try_from(d)).collect::<Result<_, _>>().map_err(|_| FormatError::Overflow(dims.clone()))?;
    let bytes = shape
        .iter()
        .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| FormatError::Overflow(dims.clone()))?;
    let payload = r.take(bytes, "payload")?;
    if r.pos != buf.len() {
        return Err(FormatError::Trailing(buf.len() - r.pos));
    }
    Ok(match dtype {
        Dtype::F64 => {
            let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            TensorData::F64(Tensor::new(&shape, data).expect("payload sized from dims"))
        }
        Dtype::U8 => TensorData::U8 { shape, data: payload.to_vec() },
    })
}

pub fn write_tensor(path: &Path, t: &TensorData) -> Result<(), FormatError> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<TensorData, FormatError> {
    decode(&fs::read(path)?)
}

pub fn write_f64(path: &Path, t: &Tensor) -> Result<(), FormatError> {
    write_tensor(path, &TensorData::F64(t.clone()))
}

pub fn read_f64(path: &Path) -> Result<Tensor, FormatError> {
    read_tensor(path)?.into_f64()
}
