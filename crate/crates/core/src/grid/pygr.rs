//! PYGR binary container for `[T, C, H, W]` gridded series.
//!
//! Layout (little endian): magic `PYGR`, u32 version, u32 C, H, W, T, u8 dtype
//! (1 = f32), C channel names (u32 byte length + UTF-8), H f64 latitudes, then
//! T·C·H·W f32 values. Metadata lives in a JSON sidecar at `<path>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PYGR";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct GridFile {
    pub channel_names: Vec<String>,
    pub latitudes: Vec<f64>,
    pub n_lon: usize,
    /// One `[C,H,W]` tensor per time step.
    pub steps: Vec<Tensor<f32>>,
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Data(format!("{what} {v} does not fit in u32")))
}

impl GridFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (c, h, w) = (self.channel_names.len(), self.latitudes.len(), self.n_lon);
        for (k, s) in self.steps.iter().enumerate() {
            if s.shape() != [c, h, w] {
                return Err(Error::shape(format!(
                    "step {k} has shape {:?}, expected {:?}",
                    s.shape(),
                    [c, h, w]
                )));
            }
        }
        let mut out = Vec::with_capacity(64 + self.steps.len() * c * h * w * 4);
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            u32_of(c, "channels")?,
            u32_of(h, "rows")?,
            u32_of(w, "columns")?,
            u32_of(self.steps.len(), "steps")?,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(DTYPE_F32);
        for name in &self.channel_names {
            out.extend_from_slice(&u32_of(name.len(), "name length")?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        }
        for lat in &self.latitudes {
            out.extend_from_slice(&lat.to_le_bytes());
        }
        for s in &self.steps {
            for v in s.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Data("not a PYGR file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Data(format!("unsupported PYGR version {version}")));
        }
        let c = r.u32()? as usize;
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let t = r.u32()? as usize;
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Data(format!("unsupported PYGR dtype code {dtype}")));
        }
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Data("PYGR file has an empty dimension".into()));
        }
        let channel_names = (0..c)
            .map(|_| {
                let n = r.u32()? as usize;
                String::from_utf8(r.take(n)?.to_vec())
                    .map_err(|_| Error::Data("channel name is not UTF-8".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let latitudes = (0..h).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let plane = c * h * w;
        let expected = t
            .checked_mul(plane)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Data("PYGR dimensions overflow".into()))?;
        if r.remaining() != expected {
            return Err(Error::Data(format!(
                "PYGR payload has {} bytes, header implies {expected}",
                r.remaining()
            )));
        }
        let steps = (0..t)
            .map(|_| {
                let raw = r.take(plane * 4)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")))
                    .collect();
                Tensor::new(vec![c, h, w], data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            channel_names,
            latitudes,
            n_lon: w,
            steps,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Data("PYGR file is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_sidecar<T: Serialize>(path: &Path, meta: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(meta)?;
    text.push('\n');
    fs::write(sidecar_path(path), text)?;
    Ok(())
}

pub fn read_sidecar<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let p = sidecar_path(path);
    let text = fs::read_to_string(&p)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("bad sidecar {}: {e}", p.display())))
}
