//! Sample archive: `"BDSM"`, `u32` count, `u32` rank, `rank × u32` per-sample
//! dims, then `count × Π dims` little-endian `f32` values.

use std::fs;
use std::path::Path;

use bitdiff_core::Tensor;

use crate::error::{CliError, Result};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"BDSM";

/// Encode a `[n, ...]` tensor; the leading axis is the sample count.
pub fn encode(samples: &Tensor) -> Result<Vec<u8>> {
    let shape = samples.shape();
    if shape.is_empty() {
        return Err(CliError::Archive("need at least one axis".into()));
    }
    let to_u32 = |x: usize| u32::try_from(x).map_err(|_| CliError::Archive(format!("dimension {x} too large")));
    let mut out = Vec::with_capacity(12 + 4 * shape.len() + 4 * samples.numel());
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&to_u32(shape[0])?.to_le_bytes());
    out.extend_from_slice(&to_u32(shape.len() - 1)?.to_le_bytes());
    for &d in &shape[1..] {
        out.extend_from_slice(&to_u32(d)?.to_le_bytes());
    }
    for &v in samples.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos.saturating_add(n))
            .ok_or_else(|| CliError::Archive(format!("truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != ARCHIVE_MAGIC {
        return Err(CliError::Archive("bad magic".into()));
    }
    let count = cur.u32()?;
    let rank = cur.u32()?;
    let mut shape = vec![count];
    for _ in 0..rank {
        shape.push(cur.u32()?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| CliError::Archive("size overflow".into()))?;
    let data = cur
        .take(numel)?
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    if cur.pos != bytes.len() {
        return Err(CliError::Archive(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(Tensor::new(shape, data)?)
}

pub fn write(path: impl AsRef<Path>, samples: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(samples)?).map_err(|e| CliError::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| CliError::io(path, e))?)
}

/// Binary PGM grid of the first `max` single-channel images, mapping `[-1, 1]` to `[0, 255]`.
pub fn pgm_grid(samples: &Tensor, max: usize) -> Result<Vec<u8>> {
    let &[n, c, h, w] = samples.shape() else {
        return Err(CliError::Usage(format!("pgm needs [n,1,h,w] samples, got {:?}", samples.shape())));
    };
    if c != 1 || n == 0 {
        return Err(CliError::Usage(format!("pgm needs [n,1,h,w] samples, got {:?}", samples.shape())));
    }
    let n = n.min(max);
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let (gw, gh) = (cols * (w + 1) + 1, rows * (h + 1) + 1);
    let mut px = vec![0u8; gw * gh];
    for i in 0..n {
        let (gy, gx) = (1 + (i / cols) * (h + 1), 1 + (i % cols) * (w + 1));
        let img = &samples.data()[i * h * w..(i + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let v = ((img[y * w + x] + 1.0) * 127.5).round().clamp(0.0, 255.0);
                px[(gy + y) * gw + gx + x] = v as u8;
            }
        }
    }
    let mut out = format!("P5\n{gw} {gh}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    Ok(out)
}
