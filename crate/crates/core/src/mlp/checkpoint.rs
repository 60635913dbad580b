//! Binary parameter files.
//!
//! Layout, all integers `u32` little-endian: magic `UINI`, format version,
//! float width in bits (32 or 64), layer count `L`, the `L + 1` layer
//! widths, then for every layer the row-major weights followed by the
//! bias, each value little-endian at the declared width.

use std::path::Path;

use crate::error::{Error, Result};
use crate::mlp::{Architecture, ParamSet};
use crate::real::{FloatWidth, Real};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"UINI";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint<T: Real>(params: &ParamSet<T>) -> Vec<u8> {
    let arch = params.arch();
    let mut out = Vec::with_capacity(16 + 4 * arch.dims().len() + params.len() * T::WIDTH.bytes());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&T::WIDTH.bits().to_le_bytes());
    out.extend_from_slice(&(arch.depth() as u32).to_le_bytes());
    for &d in arch.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in params.flat() {
        v.write_le(&mut out);
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} while reading {what}",
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Decodes a checkpoint, converting stored values to `T` if the stored
/// width differs.
pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<ParamSet<T>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic, expected UINI".into()));
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let bits = cur.u32("float width")?;
    let width =
        FloatWidth::from_bits(bits).ok_or_else(|| Error::Checkpoint(format!("unsupported float width {bits}")))?;
    let depth = cur.u32("layer count")? as usize;
    if depth == 0 || depth > 1024 {
        return Err(Error::Checkpoint(format!("implausible layer count {depth}")));
    }
    let mut dims = Vec::with_capacity(depth + 1);
    for _ in 0..=depth {
        dims.push(cur.u32("layer widths")? as usize);
    }
    let arch = Architecture::new(&dims).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let n = arch.param_count();
    let need = n
        .checked_mul(width.bytes())
        .ok_or_else(|| Error::Checkpoint("parameter block too large".into()))?;
    let payload = cur.take(need, "parameters")?;
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    let flat: Vec<T> = match width {
        FloatWidth::F32 => payload.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
        FloatWidth::F64 => payload.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
    };
    ParamSet::from_flat(arch, flat)
}

pub fn write_checkpoint<T: Real>(path: &Path, params: &ParamSet<T>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Real>(path: &Path) -> Result<ParamSet<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::init_xavier;

    #[test]
    fn header_layout() {
        let p = init_xavier::<f32>(&[3, 2, 2], 0).unwrap();
        let b = encode_checkpoint(&p);
        assert_eq!(&b[..4], b"UINI");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &32u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(&b[16..28], &[3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(b.len(), 28 + 4 * 14);
        assert_eq!(&b[28..32], &p.flat()[0].to_le_bytes());
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let p = init_xavier::<f64>(&[5, 4, 3, 2], 9).unwrap();
        let b1 = encode_checkpoint(&p);
        let q: ParamSet<f64> = decode_checkpoint(&b1).unwrap();
        assert_eq!(q, p);
        assert_eq!(encode_checkpoint(&q), b1);
    }

    #[test]
    fn widens_f32_files() {
        let p = init_xavier::<f32>(&[4, 3, 2], 1).unwrap();
        let q: ParamSet<f64> = decode_checkpoint(&encode_checkpoint(&p)).unwrap();
        for (a, b) in p.flat().iter().zip(q.flat()) {
            assert_eq!(*a as f64, *b);
        }
    }

    #[test]
    fn rejects_corruption() {
        let p = init_xavier::<f32>(&[3, 2, 2], 0).unwrap();
        let b = encode_checkpoint(&p);
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint::<f32>(&bad).is_err());
        assert!(decode_checkpoint::<f32>(&b[..b.len() - 1]).is_err());
        let mut long = b.clone();
        long.push(0);
        assert!(decode_checkpoint::<f32>(&long).is_err());
        let mut width = b.clone();
        width[8] = 16;
        assert!(decode_checkpoint::<f32>(&width).is_err());
        let mut version = b;
        version[4] = 7;
        assert!(decode_checkpoint::<f32>(&version).is_err());
    }
}
