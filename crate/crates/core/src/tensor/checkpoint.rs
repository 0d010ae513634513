//! Little-endian tensor checkpoints.
//!
//! Layout: the 4-byte magic `ACPT`, a `u32` version, then records until end
//! of file. Each record is a `u32` name length, the UTF-8 name, a `u32`
//! rank, `rank` extents as `u64`, and the `f32` payload.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ACPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::invalid(format!("checkpoint has no tensor named {name:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_checkpoint(&mut out, self).expect("write to Vec");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        read_checkpoint(&mut &bytes[..])
    }
}

pub fn write_checkpoint(w: &mut impl Write, ck: &Checkpoint) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, t) in &ck.tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated {
                what: "checkpoint",
                needed: n,
                available: self.buf.len() - self.pos,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| Error::io("<checkpoint>", e))?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    let magic = cur.take(4).map_err(|_| Error::BadMagic {
        what: "checkpoint",
        expected: CHECKPOINT_MAGIC.to_vec(),
        found: buf.clone(),
    })?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            what: "checkpoint",
            expected: CHECKPOINT_MAGIC.to_vec(),
            found: magic.to_vec(),
        });
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "checkpoint",
            version,
        });
    }
    let mut ck = Checkpoint::default();
    while cur.pos < buf.len() {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|e| Error::invalid(format!("checkpoint tensor name: {e}")))?
            .to_string();
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = cur.take(count * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ck.insert(name, Tensor::new(shape, data)?);
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let mut ck = Checkpoint::default();
        ck.insert("conv1.weight", Tensor::from_fn(&[2, 1, 3, 3], |i| (i as f32).sin()));
        ck.insert("scalar", Tensor::scalar(-0.0));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.tensors.len(), 2);
        for ((na, ta), (nb, tb)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb));
        }
    }

    #[test]
    fn header_is_documented_layout() {
        let mut ck = Checkpoint::default();
        ck.insert("a", Tensor::from_vec(vec![1.0]));
        let b = ck.to_bytes();
        assert_eq!(&b[..4], b"ACPT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(b[12], b'a');
        assert_eq!(u32::from_le_bytes(b[13..17].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[17..25].try_into().unwrap()), 1);
        assert_eq!(f32::from_le_bytes(b[25..29].try_into().unwrap()), 1.0);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(Checkpoint::from_bytes(b""), Err(Error::BadMagic { .. })));
        assert!(matches!(Checkpoint::from_bytes(b"XXXX\x01\0\0\0"), Err(Error::BadMagic { .. })));
        let mut ck = Checkpoint::default();
        ck.insert("w", Tensor::zeros(&[4]));
        let b = ck.to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&b[..b.len() - 1]),
            Err(Error::Truncated { .. })
        ));
    }
}
