//! Named-tensor container shared by checkpoints, dataset-independent state and
//! debug dumps.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  "SFODTNSR"        8 bytes
//! version u32              currently 1
//! count   u32
//! count × { name_len u32, name UTF-8, rank u32, dims u64 × rank, data f64 × Π dims }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"SFODTNSR";
pub const ARCHIVE_VERSION: u32 = 1;
const MAX_NAME: u32 = 1 << 16;
const MAX_RANK: u32 = 8;

/// An ordered list of uniquely named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    entries: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds or replaces `name`, keeping first-insertion order.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = t,
            None => self.entries.push((name, t)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor '{name}'")))
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    /// Names beginning with `prefix`, in archive order.
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries
            .iter()
            .map(|(n, _)| n.as_str())
            .filter(move |n| n.starts_with(prefix))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(ARCHIVE_VERSION)?;
        w.write_u32::<LittleEndian>(self.entries.len() as u32)?;
        for (name, t) in &self.entries {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(t.rank() as u32)?;
            for &d in t.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in t.data() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a tensor archive".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != ARCHIVE_VERSION {
            return Err(Error::Format(format!("unsupported archive version {version}")));
        }
        let count = r.read_u32::<LittleEndian>()?;
        let mut archive = Archive::new();
        for _ in 0..count {
            let len = r.read_u32::<LittleEndian>()?;
            if len > MAX_NAME {
                return Err(Error::Format(format!("tensor name of {len} bytes")));
            }
            let mut buf = vec![0u8; len as usize];
            r.read_exact(&mut buf)?;
            let name = String::from_utf8(buf)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.read_u32::<LittleEndian>()?;
            if rank > MAX_RANK {
                return Err(Error::Format(format!("tensor '{name}' has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                shape.push(r.read_u64::<LittleEndian>()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= 1 << 32)
                .ok_or_else(|| Error::Format(format!("tensor '{name}' is too large")))?;
            let mut data = vec![0.0; n];
            r.read_f64_into::<LittleEndian>(&mut data)?;
            if archive.get(&name).is_some() {
                return Err(Error::Format(format!("duplicate tensor '{name}'")));
            }
            archive.entries.push((name, Tensor::new(shape, data)?));
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut a = Archive::new();
        a.insert("scalar", Tensor::scalar(-0.0));
        a.insert("w", Tensor::new(vec![2, 3], vec![1.0, f64::MIN_POSITIVE, -3.5, 1e300, 0.1, 7.0]).unwrap());
        a.insert("empty", Tensor::zeros(&[0, 4]));
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        let b = Archive::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(a.len(), b.len());
        for ((na, ta), (nb, tb)) in a.entries().iter().zip(b.entries()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb));
        }
    }

    #[test]
    fn insert_replaces_in_place() {
        let mut a = Archive::new();
        a.insert("x", Tensor::scalar(1.0));
        a.insert("y", Tensor::scalar(2.0));
        a.insert("x", Tensor::scalar(3.0));
        assert_eq!(a.entries()[0].0, "x");
        assert_eq!(a.get("x").unwrap().item(), 3.0);
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(Archive::read_from(&mut &b"NOTMAGIC\x01\0\0\0"[..]).is_err());
        let mut a = Archive::new();
        a.insert("x", Tensor::vector(vec![1.0, 2.0]));
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Archive::read_from(&mut buf.as_slice()).is_err());
        let mut bad_version = Vec::new();
        a.write_to(&mut bad_version).unwrap();
        bad_version[8] = 9;
        assert!(matches!(Archive::read_from(&mut bad_version.as_slice()), Err(Error::Format(_))));
    }
}
