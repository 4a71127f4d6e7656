//! Flat binary weight files.
//!
//! Layout (little endian): magic `GFNW`, `u32` format version, `u32` section
//! count, then per section a `u32` name length, the UTF-8 name, a `u64`
//! value count and the `f64` values.

use std::io::{Read, Write};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"GFNW";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSection {
    pub name: String,
    pub values: Vec<f64>,
}

impl WeightSection {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        Self { name: name.into(), values }
    }
}

pub fn write_weights<W: Write>(mut w: W, sections: &[WeightSection]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(sections.len() as u32).to_le_bytes())?;
    for s in sections {
        w.write_all(&(s.name.len() as u32).to_le_bytes())?;
        w.write_all(s.name.as_bytes())?;
        w.write_all(&(s.values.len() as u64).to_le_bytes())?;
        for v in &s.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| Error::Weights(format!("truncated file: {e}")))?;
    Ok(buf)
}

pub fn read_weights<R: Read>(mut r: R) -> Result<Vec<WeightSection>> {
    if &read_exact::<_, 4>(&mut r)? != MAGIC {
        return Err(Error::Weights("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != VERSION {
        return Err(Error::Weights(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(&mut r)?);
    let mut sections = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Weights(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Weights("section name is not UTF-8".into()))?;
        let len = u64::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut values = Vec::with_capacity(len.min(1 << 24));
        for _ in 0..len {
            values.push(f64::from_le_bytes(read_exact(&mut r)?));
        }
        sections.push(WeightSection { name, values });
    }
    Ok(sections)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip(values in proptest::collection::vec(-1e6f64..1e6, 0..64), name in "[a-z_]{1,12}") {
            let sections = vec![WeightSection::new(name, values), WeightSection::new("log_z", vec![2.5])];
            let mut buf = Vec::new();
            write_weights(&mut buf, &sections).unwrap();
            prop_assert_eq!(read_weights(&buf[..]).unwrap(), sections);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_weights(&b"NOPE\x01\x00\x00\x00"[..]).is_err());
        let mut buf = Vec::new();
        write_weights(&mut buf, &[WeightSection::new("w", vec![1.0, 2.0])]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_weights(&buf[..]).is_err());
    }
}
