//! `PWT1` tensor container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "PWT1" | count | { name_len | name (UTF-8) | rank | dims[rank] | f32 data }*
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PWT1";

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Shape(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes named tensors in the given order.
pub fn encode<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Result<Vec<u8>> {
    let items: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, items.len())?;
    for (name, t) in items {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> io::Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "truncated tensor file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> io::Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parses a `PWT1` buffer into `(name, tensor)` pairs in file order.
pub fn decode(buf: &[u8]) -> std::result::Result<Vec<(String, Tensor<f32>)>, String> {
    let inner = || -> io::Result<Vec<(String, Tensor<f32>)>> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "bad magic"));
        }
        let count = c.u32()?;
        let mut out = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = c.u32()?;
            let name = String::from_utf8(c.take(len)?.to_vec())
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
            let rank = c.u32()?;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(c.u32()?);
            }
            let n: usize = shape.iter().product();
            let raw = c.take(n.checked_mul(4).ok_or_else(|| {
                io::Error::new(io::ErrorKind::InvalidData, "tensor too large")
            })?)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
            out.push((name, t));
        }
        if c.pos != buf.len() {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "trailing bytes"));
        }
        Ok(out)
    };
    inner().map_err(|e| e.to_string())
}

fn format_err(path: &Path, reason: String) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason,
    }
}

/// Writes a parameter set plus any extra named tensors.
pub fn write_checkpoint(
    path: &Path,
    params: &ParamSet<f32>,
    extra: &[(&str, &Tensor<f32>)],
) -> Result<()> {
    let items = params
        .iter()
        .map(|(k, p)| (k, &p.value))
        .chain(extra.iter().copied());
    let bytes = encode(items)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Reads every tensor of a checkpoint into a parameter set.
pub fn read_checkpoint(path: &Path) -> Result<ParamSet<f32>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let items = decode(&buf).map_err(|r| format_err(path, r))?;
    let mut ps = ParamSet::new();
    for (name, t) in items {
        if ps.contains(&name) {
            return Err(format_err(path, format!("duplicate tensor `{name}`")));
        }
        ps.insert(name, t);
    }
    Ok(ps)
}

/// Writes named tensors to a standalone file.
pub fn write_tensor_file(path: &Path, tensors: &[(&str, &Tensor<f32>)]) -> Result<()> {
    fs::write(path, encode(tensors.iter().copied())?)?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let buf = fs::read(path)?;
    decode(&buf).map_err(|r| format_err(path, r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new([2], vec![1.0f32, -2.5]).unwrap();
        let bytes = encode([("ab", &t)]).unwrap();
        assert_eq!(&bytes[..4], b"PWT1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..14], b"ab");
        assert_eq!(&bytes[14..18], &1u32.to_le_bytes());
        assert_eq!(&bytes[18..22], &2u32.to_le_bytes());
        assert_eq!(&bytes[22..26], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 30);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"PWT0\0\0\0\0").is_err());
        assert!(decode(b"PWT1\x01\0\0\0").is_err());
    }

    proptest! {
        #[test]
        fn bit_exact_round_trip(
            dims in proptest::collection::vec(1usize..4, 0..4),
            bits in proptest::collection::vec(any::<u32>(), 64),
            name in "[a-z.0-9]{1,12}",
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(bits[i % bits.len()])).collect();
            let t = Tensor::new(dims.clone(), data).unwrap();
            let bytes = encode([(name.as_str(), &t)]).unwrap();
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(&back[0].0, &name);
            prop_assert_eq!(back[0].1.shape(), t.shape());
            let a: Vec<u32> = back[0].1.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
