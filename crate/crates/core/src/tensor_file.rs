//! Binary container for named tensors, used for weights, feature dumps and
//! embedding stores.
//!
//! Layout (little endian): magic `CAMW`, `u32` version, then records until end
//! of file, each `u32` name length, UTF-8 name, `u32` rank, `u32` dims, `f32`
//! data.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"CAMW";
pub const VERSION: u32 = 1;

const MAX_RANK: u32 = 8;
const MAX_NAME: u32 = 4096;

pub fn write_tensors<'a, W, I>(mut w: W, tensors: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut bytes = Vec::with_capacity(4 * t.len());
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::Format(format!("file truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads the first byte of the next record, or `None` at a clean end of file.
fn next_record(r: &mut impl Read) -> Result<Option<u8>> {
    let mut b = [0u8; 1];
    loop {
        match r.read(&mut b) {
            Ok(0) => return Ok(None),
            Ok(_) => return Ok(Some(b[0])),
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic { expected: MAGIC, found: magic });
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
    }
    let mut out = Vec::new();
    while let Some(first) = next_record(&mut r)? {
        let mut rest = [0u8; 3];
        read_exact(&mut r, &mut rest, "name length")?;
        let name_len = u32::from_le_bytes([first, rest[0], rest[1], rest[2]]);
        if name_len > MAX_NAME {
            return Err(Error::Format(format!("tensor name length {name_len} is implausible")));
        }
        let mut name = vec![0u8; name_len as usize];
        read_exact(&mut r, &mut name, "tensor name")?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r, "rank")?;
        if rank > MAX_RANK {
            return Err(Error::Format(format!("tensor {name:?} has implausible rank {rank}")));
        }
        let shape = (0..rank).map(|_| read_u32(&mut r, "dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= (1 << 30))
            .ok_or_else(|| Error::Format(format!("tensor {name:?} has implausible shape {shape:?}")))?;
        let mut bytes = vec![0u8; 4 * len];
        read_exact(&mut r, &mut bytes, "tensor data")?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push((name, Tensor::from_parts(shape, data)));
    }
    Ok(out)
}

pub fn save<'a, I>(path: &Path, tensors: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    write_tensors(BufWriter::new(File::create(path)?), tensors)
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    read_tensors(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("a.weight".into(), Tensor::new([2, 3], vec![1.0, -2.0, 3.5, 0.0, f32::MIN_POSITIVE, 7.0]).unwrap()),
            ("b".into(), Tensor::scalar(0.25)),
        ]
    }

    fn encode(items: &[(String, Tensor)]) -> Vec<u8> {
        let mut buf = Vec::new();
        write_tensors(&mut buf, items.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let items = sample();
        let back = read_tensors(&encode(&items)[..]).unwrap();
        assert_eq!(back.len(), 2);
        for ((n0, t0), (n1, t1)) in items.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            assert_eq!(t0.data(), t1.data());
        }
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let buf = encode(&sample());
        for cut in 0..buf.len() {
            // cutting exactly after the header or a whole record is a valid shorter file
            match read_tensors(&buf[..cut]) {
                Ok(v) => assert!(cut == 8 || v.len() == 1, "cut {cut} accepted"),
                Err(Error::Format(_)) => {}
                Err(e) => panic!("cut {cut}: unexpected {e:?}"),
            }
        }
    }

    #[test]
    fn bad_magic() {
        let mut buf = encode(&sample());
        buf[0] = b'X';
        assert!(matches!(read_tensors(&buf[..]), Err(Error::BadMagic { .. })));
    }
}
