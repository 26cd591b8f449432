use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LAPCKPT1";

/// Writes named tensors: magic, then per tensor the name length, UTF-8 name,
/// rank, extents and values, all little-endian 64-bit.
pub fn write_checkpoint<W: Write>(w: &mut W, tensors: &[(&str, &Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u64).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated record: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

/// Reads records until end of input. Order is preserved.
pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::Format("missing header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let mut out = Vec::new();
    loop {
        // probe one byte to detect a clean end of file
        let mut first = [0u8; 1];
        match r.read(&mut first)? {
            0 => break,
            _ => {}
        }
        let mut rest = [0u8; 7];
        r.read_exact(&mut rest).map_err(|e| Error::Format(format!("truncated record: {e}")))?;
        let mut lenb = [0u8; 8];
        lenb[0] = first[0];
        lenb[1..].copy_from_slice(&rest);
        let nlen = u64::from_le_bytes(lenb) as usize;
        if nlen > 1 << 20 {
            return Err(Error::Format(format!("implausible name length {nlen}")));
        }
        let mut name = vec![0u8; nlen];
        r.read_exact(&mut name).map_err(|e| Error::Format(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("name is not UTF-8".into()))?;
        let rank = read_u64(r)? as usize;
        if rank > 16 {
            return Err(Error::Format(format!("implausible rank {rank} for {name}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_bits(read_u64(r)?));
        }
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, tensors)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let a = Tensor::new(&[2, 3], vec![1.0, -0.0, 1e-300, 3.25, f64::MAX, -7.5]).unwrap();
        let b = Tensor::scalar(0.1);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("w.a", &a), ("β", &b)]).unwrap();
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "w.a");
        assert_eq!(back[1].0, "β");
        for (x, y) in back[0].1.data().iter().zip(a.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(back[1].1.shape(), &[] as &[usize]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(read_checkpoint(&mut &b"LAPCKPT2"[..]), Err(Error::Format(_))));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("x", &Tensor::vector(vec![1.0, 2.0]))]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_checkpoint(&mut buf.as_slice()), Err(Error::Format(_))));
    }
}
