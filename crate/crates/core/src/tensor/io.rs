//! Binary tensor format: `GAMT`, u8 version, u8 rank, `rank` little-endian
//! u64 extents, then the little-endian f64 payload in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"GAMT";
const VERSION: u8 = 1;

pub fn write_tensor<W: Write>(out: &mut W, tensor: &Tensor) -> Result<()> {
    let rank = u8::try_from(tensor.rank())
        .map_err(|_| Error::format(format!("rank {} does not fit in a byte", tensor.rank())))?;
    out.write_all(TENSOR_MAGIC)?;
    out.write_all(&[VERSION, rank])?;
    for &d in tensor.shape() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in tensor.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format(format!("truncated tensor ({what})")),
        _ => Error::Io(e),
    })
}

pub fn read_tensor<R: Read>(input: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact(input, &mut magic, "magic")?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::format(format!("bad tensor magic {magic:?}")));
    }
    let mut header = [0u8; 2];
    read_exact(input, &mut header, "header")?;
    if header[0] != VERSION {
        return Err(Error::format(format!("unsupported tensor version {}", header[0])));
    }
    let rank = header[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut word = [0u8; 8];
    for _ in 0..rank {
        read_exact(input, &mut word, "extent")?;
        let d = u64::from_le_bytes(word);
        if d == 0 || d > u32::MAX as u64 {
            return Err(Error::format(format!("implausible extent {d}")));
        }
        shape.push(d as usize);
    }
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&l| l <= 1 << 32)
        .ok_or_else(|| Error::format(format!("tensor shape {shape:?} too large")))?;
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        read_exact(input, &mut word, "payload")?;
        data.push(f64::from_le_bytes(word));
    }
    Tensor::new(shape, data).map_err(|e| Error::format(e.to_string()))
}

pub fn write_tensor_file(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, tensor)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    read_tensor(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"GAMT");
        assert_eq!(buf[4], 1);
        assert_eq!(buf[5], 2);
        assert_eq!(&buf[6..14], &1u64.to_le_bytes());
        assert_eq!(&buf[14..22], &2u64.to_le_bytes());
        assert_eq!(&buf[22..30], &1.5f64.to_le_bytes());
        assert_eq!(buf.len(), 38);
    }

    #[test]
    fn truncation_and_magic_are_format_errors() {
        let t = Tensor::full(&[3], 1.0);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let cut = &buf[..buf.len() - 3];
        assert!(matches!(read_tensor(&mut &cut[..]), Err(Error::Format(_))));
        buf[0] = b'X';
        assert!(matches!(read_tensor(&mut &buf[..]), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            shape in proptest::collection::vec(1usize..4, 0..4),
            seed in any::<u64>(),
        ) {
            let len: usize = shape.iter().product();
            let data: Vec<f64> = (0..len)
                .map(|i| f64::from_bits(seed.rotate_left(i as u32) & 0x7fef_ffff_ffff_ffff))
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back = read_tensor(&mut &buf[..]).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
