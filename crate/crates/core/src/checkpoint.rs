//! Checkpoint container: a configuration text block followed by named
//! tensors in the binary tensor format.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GAMC";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub config_text: String,
    pub tensors: Vec<(String, Tensor)>,
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format("truncated checkpoint"),
        _ => Error::Io(e),
    })
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&[CHECKPOINT_VERSION])?;
        out.write_all(&(self.config_text.len() as u64).to_le_bytes())?;
        out.write_all(self.config_text.as_bytes())?;
        out.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &self.tensors {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            write_tensor(out, t)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 5];
        read_exact(input, &mut magic)?;
        if &magic[..4] != CHECKPOINT_MAGIC {
            return Err(Error::format("not a checkpoint file (bad magic)"));
        }
        if magic[4] != CHECKPOINT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {}", magic[4])));
        }
        let len = read_u64(input)? as usize;
        let mut text = Vec::new();
        input.take(len as u64).read_to_end(&mut text)?;
        if text.len() != len {
            return Err(Error::format("truncated checkpoint"));
        }
        let config_text = String::from_utf8(text).map_err(|_| Error::format("config block is not utf-8"))?;
        let count = read_u64(input)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let mut b = [0u8; 4];
            read_exact(input, &mut b)?;
            let mut name = vec![0u8; u32::from_le_bytes(b) as usize];
            read_exact(input, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::format("tensor name is not utf-8"))?;
            tensors.push((name, read_tensor(input)?));
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest)? != 0 {
            return Err(Error::format("trailing bytes after checkpoint"));
        }
        Ok(Checkpoint { config_text, tensors })
    }

    /// Write to a sibling temporary file, then rename over `path`, so an
    /// interrupted save never clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
            w.get_ref().sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config_text: "a = 1\n".into(),
            tensors: vec![
                ("w".into(), Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1)),
                ("s".into(), Tensor::scalar(-0.0)),
            ],
        }
    }

    #[test]
    fn round_trip_in_memory() {
        let c = sample();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get("s").unwrap().item().to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn every_truncation_is_format_error() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        for cut in 0..buf.len() {
            let r = Checkpoint::read_from(&mut &buf[..cut]);
            assert!(matches!(r, Err(Error::Format(_))), "cut at {cut}");
        }
    }

    #[test]
    fn wrong_version_rejected() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        buf[4] = 9;
        assert!(matches!(Checkpoint::read_from(&mut buf.as_slice()), Err(Error::Format(_))));
    }
}
