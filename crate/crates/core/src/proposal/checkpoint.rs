//! Versioned binary checkpoint.
//!
//! Layout (little-endian): magic `AMTZCKPT`, `u32` format version, `u32`
//! length + architecture JSON, `u32` tensor count, then per tensor `u32` name
//! length, name bytes, `u32` rank, `u64` dims, `f64` values.

use std::path::Path;

use super::arch::ArchConfig;
use super::net::ProposalNet;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"AMTZCKPT";
pub const FORMAT_VERSION: u32 = 1;

pub fn to_bytes(net: &ProposalNet) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 8 * net.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let arch = serde_json::to_vec(net.arch())?;
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(&arch);
    out.extend_from_slice(&(net.params().len() as u32).to_le_bytes());
    for (name, t) in net.named_params() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ProposalNet> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("checkpoint format version {version}, this build reads {FORMAT_VERSION}")));
    }
    let arch_len = r.u32()? as usize;
    let arch: ArchConfig = serde_json::from_slice(r.take(arch_len)?)?;
    let count = r.u32()? as usize;
    let mut named = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n = n.ok_or_else(|| Error::Format(format!("tensor {name} dims overflow")))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        named.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    ProposalNet::from_named(arch, named)
}

pub fn save(net: &ProposalNet, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(net)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ProposalNet> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captcha::StyleSpec;

    #[test]
    fn round_trip_is_bit_exact() {
        let net = ProposalNet::new(ArchConfig::tiny(&StyleSpec::tiny()), 3).unwrap();
        let bytes = to_bytes(&net).unwrap();
        assert!(bytes.starts_with(b"AMTZCKPT\x01\x00\x00\x00"));
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.arch(), net.arch());
        for (a, b) in back.params().iter().zip(net.params()) {
            assert_eq!(a, b);
        }
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_checkpoints_are_format_errors() {
        let net = ProposalNet::new(ArchConfig::tiny(&StyleSpec::tiny()), 3).unwrap();
        let bytes = to_bytes(&net).unwrap();
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Format(_))));
        let mut future = bytes.clone();
        future[8] = 9;
        assert!(matches!(from_bytes(&future), Err(Error::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(from_bytes(&long), Err(Error::Format(_))));
    }
}
