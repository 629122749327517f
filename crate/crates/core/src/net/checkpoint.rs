//! `LNNW` network checkpoints.
//!
//! ```text
//! "LNNW" | u32 version
//! config: u32 input_h | u32 input_w | u32 stem_channels | u32 n_stages | n_stages × u32
//!         u32 blocks_per_stage | u32 embed_dim | u32 descriptor_dim | u32 class_hidden
//!         u32 num_classes | f64 alpha | u64 seed
//! u32 tensor_count
//! tensor_count × { u32 name_len | name (UTF-8) | u32 rank | rank × u32 dims | f32 data }
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::{Network, NetworkConfig, Param};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LNNW";
const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_checkpoint(net: &Network) -> Vec<u8> {
    let c = net.config();
    let mut out = Vec::with_capacity(64 + net.num_parameters() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, c.input_size.0);
    put_u32(&mut out, c.input_size.1);
    put_u32(&mut out, c.stem_channels);
    put_u32(&mut out, c.channels_per_stage.len());
    for &ch in &c.channels_per_stage {
        put_u32(&mut out, ch);
    }
    put_u32(&mut out, c.blocks_per_stage);
    put_u32(&mut out, c.embed_dim);
    put_u32(&mut out, c.descriptor_dim);
    put_u32(&mut out, c.class_hidden);
    put_u32(&mut out, c.num_classes);
    out.extend_from_slice(&c.alpha.to_le_bytes());
    out.extend_from_slice(&c.seed.to_le_bytes());
    put_u32(&mut out, net.params().len());
    for p in net.params() {
        put_u32(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.shape.len());
        for &d in &p.shape {
            put_u32(&mut out, d);
        }
        for &v in &p.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(self.pos, format!("truncated checkpoint reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::parse(0, "bad magic, expected \"LNNW\""));
    }
    let version = r.u32("version")? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "checkpoint",
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let input_size = (r.u32("input height")?, r.u32("input width")?);
    let stem_channels = r.u32("stem channels")?;
    let n_stages = r.u32("stage count")?;
    if n_stages > 64 {
        return Err(Error::parse(r.pos - 4, format!("implausible stage count {n_stages}")));
    }
    let channels_per_stage = (0..n_stages)
        .map(|_| r.u32("stage channels"))
        .collect::<Result<Vec<_>>>()?;
    let config = NetworkConfig {
        input_size,
        stem_channels,
        channels_per_stage,
        blocks_per_stage: r.u32("blocks per stage")?,
        embed_dim: r.u32("embed dim")?,
        descriptor_dim: r.u32("descriptor dim")?,
        class_hidden: r.u32("class hidden")?,
        num_classes: r.u32("num classes")?,
        alpha: r.f64("alpha")?,
        seed: r.u64("seed")?,
    };
    let count = r.u32("tensor count")?;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_at = r.pos;
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::parse(name_at + 4, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")?;
        if rank > 8 {
            return Err(Error::parse(r.pos - 4, format!("implausible rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, &format!("data of {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        params.push(Param { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(r.pos, "trailing bytes after last tensor"));
    }
    Network::from_parts(config, params)
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(net)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
