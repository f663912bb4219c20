//! Versioned weight files.
//!
//! ```text
//! SMP2W1\n
//! key=value\n ...        architecture, one pair per line, then
//!                        output_scale.<target>=<f64> per head
//! end\n
//! u32 array count
//! per array: u32 name length, name (UTF-8), u32 rank, u32 dims...,
//!            u32 CRC-32 of the data bytes, f32 data
//! ```
//! All integers and floats are little-endian; arrays follow the parameter
//! layout order.

use std::path::Path;

use super::{param_layout, ArchConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8] = b"SMP2W1\n";
const SCALE_PREFIX: &str = "output_scale.";

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Contract(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes weights; values are stored as 32-bit floats.
pub fn checkpoint_to_bytes<T: Scalar>(w: &ModelWeights<T>) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    for (k, v) in w.arch().to_kv() {
        out.extend_from_slice(format!("{k}={v}\n").as_bytes());
    }
    for (t, s) in w.arch().targets.iter().zip(w.output_scales()) {
        out.extend_from_slice(format!("{SCALE_PREFIX}{t}={s:?}\n").as_bytes());
    }
    out.extend_from_slice(b"end\n");
    put_u32(&mut out, w.tensors().len())?;
    for (name, t) in w.names().iter().zip(w.tensors()) {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        let bytes: Vec<u8> = t
            .data()
            .iter()
            .flat_map(|v| (v.as_f64() as f32).to_le_bytes())
            .collect();
        out.extend_from_slice(&crc32fast::hash(&bytes).to_le_bytes());
        out.extend_from_slice(&bytes);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Data("checkpoint is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.buf[self.pos..];
        let len = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Data("checkpoint header is not terminated".into()))?;
        let line = std::str::from_utf8(&rest[..len])
            .map_err(|_| Error::Data("checkpoint header is not UTF-8".into()))?;
        self.pos += len + 1;
        Ok(line)
    }
}

pub fn checkpoint_from_bytes<T: Scalar>(buf: &[u8]) -> Result<ModelWeights<T>> {
    if !buf.starts_with(MAGIC) {
        return Err(Error::Data("not an SMP2W1 checkpoint".into()));
    }
    let mut r = Reader {
        buf,
        pos: MAGIC.len(),
    };
    let mut kv = Vec::new();
    loop {
        let line = r.line()?;
        if line == "end" {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Data(format!("bad checkpoint header line `{line}`")))?;
        kv.push((k.to_string(), v.to_string()));
    }
    let arch = ArchConfig::from_kv(&kv)?;
    let layout = param_layout(&arch);
    let count = r.u32()?;
    if count != layout.len() {
        return Err(Error::Data(format!(
            "checkpoint has {count} arrays, architecture needs {}",
            layout.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for (want_name, want_shape) in &layout {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Data("array name is not UTF-8".into()))?;
        if name != want_name {
            return Err(Error::Data(format!("expected array `{want_name}`, found `{name}`")));
        }
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if &shape != want_shape {
            return Err(Error::Data(format!(
                "array `{name}` has shape {shape:?}, expected {want_shape:?}"
            )));
        }
        let crc = r.u32()? as u32;
        let n: usize = shape.iter().product();
        let bytes = r.take(n * 4)?;
        if crc32fast::hash(bytes) != crc {
            return Err(Error::Data(format!("checksum mismatch in array `{name}`")));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        tensors.push(Tensor::new(shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(Error::Data("trailing bytes after checkpoint arrays".into()));
    }
    let mut w = ModelWeights::from_parts(arch, tensors)?;
    let scales = w
        .arch()
        .targets
        .iter()
        .map(|t| {
            let key = format!("{SCALE_PREFIX}{t}");
            match kv.iter().find(|(k, _)| *k == key) {
                None => Ok(1.0),
                Some((_, v)) => v
                    .parse::<f64>()
                    .map_err(|_| Error::Data(format!("checkpoint key `{key}` is not a number"))),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    w.set_output_scales(scales)?;
    Ok(w)
}

pub fn write_checkpoint<T: Scalar>(path: impl AsRef<Path>, w: &ModelWeights<T>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_to_bytes(w)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelWeights<T>> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Backbone, TargetKind};
    use crate::seed;

    fn weights() -> ModelWeights<f32> {
        let mut arch = ArchConfig::preset(Backbone::Desk);
        arch.targets = vec![TargetKind::Occupancy, TargetKind::Velocity];
        arch.mask_ratio = 0.5;
        ModelWeights::init(&arch, &mut seed::stream(1, "init", 0)).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let mut w = weights();
        w.set_output_scales(vec![1.0, 2.75]).unwrap();
        let bytes = checkpoint_to_bytes(&w).unwrap();
        assert!(bytes.starts_with(b"SMP2W1\ncrop_size=64\n"));
        let back: ModelWeights<f32> = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = checkpoint_to_bytes(&weights()).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        let err = checkpoint_from_bytes::<f32>(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
        assert!(checkpoint_from_bytes::<f32>(&bytes[..100]).is_err());
        assert!(checkpoint_from_bytes::<f32>(b"nope").is_err());
    }
}
