//! `RFLOW` checkpoint container.
//!
//! All integers and floats are little-endian. Layout:
//!
//! | field                | type                    | notes                                  |
//! |----------------------|-------------------------|----------------------------------------|
//! | magic                | 5 bytes                 | `RFLOW`                                |
//! | version              | u32                     | currently 1                            |
//! | metadata length `L`  | u32                     |                                        |
//! | metadata             | `L` bytes UTF-8         | `key=value` lines, each ending in `\n` |
//! | activation           | u32                     | 0 = SiLU, 1 = identity                 |
//! | width count `W`      | u32                     | layer count + 1                        |
//! | widths               | `W` × u32               | input, hidden..., output               |
//! | extra block count `X`| u32                     |                                        |
//! | extra block shapes   | `X` × (u32 rows, u32 cols) |                                     |
//! | layer parameters     | f64 blocks              | per layer: weight `[in, out]` row-major, then bias `[out]` |
//! | extra blocks         | f64 blocks              | each `rows × cols`, row-major          |
//!
//! The file ends exactly after the last block. Floats are stored by bit
//! pattern, so a write/read cycle is lossless.

use std::io::{Read, Write};

use super::mlp::{Activation, Linear, MlpNet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"RFLOW";
pub const VERSION: u32 = 1;

/// Ordered `key=value` metadata; keys and values must not contain `=` or newlines
/// in the key, or newlines in the value.
pub type Metadata = Vec<(String, String)>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: Metadata,
    pub net: MlpNet,
    /// Additional matrices stored after the network (e.g. embedding tables).
    pub extras: Vec<Tensor>,
}

pub(crate) fn encode_metadata(meta: &Metadata) -> Result<Vec<u8>> {
    let mut out = String::new();
    for (k, v) in meta {
        if k.is_empty() || k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(Error::format(format!("unencodable metadata entry `{k}`")));
        }
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    Ok(out.into_bytes())
}

pub(crate) fn decode_metadata(bytes: &[u8]) -> Result<Metadata> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::format("metadata is not UTF-8"))?;
    let mut meta = Vec::new();
    for line in text.split_terminator('\n') {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(format!("metadata line without `=`: {line:?}")))?;
        meta.push((k.to_string(), v.to_string()));
    }
    Ok(meta)
}

pub(crate) fn meta_get<'a>(meta: &'a Metadata, key: &str) -> Option<&'a str> {
    meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format("unexpected end of file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.bytes(n.checked_mul(8).ok_or_else(|| Error::format("block too large"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::format(format!("{what} {v} does not fit in u32")))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let meta = encode_metadata(&self.metadata)?;
        put_u32(&mut out, to_u32(meta.len(), "metadata length")?);
        out.extend_from_slice(&meta);

        put_u32(&mut out, self.net.activation().code());
        put_u32(&mut out, to_u32(self.net.widths().len(), "width count")?);
        for &w in self.net.widths() {
            put_u32(&mut out, to_u32(w, "width")?);
        }
        put_u32(&mut out, to_u32(self.extras.len(), "extra count")?);
        for e in &self.extras {
            put_u32(&mut out, to_u32(e.rows(), "rows")?);
            put_u32(&mut out, to_u32(e.cols(), "cols")?);
        }
        for layer in self.net.layers() {
            put_f64s(&mut out, layer.weight.data());
            put_f64s(&mut out, layer.bias.data());
        }
        for e in &self.extras {
            put_f64s(&mut out, e.data());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.bytes(5)? != MAGIC {
            return Err(Error::format("missing RFLOW magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let metadata = decode_metadata(r.bytes(meta_len)?)?;

        let activation = Activation::from_code(r.u32()?)?;
        let n_widths = r.u32()? as usize;
        if n_widths < 2 {
            return Err(Error::format("network needs at least two widths"));
        }
        let widths = (0..n_widths)
            .map(|_| r.u32().map(|w| w as usize))
            .collect::<Result<Vec<_>>>()?;
        let n_extra = r.u32()? as usize;
        let shapes = (0..n_extra)
            .map(|_| Ok((r.u32()? as usize, r.u32()? as usize)))
            .collect::<Result<Vec<_>>>()?;

        let mut layers = Vec::with_capacity(n_widths - 1);
        for w in widths.windows(2) {
            let weight = Tensor::new(vec![w[0], w[1]], r.f64s(w[0] * w[1])?)?;
            let bias = Tensor::new(vec![w[1]], r.f64s(w[1])?)?;
            layers.push(Linear { weight, bias });
        }
        let net = MlpNet::from_layers(layers, activation)?;
        let extras = shapes
            .into_iter()
            .map(|(rows, cols)| Tensor::new(vec![rows, cols], r.f64s(rows * cols)?))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(Self {
            metadata,
            net,
            extras,
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}
