//! Binary weight file.
//!
//! ```text
//! "XFRW" | u32 version (=1) | u32 layer count
//! per layer: u8 kind tag | u32 ndims | ndims x u32 dims | f32 payload
//! ```
//!
//! All integers and floats are little-endian. Parameterless layers have
//! `ndims = 0` and no payload. For conv (`[out, in, 3, 3]`) and fully
//! connected (`[out, in]`) layers the payload is the weight tensor followed
//! by `out` bias values.

use std::fs;
use std::path::Path;

use crate::error::{Result, XfrError};
use crate::netcore::{Layer, LayerKind, NetworkGraph};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"XFRW";
pub const VERSION: u32 = 1;

fn tag(kind: LayerKind) -> u8 {
    match kind {
        LayerKind::Conv3x3 => 1,
        LayerKind::Relu => 2,
        LayerKind::MaxPool2x2 => 3,
        LayerKind::GlobalAvgPool => 4,
        LayerKind::FullyConnected => 5,
        LayerKind::L2Normalize => 6,
    }
}

pub fn to_bytes(net: &NetworkGraph<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(net.len() as u32).to_le_bytes());
    for layer in net.layers() {
        out.push(tag(layer.kind()));
        match layer.params() {
            Some((w, b)) => {
                out.extend_from_slice(&(w.shape().len() as u32).to_le_bytes());
                for &d in w.shape() {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for v in w.data().iter().chain(b.data()) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            None => out.extend_from_slice(&0u32.to_le_bytes()),
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Option<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4)?)?;
        Some(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        )
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<NetworkGraph<f32>> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r
        .take(4)
        .ok_or_else(|| XfrError::Format("file shorter than magic".into()))?;
    if magic != MAGIC {
        return Err(XfrError::Format(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r
        .u32()
        .ok_or_else(|| XfrError::Format("missing version".into()))?;
    if version != VERSION {
        return Err(XfrError::Format(format!("unsupported version {version}")));
    }
    let count = r
        .u32()
        .ok_or_else(|| XfrError::Format("missing layer count".into()))? as usize;

    let mut layers = Vec::with_capacity(count.min(1024));
    for idx in 0..count {
        let truncated = || XfrError::Validation {
            layer: idx,
            reason: "truncated layer record".into(),
        };
        let kind = r.u8().ok_or_else(truncated)?;
        let ndims = r.u32().ok_or_else(truncated)? as usize;
        if ndims > 8 {
            return Err(XfrError::Validation {
                layer: idx,
                reason: format!("implausible rank {ndims}"),
            });
        }
        let dims: Vec<usize> = (0..ndims)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Option<_>>()
            .ok_or_else(truncated)?;
        let expect_rank = |rank: usize| -> Result<()> {
            if ndims != rank {
                return Err(XfrError::Validation {
                    layer: idx,
                    reason: format!("kind tag {kind} expects rank {rank}, got {ndims}"),
                });
            }
            Ok(())
        };
        let mut params = || -> Result<(Tensor<f32>, Tensor<f32>)> {
            let wlen: usize = dims.iter().product();
            let w = r.f32s(wlen).ok_or_else(|| XfrError::Validation {
                layer: idx,
                reason: format!("truncated weight blob (expected {wlen} values)"),
            })?;
            let b = r.f32s(dims[0]).ok_or_else(|| XfrError::Validation {
                layer: idx,
                reason: format!("truncated bias blob (expected {} values)", dims[0]),
            })?;
            Ok((Tensor::from_vec(&dims, w)?, Tensor::from_vec(&[dims[0]], b)?))
        };
        let layer = match kind {
            1 => {
                expect_rank(4)?;
                let (weight, bias) = params()?;
                Layer::Conv3x3 { weight, bias }
            }
            5 => {
                expect_rank(2)?;
                let (weight, bias) = params()?;
                Layer::FullyConnected { weight, bias }
            }
            2..=4 | 6 => {
                expect_rank(0)?;
                match kind {
                    2 => Layer::Relu,
                    3 => Layer::MaxPool2x2,
                    4 => Layer::GlobalAvgPool,
                    _ => Layer::L2Normalize,
                }
            }
            other => {
                return Err(XfrError::Validation {
                    layer: idx,
                    reason: format!("unknown layer kind tag {other}"),
                })
            }
        };
        layers.push(layer);
    }
    if r.pos != buf.len() {
        return Err(XfrError::Format(format!(
            "{} trailing bytes after last layer",
            buf.len() - r.pos
        )));
    }
    NetworkGraph::new(layers)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<NetworkGraph<f32>> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| XfrError::io(path, e))?;
    from_bytes(&buf)
}

/// Writes via a temporary sibling file and rename.
pub fn save_weights(net: &NetworkGraph<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    crate::io::write_atomic(path, &to_bytes(net))
}
