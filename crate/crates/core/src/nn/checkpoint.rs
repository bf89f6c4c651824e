//! Flat binary checkpoints.
//!
//! Layout: header (magic `WSCK`, format version, layer specs), then every
//! trainable layer's parameters as little-endian f64 (weight row-major, then
//! bias) in layer order, then an optional cosine-head section (weights,
//! counters, temperature).

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::head::CosineHead;
use crate::nn::{LayerKind, LayerParams, LayerSpec, Network};

const MAGIC: u32 = u32::from_le_bytes(*b"WSCK");
const FORMAT_VERSION: u32 = 1;

fn kind_code(kind: LayerKind) -> u32 {
    match kind {
        LayerKind::Dense => 0,
        LayerKind::PointwiseConv => 1,
        LayerKind::GlobalAvgPool => 2,
        LayerKind::Gelu => 3,
    }
}

fn kind_from_code(code: u32) -> Result<LayerKind> {
    Ok(match code {
        0 => LayerKind::Dense,
        1 => LayerKind::PointwiseConv,
        2 => LayerKind::GlobalAvgPool,
        3 => LayerKind::Gelu,
        other => return Err(Error::Data(format!("unknown layer kind code {other}"))),
    })
}

pub fn checkpoint_bytes(net: &Network, head: Option<&CosineHead>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(MAGIC.to_le_bytes());
    out.extend(FORMAT_VERSION.to_le_bytes());
    out.extend((net.specs().len() as u32).to_le_bytes());
    for spec in net.specs() {
        out.extend(kind_code(spec.kind).to_le_bytes());
        out.extend((spec.in_dim.unwrap_or(0) as u32).to_le_bytes());
        out.extend((spec.out_dim.unwrap_or(0) as u32).to_le_bytes());
    }
    for params in net.params().iter().flatten() {
        for v in params.weight.iter() {
            out.extend(v.to_le_bytes());
        }
        for v in params.bias.iter() {
            out.extend(v.to_le_bytes());
        }
    }
    match head {
        None => out.extend(0u32.to_le_bytes()),
        Some(head) => {
            out.extend(1u32.to_le_bytes());
            out.extend((head.n_classes() as u32).to_le_bytes());
            out.extend((head.embed_dim() as u32).to_le_bytes());
            for v in head.weights().iter() {
                out.extend(v.to_le_bytes());
            }
            for c in head.counters() {
                out.extend(c.to_le_bytes());
            }
            out.extend(head.tau().to_le_bytes());
        }
    }
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(Network, Option<CosineHead>)> {
    let mut reader = ByteReader { bytes, at: 0 };
    if reader.u32()? != MAGIC {
        return Err(Error::Data("checkpoint magic mismatch".into()));
    }
    let version = reader.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let n_layers = reader.u32()? as usize;
    let mut specs = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let kind = kind_from_code(reader.u32()?)?;
        let in_dim = reader.u32()? as usize;
        let out_dim = reader.u32()? as usize;
        let trainable = matches!(kind, LayerKind::Dense | LayerKind::PointwiseConv);
        specs.push(LayerSpec {
            kind,
            in_dim: trainable.then_some(in_dim),
            out_dim: trainable.then_some(out_dim),
        });
    }
    let mut params = Vec::with_capacity(n_layers);
    for spec in &specs {
        if spec.is_trainable() {
            let (in_dim, out_dim) = (spec.in_dim.unwrap(), spec.out_dim.unwrap());
            let weight = reader.f64s(out_dim * in_dim)?;
            let bias = reader.f64s(out_dim)?;
            params.push(Some(LayerParams {
                weight: Array2::from_shape_vec((out_dim, in_dim), weight).unwrap(),
                bias: Array1::from(bias),
            }));
        } else {
            params.push(None);
        }
    }
    let net = Network::from_parts(specs, params)?;

    let head = match reader.u32()? {
        0 => None,
        1 => {
            let k = reader.u32()? as usize;
            let e = reader.u32()? as usize;
            let weights = reader.f64s(k * e)?;
            let counters = reader.u64s(k)?;
            let tau = f64::from_le_bytes(reader.take(8)?.try_into().unwrap());
            Some(CosineHead::from_parts(
                Array2::from_shape_vec((k, e), weights).unwrap(),
                counters,
                tau,
            )?)
        }
        other => return Err(Error::Data(format!("bad head flag {other}"))),
    };
    if reader.at != bytes.len() {
        return Err(Error::Data("checkpoint has trailing bytes".into()));
    }
    Ok((net, head))
}

pub fn save(path: &Path, net: &Network, head: Option<&CosineHead>) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(net, head))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Network, Option<CosineHead>)> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at + n;
        let chunk = self
            .bytes
            .get(self.at..end)
            .ok_or_else(|| Error::Data("checkpoint truncated".into()))?;
        self.at = end;
        Ok(chunk)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(count * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn u64s(&mut self, count: usize) -> Result<Vec<u64>> {
        Ok(self
            .take(count * 8)?
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
