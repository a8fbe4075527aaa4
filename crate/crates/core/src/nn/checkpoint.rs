use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Dense, Mlp};
use crate::{DnrError, Result};

const MAGIC: &[u8; 8] = b"DNRCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named networks plus free-form JSON metadata.
///
/// Layout (little-endian): magic, version u32, metadata length u32, metadata
/// UTF-8, model count u32, then per model: name length u32, name, layer count
/// u32, and per layer fan_in u32, fan_out u32, weights row-major f64, bias f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub models: Vec<(String, Mlp)>,
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value) -> Self {
        Checkpoint { metadata, models: Vec::new() }
    }

    pub fn with(mut self, name: &str, model: &Mlp) -> Self {
        self.models.push((name.to_string(), model.clone()));
        self
    }

    pub fn model(&self, name: &str) -> Result<&Mlp> {
        self.models
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| DnrError::Checkpoint(format!("checkpoint has no model named {name:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let meta = self.metadata.to_string();
        put_u32(&mut out, meta.len() as u32);
        out.extend_from_slice(meta.as_bytes());
        put_u32(&mut out, self.models.len() as u32);
        for (name, net) in &self.models {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, net.layers.len() as u32);
            for layer in &net.layers {
                let (fi, fo) = layer.weight.dim();
                put_u32(&mut out, fi as u32);
                put_u32(&mut out, fo as u32);
                for v in layer.weight.iter().chain(layer.bias.iter()) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(DnrError::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(DnrError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = cur.u32()? as usize;
        let meta = std::str::from_utf8(cur.take(meta_len)?)
            .map_err(|e| DnrError::Checkpoint(format!("metadata is not UTF-8: {e}")))?;
        let metadata = serde_json::from_str(meta)?;
        let count = cur.u32()?;
        let mut models = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|e| DnrError::Checkpoint(format!("model name is not UTF-8: {e}")))?;
            let layer_count = cur.u32()?;
            let mut layers = Vec::with_capacity(layer_count as usize);
            for _ in 0..layer_count {
                let fi = cur.u32()? as usize;
                let fo = cur.u32()? as usize;
                let w: Vec<f64> = (0..fi * fo).map(|_| cur.f64()).collect::<Result<_>>()?;
                let b: Vec<f64> = (0..fo).map(|_| cur.f64()).collect::<Result<_>>()?;
                layers.push(Dense {
                    weight: Array2::from_shape_vec((fi, fo), w)
                        .map_err(|e| DnrError::Checkpoint(e.to_string()))?,
                    bias: Array1::from(b),
                });
            }
            for pair in layers.windows(2) {
                if pair[0].weight.ncols() != pair[1].weight.nrows() {
                    return Err(DnrError::Checkpoint(format!("layer shapes of {name:?} do not chain")));
                }
            }
            if layers.is_empty() {
                return Err(DnrError::Checkpoint(format!("model {name:?} has no layers")));
            }
            models.push((name, Mlp { layers }));
        }
        if cur.pos != bytes.len() {
            return Err(DnrError::Checkpoint("trailing bytes after the last model".into()));
        }
        Ok(Checkpoint { metadata, models })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&ckpt.to_bytes())?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Checkpoint::from_bytes(&bytes)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| DnrError::Checkpoint("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = Mlp::xavier(&[5, 7, 7, 3], &mut rng);
        let mut b = Mlp::xavier(&[2, 1], &mut rng);
        b.layers[0].bias[0] = -0.0;
        let ckpt = Checkpoint::new(serde_json::json!({"algo": "bcsac", "step": 6000}))
            .with("actor", &a)
            .with("q1", &b);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        write_checkpoint(&path, &ckpt).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.metadata, ckpt.metadata);
        for ((n1, m1), (n2, m2)) in ckpt.models.iter().zip(&back.models) {
            assert_eq!(n1, n2);
            let bits1: Vec<u64> = m1.flat_params().iter().map(|v| v.to_bits()).collect();
            let bits2: Vec<u64> = m2.flat_params().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits1, bits2);
            assert_eq!(m1.shapes(), m2.shapes());
        }
        assert_eq!(back.to_bytes(), ckpt.to_bytes());
    }

    #[test]
    fn truncated_and_bad_magic_are_rejected() {
        let ckpt = Checkpoint::new(serde_json::json!({})).with("v", &Mlp::zeros(&[2, 2]));
        let bytes = ckpt.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(ckpt.model("missing").is_err());
    }
}
