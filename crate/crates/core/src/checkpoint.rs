//! Little-endian binary checkpoint for network flows.
//!
//! ```text
//! "SEJD"            magic
//! u32               format version (1)
//! u32 × 5           K, L, D, C, B
//! f32               scale clamp α
//! u8                flip flag (0/1)
//! u32               record count
//! record*           u32 name length, name bytes (UTF-8), u32 rank,
//!                   u32 × rank dims, f32 × Π dims payload
//! ```
//!
//! Records appear in canonical order: layer 1..K, and within each layer the
//! order of [`tensor_layout`]. Every length is checked against hard caps and
//! against the bytes actually remaining before anything is allocated.

use std::path::Path;

use crate::conditioner::{tensor_layout, ConditionerHyper, ConditionerParams};
use crate::flow::{FlowModel, NetworkFlow};
use crate::numerics::Matrix;

pub const MAGIC: [u8; 4] = *b"SEJD";
pub const FORMAT_VERSION: u32 = 1;

const MAX_LAYERS: u32 = 4096;
const MAX_BLOCKS: u32 = 1024;
const MAX_DIM: u32 = 1 << 16;
const MAX_NAME: u32 = 256;
const MAX_RANK: u32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic {found:02x?} at byte 0")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported checkpoint version {found} at byte 4 (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint truncated at byte {offset} while reading {context}")]
    Truncated { offset: usize, context: String },
    #[error("{what} = {value} at byte {offset} exceeds the limit {limit}")]
    Overflow {
        offset: usize,
        what: String,
        value: u64,
        limit: u64,
    },
    #[error("invalid checkpoint at byte {offset}: {reason}")]
    Invalid { offset: usize, reason: String },
    #[error("cannot checkpoint this model: {0}")]
    Unsupported(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CheckpointError {
    /// Byte offset the parse failed at, when there is one.
    pub fn offset(&self) -> Option<usize> {
        match self {
            CheckpointError::BadMagic { .. } => Some(0),
            CheckpointError::Version { .. } => Some(4),
            CheckpointError::Truncated { offset, .. }
            | CheckpointError::Overflow { offset, .. }
            | CheckpointError::Invalid { offset, .. } => Some(*offset),
            _ => None,
        }
    }
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// Hyperparameters shared by every layer of a network flow.
pub fn shared_hyper(model: &NetworkFlow) -> Result<ConditionerHyper> {
    let h = model.layers()[0].hyper;
    if model.layers().iter().any(|l| l.hyper != h) {
        return Err(CheckpointError::Unsupported(
            "layers have different hyperparameters".into(),
        ));
    }
    Ok(h)
}

pub fn encode_checkpoint(model: &NetworkFlow) -> Result<Vec<u8>> {
    let h = shared_hyper(model)?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    let u32s = [
        FORMAT_VERSION,
        model.num_layers() as u32,
        h.seq_len as u32,
        h.patch_dim as u32,
        h.channels as u32,
        h.blocks as u32,
    ];
    for v in u32s {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(h.scale_clamp as f32).to_le_bytes());
    out.push(model.flips() as u8);
    let per_layer = tensor_layout(&h).len();
    out.extend_from_slice(&((per_layer * model.num_layers()) as u32).to_le_bytes());
    for (k, layer) in model.layers().iter().enumerate() {
        for (name, m) in layer.tensors() {
            let full = format!("layer{}.{name}", k + 1);
            out.extend_from_slice(&(full.len() as u32).to_le_bytes());
            out.extend_from_slice(full.as_bytes());
            let dims: Vec<u32> = if m.rows() == 1 {
                vec![m.cols() as u32]
            } else {
                vec![m.rows() as u32, m.cols() as u32]
            };
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: impl FnOnce() -> String) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated {
                offset: self.buf.len(),
                context: context(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, context: impl FnOnce() -> String) -> Result<u32> {
        let b = self.take(4, context)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn capped(value: u32, limit: u32, what: &str, offset: usize) -> Result<u32> {
    if value > limit {
        return Err(CheckpointError::Overflow {
            offset,
            what: what.to_string(),
            value: value as u64,
            limit: limit as u64,
        });
    }
    Ok(value)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<NetworkFlow> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, || "magic".into())?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic.to_vec() });
    }
    let version = r.u32(|| "format version".into())?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let mut header = [0u32; 5];
    let names = ["layers", "seq_len", "patch_dim", "channels", "blocks"];
    let limits = [MAX_LAYERS, MAX_DIM, MAX_DIM, MAX_DIM, MAX_BLOCKS];
    for i in 0..5 {
        let at = r.pos;
        let v = r.u32(|| format!("header field {}", names[i]))?;
        header[i] = capped(v, limits[i], names[i], at)?;
    }
    let alpha_at = r.pos;
    let alpha = f32::from_le_bytes(
        r.take(4, || "header field scale_clamp".into())?
            .try_into()
            .expect("4 bytes"),
    );
    let flip_at = r.pos;
    let flip = match r.take(1, || "header field flip".into())?[0] {
        0 => false,
        1 => true,
        other => {
            return Err(CheckpointError::Invalid {
                offset: flip_at,
                reason: format!("flip flag {other}"),
            })
        }
    };
    let [k, l, d, c, b] = header.map(|v| v as usize);
    let hyper = ConditionerHyper {
        seq_len: l,
        patch_dim: d,
        channels: c,
        blocks: b,
        scale_clamp: alpha as f64,
    };
    if k == 0 || hyper.validate().is_err() {
        return Err(CheckpointError::Invalid {
            offset: alpha_at,
            reason: format!("invalid hyperparameters K={k} {hyper:?}"),
        });
    }
    let layout = tensor_layout(&hyper);
    let count_at = r.pos;
    let count = r.u32(|| "record count".into())? as usize;
    if count != layout.len() * k {
        return Err(CheckpointError::Invalid {
            offset: count_at,
            reason: format!("{count} records, expected {}", layout.len() * k),
        });
    }

    let mut layers = Vec::with_capacity(k);
    for layer in 1..=k {
        let mut tensors = Vec::with_capacity(layout.len());
        for (tname, rows, cols) in &layout {
            let expected = format!("layer{layer}.{tname}");
            let at = r.pos;
            let name_len = capped(
                r.u32(|| format!("name length of record {expected}"))?,
                MAX_NAME,
                "name length",
                at,
            )? as usize;
            let name_bytes = r.take(name_len, || format!("name of record {expected}"))?;
            if name_bytes != expected.as_bytes() {
                return Err(CheckpointError::Invalid {
                    offset: at + 4,
                    reason: format!(
                        "record '{}' where '{expected}' was expected",
                        String::from_utf8_lossy(name_bytes)
                    ),
                });
            }
            let at = r.pos;
            let rank = capped(r.u32(|| format!("rank of {expected}"))?, MAX_RANK, "rank", at)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let at = r.pos;
                dims.push(capped(r.u32(|| format!("dims of {expected}"))?, MAX_DIM * 4, "dimension", at)? as usize);
            }
            let want: Vec<usize> = if *rows == 1 { vec![*cols] } else { vec![*rows, *cols] };
            if dims != want {
                return Err(CheckpointError::Invalid {
                    offset: at,
                    reason: format!("{expected} has dims {dims:?}, expected {want:?}"),
                });
            }
            let n = rows * cols;
            if n * 4 > r.remaining() {
                return Err(CheckpointError::Truncated {
                    offset: bytes.len(),
                    context: format!("payload of {expected} ({n} values)"),
                });
            }
            let payload = r.take(n * 4, || format!("payload of {expected}"))?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
                return Err(CheckpointError::Invalid {
                    offset: r.pos - n * 4 + bad * 4,
                    reason: format!("non-finite value in {expected}"),
                });
            }
            tensors.push(Matrix::from_vec(*rows, *cols, data).expect("length checked"));
        }
        layers.push(ConditionerParams::from_tensors(hyper, tensors).expect("layout checked"));
    }
    if r.remaining() != 0 {
        return Err(CheckpointError::Invalid {
            offset: r.pos,
            reason: format!("{} trailing bytes", r.remaining()),
        });
    }
    FlowModel::new(layers, flip).map_err(|e| CheckpointError::Invalid {
        offset: 0,
        reason: e.to_string(),
    })
}

pub fn save_checkpoint(model: &NetworkFlow, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<NetworkFlow> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn model(flip: bool) -> NetworkFlow {
        let h = ConditionerHyper {
            seq_len: 4,
            patch_dim: 2,
            channels: 4,
            blocks: 2,
            scale_clamp: 2.0,
        };
        let mut rng = Rng::new(1);
        let layers = (0..3)
            .map(|_| {
                let mut p = ConditionerParams::init(&mut rng, h).unwrap();
                p.head_w = rng.normal_matrix(4, 4, 0.1);
                p
            })
            .collect();
        FlowModel::new(layers, flip).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        for flip in [false, true] {
            let m = model(flip);
            let bytes = encode_checkpoint(&m).unwrap();
            let back = decode_checkpoint(&bytes).unwrap();
            assert_eq!(back.flips(), flip);
            for (a, b) in m.layers().iter().zip(back.layers()) {
                assert_eq!(a, b);
            }
            assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.sejd");
        let m = model(true);
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        save_checkpoint(&back, dir.path().join("again.sejd")).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(dir.path().join("again.sejd")).unwrap()
        );
    }

    #[test]
    fn truncation_names_the_record() {
        let bytes = encode_checkpoint(&model(false)).unwrap();
        let err = decode_checkpoint(&bytes[..bytes.len() - 1]).unwrap_err();
        match err {
            CheckpointError::Truncated { context, offset } => {
                assert!(context.contains("layer3.head.b"), "{context}");
                assert_eq!(offset, bytes.len() - 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_checkpoint(&model(false)).unwrap();
        bytes[4] = 9;
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(CheckpointError::Version { found: 9 })
        ));
        bytes[1] ^= 0xff;
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(CheckpointError::BadMagic { .. })
        ));
    }

    #[test]
    fn oversized_header_rejected_before_allocation() {
        let mut bytes = encode_checkpoint(&model(false)).unwrap();
        bytes[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        let err = decode_checkpoint(&bytes).unwrap_err();
        assert!(matches!(err, CheckpointError::Overflow { offset: 12, .. }), "{err:?}");
    }
}
