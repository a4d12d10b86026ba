//! The `ORTH` checkpoint container.
//!
//! Layout (all integers little-endian):
//! - magic `ORTH`, version `u32` = 1
//! - architecture descriptor: `u32` length + UTF-8 text
//! - tensor count `u32`, then per tensor: name (`u32` length + UTF-8),
//!   dtype byte (0 = f64, 1 = f32), rank byte, extents as `u32`,
//!   raw row-major data
//! - metadata block: `u32` length + UTF-8 `key=value` lines
//!   (seed, lambda, reference hash, final validation accuracy)
//!
//! The architecture descriptor makes "same architecture" mechanically
//! checkable when wiring up transfer experiments.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{build_model, parse_arch_descriptor, InitSpec, Model};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ORTH";
const VERSION: u32 = 1;

/// Storage precision for parameter tensors. Double is the working format;
/// single precision is an opt-in storage narrowing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

/// Run provenance stored alongside the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub lambda: f64,
    /// SHA-256 of the reference checkpoint file, or `none`.
    pub reference_hash: String,
    pub val_accuracy: f64,
}

impl CheckpointMeta {
    fn to_text(&self) -> String {
        format!(
            "seed={}\nlambda={}\nreference_hash={}\nval_acc={}\n",
            self.seed, self.lambda, self.reference_hash, self.val_accuracy
        )
    }

    fn from_text(text: &str) -> Result<Self> {
        let mut seed = None;
        let mut lambda = None;
        let mut reference_hash = None;
        let mut val_acc = None;
        for line in text.lines() {
            let Some((k, v)) = line.split_once('=') else { continue };
            match k {
                "seed" => seed = v.parse().ok(),
                "lambda" => lambda = v.parse().ok(),
                "reference_hash" => reference_hash = Some(v.to_string()),
                "val_acc" => val_acc = v.parse().ok(),
                _ => {}
            }
        }
        Ok(Self {
            seed: seed.ok_or_else(|| Error::FieldMismatch {
                field: "metadata.seed".into(),
                detail: text.into(),
            })?,
            lambda: lambda.ok_or_else(|| Error::FieldMismatch {
                field: "metadata.lambda".into(),
                detail: text.into(),
            })?,
            reference_hash: reference_hash.unwrap_or_else(|| "none".into()),
            val_accuracy: val_acc.unwrap_or(0.0),
        })
    }
}

/// SHA-256 of a file as lowercase hex; used to pin reference checkpoints.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, path: &Path, dtype: DType) -> Result<()> {
    fs::write(path, encode_checkpoint(model, meta, dtype))?;
    Ok(())
}

pub fn encode_checkpoint(model: &Model, meta: &CheckpointMeta, dtype: DType) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let arch = model.arch_descriptor();
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(arch.as_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, tensor) in model.params() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(match dtype {
            DType::F64 => 0,
            DType::F32 => 1,
        });
        out.push(tensor.shape().len() as u8);
        for &e in tensor.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        match dtype {
            DType::F64 => {
                for &v in tensor.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            DType::F32 => {
                for &v in tensor.data() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
    }
    let meta_text = meta.to_text();
    out.extend_from_slice(&(meta_text.len() as u32).to_le_bytes());
    out.extend_from_slice(meta_text.as_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Truncated { what: what.to_string() });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn text(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        if len > self.bytes.len() {
            return Err(Error::Truncated { what: what.to_string() });
        }
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::FieldMismatch {
            field: what.to_string(),
            detail: "not UTF-8".into(),
        })
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model, CheckpointMeta)> {
    let mut cur = Cursor { bytes, at: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic { what: "checkpoint", found: magic.to_vec() });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::BadVersion { what: "checkpoint", found: version });
    }
    let arch_text = cur.text("arch descriptor")?;
    let (input_shape, layers) = parse_arch_descriptor(&arch_text)?;
    // Rebuild the skeleton from the descriptor; this re-validates the layer
    // chain, then the stored tensors replace the fresh parameters.
    let mut model = build_model(input_shape, layers, InitSpec::xavier(0))?;

    let count = cur.u32("tensor count")? as usize;
    if count != model.params().len() {
        return Err(Error::FieldMismatch {
            field: "tensor count".into(),
            detail: format!("descriptor implies {}, file has {}", model.params().len(), count),
        });
    }
    let mut params = Vec::with_capacity(count);
    for i in 0..count {
        let name = cur.text(&format!("tensor {i} name"))?;
        let dtype = cur.u8(&format!("tensor {i} dtype"))?;
        if dtype > 1 {
            return Err(Error::FieldMismatch {
                field: format!("tensor {name} dtype"),
                detail: format!("unknown dtype {dtype}"),
            });
        }
        let rank = cur.u8(&format!("tensor {i} rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for d in 0..rank {
            shape.push(cur.u32(&format!("tensor {name} extent {d}"))? as usize);
        }
        let numel: usize = shape.iter().product();
        let expected = model
            .param(&name)
            .ok_or_else(|| Error::FieldMismatch {
                field: format!("tensor {name}"),
                detail: "not implied by the architecture descriptor".into(),
            })?
            .shape()
            .to_vec();
        if expected != shape {
            return Err(Error::FieldMismatch {
                field: format!("tensor {name} shape"),
                detail: format!("descriptor implies {expected:?}, file has {shape:?}"),
            });
        }
        let data: Vec<f64> = match dtype {
            0 => cur
                .take(numel * 8, &format!("tensor {name} data"))?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect(),
            _ => cur
                .take(numel * 4, &format!("tensor {name} data"))?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
        };
        params.push((name, Tensor::new(shape, data)?));
    }
    let meta_text = cur.text("metadata")?;
    let meta = CheckpointMeta::from_text(&meta_text)?;
    model.set_params(params)?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{desk_mlp, LayerSpec};

    fn sample_model() -> Model {
        build_model([1, 3, 3], desk_mlp([1, 3, 3], 2), InitSpec::xavier(11)).unwrap()
    }

    fn sample_meta() -> CheckpointMeta {
        CheckpointMeta { seed: 11, lambda: 30.0, reference_hash: "none".into(), val_accuracy: 0.97 }
    }

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let m = sample_model();
        let bytes = encode_checkpoint(&m, &sample_meta(), DType::F64);
        let (back, meta) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(meta, sample_meta());
        assert_eq!(back.arch_descriptor(), m.arch_descriptor());
        for ((n1, t1), (n2, t2)) in m.params().iter().zip(back.params()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data());
        }
    }

    #[test]
    fn f32_round_trip_is_single_precision_exact() {
        let m = sample_model();
        let bytes = encode_checkpoint(&m, &sample_meta(), DType::F32);
        let (back, _) = decode_checkpoint(&bytes).unwrap();
        for ((_, t1), (_, t2)) in m.params().iter().zip(back.params()) {
            for (a, b) in t1.data().iter().zip(t2.data()) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
    }

    #[test]
    fn corrupted_magic_is_a_typed_error() {
        let m = sample_model();
        let mut bytes = encode_checkpoint(&m, &sample_meta(), DType::F64);
        bytes[1] ^= 0xFF;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn bad_version_is_a_typed_error() {
        let m = sample_model();
        let mut bytes = encode_checkpoint(&m, &sample_meta(), DType::F64);
        bytes[4] = 9;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::BadVersion { found: 9, .. })));
    }

    #[test]
    fn truncation_is_a_typed_error() {
        let m = sample_model();
        let bytes = encode_checkpoint(&m, &sample_meta(), DType::F64);
        for cut in [3usize, 7, 15, bytes.len() / 2, bytes.len() - 1] {
            match decode_checkpoint(&bytes[..cut]) {
                Err(_) => {}
                Ok(_) => panic!("truncation at {cut} not detected"),
            }
        }
    }

    #[test]
    fn shape_tampering_names_the_field() {
        let m = build_model(
            [1, 1, 2],
            vec![LayerSpec::Dense { input: 2, output: 2 }],
            InitSpec::xavier(0),
        )
        .unwrap();
        let mut bytes = encode_checkpoint(&m, &sample_meta(), DType::F64);
        // First tensor extent starts right after magic(4) + version(4)
        // + arch text + count(4) + name + dtype(1) + rank(1).
        let arch_len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
        let name_len_at = 8 + 4 + arch_len + 4;
        let name_len =
            u32::from_le_bytes(bytes[name_len_at..name_len_at + 4].try_into().unwrap()) as usize;
        let extent_at = name_len_at + 4 + name_len + 2;
        bytes[extent_at] = 77;
        match decode_checkpoint(&bytes) {
            Err(Error::FieldMismatch { field, .. }) => assert!(field.contains("shape"), "{field}"),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn save_load_through_files(){
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.orth");
        let m = sample_model();
        save_checkpoint(&m, &sample_meta(), &path, DType::F64).unwrap();
        let (back, _) = load_checkpoint(&path).unwrap();
        assert_eq!(back.params()[0].1.data(), m.params()[0].1.data());
        let hash1 = file_sha256(&path).unwrap();
        save_checkpoint(&m, &sample_meta(), &path, DType::F64).unwrap();
        assert_eq!(file_sha256(&path).unwrap(), hash1);
    }
}
