//! Binary checkpoint container.
//!
//! Layout: magic "MUDP", u32 version, length-prefixed UTF-8 config text,
//! u32 blob count, then per blob: length-prefixed name, u8 dtype tag
//! (0 = f32, 1 = f64, 2 = u64), u8 ndim, u32 dims, little-endian payload.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::MuDeep;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"MUDP";
pub const VERSION: u32 = 1;

pub const DTYPE_F32: u8 = 0;
pub const DTYPE_F64: u8 = 1;
pub const DTYPE_U64: u8 = 2;

pub const MEAN_BLOB: &str = "data.mean";
pub const ITER_BLOB: &str = "train.iteration";
pub const CLASSIFIER_PREFIX: &str = "classifier";

#[derive(Clone, Debug)]
pub struct Blob {
    pub dtype: u8,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

impl Blob {
    pub fn from_f64_slice(dims: &[usize], values: impl Iterator<Item = f64>) -> Self {
        let mut payload = Vec::new();
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        Blob {
            dtype: DTYPE_F64,
            dims: dims.to_vec(),
            payload,
        }
    }

    pub fn from_tensor<S: Scalar>(t: &Tensor<S>) -> Self {
        let mut payload = Vec::with_capacity(t.numel() * S::BYTE_WIDTH);
        for &v in t.data() {
            v.to_le_bytes(&mut payload);
        }
        Blob {
            dtype: S::DTYPE_TAG,
            dims: t.shape().to_vec(),
            payload,
        }
    }

    pub fn from_u64(v: u64) -> Self {
        Blob {
            dtype: DTYPE_U64,
            dims: vec![1],
            payload: v.to_le_bytes().to_vec(),
        }
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    /// Numeric payload widened to f64 (f32 and f64 blobs).
    pub fn to_f64_vec(&self) -> Result<Vec<f64>> {
        let width = match self.dtype {
            DTYPE_F32 => 4,
            DTYPE_F64 => 8,
            t => return Err(Error::Protocol(format!("blob dtype {t} is not floating point"))),
        };
        if self.payload.len() != self.numel() * width {
            return Err(Error::Protocol(format!(
                "blob payload {} bytes, expected {}",
                self.payload.len(),
                self.numel() * width
            )));
        }
        Ok(self
            .payload
            .chunks_exact(width)
            .map(|c| {
                if width == 4 {
                    f32::from_le_bytes(c.try_into().unwrap()) as f64
                } else {
                    f64::from_le_bytes(c.try_into().unwrap())
                }
            })
            .collect())
    }

    pub fn to_u64(&self) -> Result<u64> {
        if self.dtype != DTYPE_U64 || self.payload.len() != 8 {
            return Err(Error::Protocol("blob is not a u64 counter".into()));
        }
        Ok(u64::from_le_bytes(self.payload[..8].try_into().unwrap()))
    }

    /// Exact-typed view when the stored dtype matches `S`, avoiding any
    /// round-trip through f64 (needed for bitwise save/load equality).
    pub fn to_tensor<S: Scalar>(&self) -> Result<Tensor<S>> {
        if self.dtype == S::DTYPE_TAG {
            let data = self
                .payload
                .chunks_exact(S::BYTE_WIDTH)
                .map(S::from_le_bytes)
                .collect();
            Tensor::from_vec(&self.dims, data)
        } else {
            let data = self.to_f64_vec()?.into_iter().map(S::from_f64).collect();
            Tensor::from_vec(&self.dims, data)
        }
    }
}

#[derive(Debug)]
pub struct Checkpoint {
    pub config_text: String,
    pub blobs: IndexMap<String, Blob>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_str(&mut out, &self.config_text);
        put_u32(&mut out, self.blobs.len() as u32);
        for (name, blob) in &self.blobs {
            put_str(&mut out, name);
            out.push(blob.dtype);
            out.push(blob.dims.len() as u8);
            for &d in &blob.dims {
                put_u32(&mut out, d as u32);
            }
            out.extend_from_slice(&blob.payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Protocol(format!(
                    "truncated checkpoint: wanted {n} bytes at offset {pos}",
                    pos = *pos
                )));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let get_u32 = |pos: &mut usize| -> Result<u32> {
            Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
        };
        let get_str = |pos: &mut usize| -> Result<String> {
            let n = get_u32(pos)? as usize;
            String::from_utf8(take(pos, n)?.to_vec())
                .map_err(|_| Error::Protocol("checkpoint string is not UTF-8".into()))
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(Error::Protocol("bad checkpoint magic (want MUDP)".into()));
        }
        let version = get_u32(&mut pos)?;
        if version != VERSION {
            return Err(Error::Protocol(format!(
                "unsupported checkpoint version {version} (want {VERSION})"
            )));
        }
        let config_text = get_str(&mut pos)?;
        let count = get_u32(&mut pos)? as usize;
        let mut blobs = IndexMap::new();
        for _ in 0..count {
            let name = get_str(&mut pos)?;
            let dtype = take(&mut pos, 1)?[0];
            let ndim = take(&mut pos, 1)?[0] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(get_u32(&mut pos)? as usize);
            }
            let numel: usize = dims.iter().product();
            let width = match dtype {
                DTYPE_F32 => 4,
                DTYPE_F64 => 8,
                DTYPE_U64 => 8,
                t => return Err(Error::Protocol(format!("unknown blob dtype tag {t}"))),
            };
            let payload = take(&mut pos, numel * width)?.to_vec();
            blobs.insert(name, Blob { dtype, dims, payload });
        }
        Ok(Checkpoint { config_text, blobs })
    }
}

/// Snapshot of a model: every parameter, every batch-norm running statistic,
/// the normalization mean, and the optimizer iteration counter.
pub fn snapshot<S: Scalar>(
    model: &MuDeep<S>,
    mean: &[f64; 3],
    iteration: u64,
    config_text: &str,
) -> Checkpoint {
    let mut blobs = IndexMap::new();
    for (name, p) in model.registry.iter() {
        blobs.insert(name.clone(), Blob::from_tensor(&p.borrow().value));
    }
    for (prefix, bn) in model.bn_layers() {
        let rm = bn.running_mean.borrow();
        let rv = bn.running_var.borrow();
        blobs.insert(
            format!("{prefix}.running_mean"),
            Blob::from_tensor(&Tensor::from_vec(&[rm.len()], rm.clone()).expect("sized")),
        );
        blobs.insert(
            format!("{prefix}.running_var"),
            Blob::from_tensor(&Tensor::from_vec(&[rv.len()], rv.clone()).expect("sized")),
        );
    }
    blobs.insert(
        MEAN_BLOB.to_string(),
        Blob::from_f64_slice(&[3], mean.iter().copied()),
    );
    blobs.insert(ITER_BLOB.to_string(), Blob::from_u64(iteration));
    Checkpoint {
        config_text: config_text.to_string(),
        blobs,
    }
}

pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    model: &MuDeep<S>,
    mean: &[f64; 3],
    iteration: u64,
    config_text: &str,
) -> Result<()> {
    let bytes = snapshot(model, mean, iteration, config_text).to_bytes();
    fs::write(path, bytes)
        .map_err(|e| Error::Data(format!("cannot write checkpoint {}: {e}", path.display())))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes)
}

/// Restores parameters and running statistics into `model`.
///
/// With `reinit_classifier`, classifier blobs are ignored and the model's
/// freshly initialized classifier (possibly a different width) is kept —
/// the fine-tuning path onto a dataset with a new identity count.
pub fn apply_checkpoint<S: Scalar>(
    model: &MuDeep<S>,
    ckpt: &Checkpoint,
    reinit_classifier: bool,
) -> Result<([f64; 3], u64)> {
    let mut mismatched = Vec::new();
    for (name, p) in model.registry.iter() {
        let skip = reinit_classifier && name.starts_with(CLASSIFIER_PREFIX);
        match ckpt.blobs.get(name) {
            Some(blob) if !skip => {
                let mut p = p.borrow_mut();
                if blob.dims != p.value.shape() {
                    mismatched.push(format!(
                        "{name}: checkpoint {:?} vs model {:?}",
                        blob.dims,
                        p.value.shape()
                    ));
                    continue;
                }
                p.value = blob.to_tensor()?;
                p.zero_grad();
            }
            Some(_) => {}
            None if skip => {}
            None => mismatched.push(format!("{name}: missing from checkpoint")),
        }
    }
    for (prefix, bn) in model.bn_layers() {
        if reinit_classifier && prefix.starts_with(CLASSIFIER_PREFIX) {
            continue;
        }
        for (suffix, store) in [
            ("running_mean", &bn.running_mean),
            ("running_var", &bn.running_var),
        ] {
            let key = format!("{prefix}.{suffix}");
            match ckpt.blobs.get(&key) {
                Some(blob) => {
                    let t: Tensor<S> = blob.to_tensor()?;
                    if t.numel() != store.borrow().len() {
                        mismatched.push(format!("{key}: length mismatch"));
                        continue;
                    }
                    *store.borrow_mut() = t.into_data();
                }
                None => mismatched.push(format!("{key}: missing from checkpoint")),
            }
        }
    }
    if !mismatched.is_empty() {
        return Err(Error::Protocol(format!(
            "checkpoint does not match model: {}",
            mismatched.join("; ")
        )));
    }
    let mean_v = ckpt
        .blobs
        .get(MEAN_BLOB)
        .ok_or_else(|| Error::Protocol("checkpoint missing normalization mean".into()))?
        .to_f64_vec()?;
    if mean_v.len() != 3 {
        return Err(Error::Protocol("normalization mean must have 3 entries".into()));
    }
    let iteration = ckpt
        .blobs
        .get(ITER_BLOB)
        .map(|b| b.to_u64())
        .transpose()?
        .unwrap_or(0);
    Ok(([mean_v[0], mean_v[1], mean_v[2]], iteration))
}
