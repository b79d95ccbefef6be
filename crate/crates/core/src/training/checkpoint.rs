//! Single-file model checkpoints.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic        12 bytes  b"rfl-ckpt-v1\n"
//! dtype size    u8       4 (f32) or 8 (f64)
//! flags         u8       bit0 has optimizer state, bit1 shared backbone,
//!                        bit2 zero-init memory
//! gate kernel   u8
//! reserved      u8
//! iteration     u64
//! pixel shift   f64      input-normalization constants
//! pixel scale   f64
//! tensor count  u32
//! per tensor:   u16 name length + name bytes, u8 rank + rank x u64 dims,
//!               numel x dtype values
//! optimizer:    u64 step count, u32 tensor pair count,
//!               per pair: u64 numel, numel x dtype (first moment),
//!               numel x dtype (second moment)
//! digest       32 bytes  SHA-256 of everything above
//! ```
//!
//! Every persistent tensor is stored by name (weights, biases, BN affine
//! parameters and running statistics, LSTM and memory-initialization
//! parameters), so a load restores bit-identical forward behavior in both
//! train and infer modes.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{RflModel, VariantConfig, PIXEL_SCALE, PIXEL_SHIFT};
use crate::nn::adam::Adam;
use crate::rng::rng_from_seed;
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 12] = b"rfl-ckpt-v1\n";

pub struct LoadedCheckpoint<T: Scalar> {
    pub model: RflModel<T>,
    pub adam: Option<Adam<T>>,
    pub iter: u64,
}

impl<T: Scalar> std::fmt::Debug for LoadedCheckpoint<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LoadedCheckpoint")
            .field("iter", &self.iter)
            .field("variant", &self.model.variant)
            .field("adam", &self.adam.is_some())
            .finish()
    }
}

struct HashWriter<W: Write> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> Write for HashWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }
    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

struct HashReader<R: Read> {
    inner: R,
    hasher: Sha256,
}

impl<R: Read> Read for HashReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }
}

fn werr(path: &Path, e: std::io::Error) -> Error {
    Error::io(path.display().to_string(), e)
}

fn values_to_bytes<T: Scalar>(vals: &[T], out: &mut Vec<u8>) {
    out.clear();
    if std::mem::size_of::<T>() == 4 {
        for v in vals {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    } else {
        for v in vals {
            out.extend_from_slice(&v.to_f64().to_le_bytes());
        }
    }
}

fn write_values<T: Scalar, W: Write>(
    w: &mut W,
    vals: &[T],
    buf: &mut Vec<u8>,
) -> std::io::Result<()> {
    for chunk in vals.chunks(1 << 20) {
        values_to_bytes(chunk, buf);
        w.write_all(buf)?;
    }
    Ok(())
}

fn read_values<T: Scalar, R: Read>(
    r: &mut R,
    dtype: u8,
    numel: usize,
    buf: &mut Vec<u8>,
) -> std::io::Result<Vec<T>> {
    let mut out = Vec::with_capacity(numel);
    let mut left = numel;
    while left > 0 {
        let n = left.min(1 << 20);
        buf.resize(n * dtype as usize, 0);
        r.read_exact(buf)?;
        if dtype == 4 {
            for c in buf.chunks_exact(4) {
                out.push(T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64));
            }
        } else {
            for c in buf.chunks_exact(8) {
                out.push(T::from_f64(f64::from_le_bytes(c.try_into().unwrap())));
            }
        }
        left -= n;
    }
    Ok(out)
}

/// Write the model (and optionally optimizer state) to `path`. The file is
/// assembled under a temporary name and renamed into place so a crash never
/// leaves a torn checkpoint at the target path.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &RflModel<T>,
    adam: Option<&Adam<T>>,
    iter: u64,
) -> Result<()> {
    let tmp = path.with_extension("ckpt-tmp");
    {
        let f = File::create(&tmp).map_err(|e| werr(&tmp, e))?;
        let mut w = HashWriter {
            inner: BufWriter::new(f),
            hasher: Sha256::new(),
        };
        let mut io = || -> std::io::Result<()> {
            w.write_all(CHECKPOINT_MAGIC)?;
            w.write_all(&[std::mem::size_of::<T>() as u8])?;
            let mut flags = 0u8;
            if adam.is_some() {
                flags |= 1;
            }
            if model.variant.shared_backbone {
                flags |= 2;
            }
            if model.variant.zero_init {
                flags |= 4;
            }
            w.write_all(&[flags, model.variant.gate_kernel as u8, 0])?;
            w.write_all(&iter.to_le_bytes())?;
            w.write_all(&PIXEL_SHIFT.to_le_bytes())?;
            w.write_all(&PIXEL_SCALE.to_le_bytes())?;

            let mut count = 0u32;
            model.visit_all(|_, _| count += 1);
            w.write_all(&count.to_le_bytes())?;
            let mut buf = Vec::new();
            let mut res = Ok(());
            model.visit_all(|name, t| {
                if res.is_err() {
                    return;
                }
                res = (|| {
                    w.write_all(&(name.len() as u16).to_le_bytes())?;
                    w.write_all(name.as_bytes())?;
                    w.write_all(&[t.dims().len() as u8])?;
                    for &d in t.dims() {
                        w.write_all(&(d as u64).to_le_bytes())?;
                    }
                    write_values(&mut w, t.data(), &mut buf)
                })();
            });
            res?;

            if let Some(a) = adam {
                w.write_all(&a.t.to_le_bytes())?;
                w.write_all(&(a.m.len() as u32).to_le_bytes())?;
                for (m, v) in a.m.iter().zip(&a.v) {
                    w.write_all(&(m.numel() as u64).to_le_bytes())?;
                    write_values(&mut w, m.data(), &mut buf)?;
                    write_values(&mut w, v.data(), &mut buf)?;
                }
            }
            Ok(())
        };
        io().map_err(|e| werr(&tmp, e))?;
        let digest = w.hasher.clone().finalize();
        w.inner.write_all(&digest).map_err(|e| werr(&tmp, e))?;
        w.inner.flush().map_err(|e| werr(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| werr(path, e))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<LoadedCheckpoint<T>> {
    let f = File::open(path).map_err(|e| werr(path, e))?;
    let mut r = HashReader {
        inner: BufReader::new(f),
        hasher: Sha256::new(),
    };
    let ioe = |e: std::io::Error| werr(path, e);

    let mut magic = [0u8; 12];
    r.read_exact(&mut magic).map_err(ioe)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointVersion {
            found: String::from_utf8_lossy(&magic).trim_end().to_string(),
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC)
                .trim_end()
                .to_string(),
        });
    }
    let mut head = [0u8; 4];
    r.read_exact(&mut head).map_err(ioe)?;
    let [dtype, flags, gate_kernel, _] = head;
    if dtype != 4 && dtype != 8 {
        return Err(Error::CheckpointCorrupt(format!(
            "unsupported element size {dtype}"
        )));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf).map_err(ioe)?;
    let iter = u64::from_le_bytes(u64buf);
    r.read_exact(&mut u64buf).map_err(ioe)?;
    let shift = f64::from_le_bytes(u64buf);
    r.read_exact(&mut u64buf).map_err(ioe)?;
    let scale = f64::from_le_bytes(u64buf);
    if shift != PIXEL_SHIFT || scale != PIXEL_SCALE {
        return Err(Error::CheckpointCorrupt(format!(
            "incompatible pixel normalization (shift {shift}, scale {scale})"
        )));
    }

    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(ioe)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut buf = Vec::new();
    let mut tensors: HashMap<String, Tensor<T>> = HashMap::with_capacity(count);
    for _ in 0..count {
        let mut u16buf = [0u8; 2];
        r.read_exact(&mut u16buf).map_err(ioe)?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        buf.resize(name_len, 0);
        r.read_exact(&mut buf).map_err(ioe)?;
        let name = String::from_utf8(buf.clone())
            .map_err(|_| Error::CheckpointCorrupt("non-UTF8 tensor name".into()))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank).map_err(ioe)?;
        let mut dims = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            r.read_exact(&mut u64buf).map_err(ioe)?;
            dims.push(u64::from_le_bytes(u64buf) as usize);
        }
        let numel: usize = dims.iter().product();
        if numel > (1 << 30) {
            return Err(Error::CheckpointCorrupt(format!(
                "tensor {name} claims {numel} elements"
            )));
        }
        let data = read_values::<T, _>(&mut r, dtype, numel, &mut buf).map_err(ioe)?;
        tensors.insert(name, Tensor::from_vec(&dims, data));
    }

    let adam = if flags & 1 != 0 {
        r.read_exact(&mut u64buf).map_err(ioe)?;
        let t = u64::from_le_bytes(u64buf);
        r.read_exact(&mut u32buf).map_err(ioe)?;
        let pairs = u32::from_le_bytes(u32buf) as usize;
        let mut m = Vec::with_capacity(pairs);
        let mut v = Vec::with_capacity(pairs);
        for _ in 0..pairs {
            r.read_exact(&mut u64buf).map_err(ioe)?;
            let numel = u64::from_le_bytes(u64buf) as usize;
            if numel > (1 << 30) {
                return Err(Error::CheckpointCorrupt(format!(
                    "optimizer tensor claims {numel} elements"
                )));
            }
            m.push(read_values::<T, _>(&mut r, dtype, numel, &mut buf).map_err(ioe)?);
            v.push(read_values::<T, _>(&mut r, dtype, numel, &mut buf).map_err(ioe)?);
        }
        Some((t, m, v))
    } else {
        None
    };

    // Trailer: the stored digest must match the hash of everything read.
    let computed = r.hasher.clone().finalize();
    let mut stored = [0u8; 32];
    r.read_exact(&mut stored).map_err(ioe)?;
    if stored != computed[..] {
        return Err(Error::CheckpointCorrupt("integrity digest mismatch".into()));
    }
    let mut extra = [0u8; 1];
    if r.inner.read(&mut extra).map_err(ioe)? != 0 {
        return Err(Error::CheckpointCorrupt(
            "trailing bytes after digest".into(),
        ));
    }

    // Rebuild a model skeleton of the right variant and fill it by name.
    let variant = VariantConfig {
        shared_backbone: flags & 2 != 0,
        zero_init: flags & 4 != 0,
        gate_kernel: gate_kernel as usize,
    };
    if variant.gate_kernel != 1 && variant.gate_kernel != 3 {
        return Err(Error::CheckpointCorrupt(format!(
            "unsupported gate kernel {gate_kernel}"
        )));
    }
    let mut model = RflModel::<T>::new(&mut rng_from_seed(0), &variant);
    let mut missing: Vec<String> = Vec::new();
    let mut bad_shape: Vec<String> = Vec::new();
    let mut tensors = tensors;
    model.visit_all_mut(|name, t| match tensors.remove(name) {
        Some(loaded) => {
            if loaded.dims() == t.dims() {
                *t = loaded;
            } else {
                bad_shape.push(name.to_string());
            }
        }
        None => missing.push(name.to_string()),
    });
    if !missing.is_empty() || !bad_shape.is_empty() || !tensors.is_empty() {
        let extra: Vec<String> = tensors.into_keys().collect();
        return Err(Error::CheckpointCorrupt(format!(
            "tensor mismatch (missing {missing:?}, wrong shape {bad_shape:?}, unknown {extra:?})"
        )));
    }

    let adam = match adam {
        None => None,
        Some((t, m, v)) => {
            let dims = model.trainable_dims();
            if m.len() != dims.len() {
                return Err(Error::CheckpointCorrupt(format!(
                    "optimizer state has {} tensors, model has {} trainable",
                    m.len(),
                    dims.len()
                )));
            }
            let build = |flat: Vec<Vec<T>>| -> std::result::Result<Vec<Tensor<T>>, Error> {
                flat.into_iter()
                    .zip(&dims)
                    .map(|(data, d)| {
                        if data.len() == d.iter().product::<usize>() {
                            Ok(Tensor::from_vec(d, data))
                        } else {
                            Err(Error::CheckpointCorrupt(
                                "optimizer tensor size mismatch".into(),
                            ))
                        }
                    })
                    .collect()
            };
            Some(Adam {
                t,
                m: build(m)?,
                v: build(v)?,
            })
        }
    };

    Ok(LoadedCheckpoint { model, adam, iter })
}
