//! Binary tensor containers for model weights and optimizer state.
//!
//! Little-endian raw scalars under a small self-describing header; floats
//! round-trip exactly, which is what makes checkpoint-reload evaluation
//! reproduce scores to full precision.

use crate::models::{BnStrategy, Discriminator, Generator, GeneratorSpec, ModelError};
use crate::nn::{Adam, ParamSet};
use crate::scalar::Scalar;
use crate::seeding::derive_rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const WEIGHTS_MAGIC: &[u8; 4] = b"MIRW";
const ADAM_MAGIC: &[u8; 4] = b"MIRA";
const VERSION: u32 = 1;

fn write_header(out: &mut impl Write, magic: &[u8; 4], dtype: &str) -> std::io::Result<()> {
    out.write_all(magic)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(dtype.len() as u32).to_le_bytes())?;
    out.write_all(dtype.as_bytes())?;
    Ok(())
}

fn read_header(input: &mut impl Read, magic: &[u8; 4], dtype: &str) -> Result<(), ModelError> {
    let mut m = [0u8; 4];
    input.read_exact(&mut m)?;
    if &m != magic {
        return Err(ModelError::Checkpoint("bad file magic".into()));
    }
    let v = read_u32(input)?;
    if v != VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported checkpoint version {v}"
        )));
    }
    let n = read_u32(input)? as usize;
    let mut tag = vec![0u8; n];
    input.read_exact(&mut tag)?;
    let tag = String::from_utf8_lossy(&tag);
    if tag != dtype {
        return Err(ModelError::Checkpoint(format!(
            "checkpoint dtype {tag} does not match model dtype {dtype}"
        )));
    }
    Ok(())
}

fn read_u32(input: &mut impl Read) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(input: &mut impl Read) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn write_tensor<T: Scalar>(out: &mut impl Write, t: &Tensor<T>) -> std::io::Result<()> {
    out.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut bytes = Vec::new();
    T::write_le(t.data(), &mut bytes);
    out.write_all(&bytes)?;
    Ok(())
}

fn read_tensor_into<T: Scalar>(
    input: &mut impl Read,
    dst: &mut Tensor<T>,
    what: &str,
) -> Result<(), ModelError> {
    let rank = read_u32(input)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(input)? as usize);
    }
    if shape != dst.shape() {
        return Err(ModelError::Checkpoint(format!(
            "{what}: stored shape {:?} does not match model shape {:?}",
            shape,
            dst.shape()
        )));
    }
    let mut bytes = vec![0u8; dst.len() * T::BYTES];
    input.read_exact(&mut bytes)?;
    *dst = Tensor::from_vec(&shape, T::read_le(&bytes));
    Ok(())
}

/// Writes a parameter set plus non-trainable buffers.
pub fn write_store<T: Scalar>(
    path: &Path,
    params: &ParamSet<T>,
    buffers: &[&Tensor<T>],
) -> Result<(), ModelError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_header(&mut out, WEIGHTS_MAGIC, T::DTYPE)?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    out.write_all(&(buffers.len() as u32).to_le_bytes())?;
    for i in 0..params.len() {
        write_tensor(&mut out, params.at(i))?;
    }
    for b in buffers {
        write_tensor(&mut out, b)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a store written by [`write_store`], validating every tensor shape
/// against the supplied expectations.
#[allow(clippy::type_complexity)]
pub fn read_store<T: Scalar>(
    path: &Path,
    param_shapes: &[Vec<usize>],
    buffer_shapes: &[Vec<usize>],
) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>), ModelError> {
    let mut input = BufReader::new(File::open(path)?);
    read_header(&mut input, WEIGHTS_MAGIC, T::DTYPE)?;
    let n_params = read_u32(&mut input)? as usize;
    let n_buffers = read_u32(&mut input)? as usize;
    if n_params != param_shapes.len() || n_buffers != buffer_shapes.len() {
        return Err(ModelError::Checkpoint(format!(
            "store holds {n_params} params / {n_buffers} buffers, model expects {} / {}",
            param_shapes.len(),
            buffer_shapes.len()
        )));
    }
    let mut params = Vec::with_capacity(n_params);
    for (i, shape) in param_shapes.iter().enumerate() {
        let mut t = Tensor::zeros(shape);
        read_tensor_into(&mut input, &mut t, &format!("param {i}"))?;
        params.push(t);
    }
    let mut buffers = Vec::with_capacity(n_buffers);
    for (i, shape) in buffer_shapes.iter().enumerate() {
        let mut t = Tensor::zeros(shape);
        read_tensor_into(&mut input, &mut t, &format!("buffer {i}"))?;
        buffers.push(t);
    }
    Ok((params, buffers))
}

/// Assigns the tensors from [`read_store`] back into a model's parameter set
/// and buffer list.
pub fn load_into<T: Scalar>(
    path: &Path,
    params: &mut ParamSet<T>,
    buffers: &mut [&mut Tensor<T>],
) -> Result<(), ModelError> {
    let param_shapes: Vec<Vec<usize>> =
        (0..params.len()).map(|i| params.at(i).shape().to_vec()).collect();
    let buffer_shapes: Vec<Vec<usize>> = buffers.iter().map(|b| b.shape().to_vec()).collect();
    let (ps, bs) = read_store(path, &param_shapes, &buffer_shapes)?;
    for (i, t) in ps.into_iter().enumerate() {
        *params.at_mut(i) = t;
    }
    for (dst, src) in buffers.iter_mut().zip(bs) {
        **dst = src;
    }
    Ok(())
}

/// Writes Adam moment buffers and step counters.
pub fn write_adam<T: Scalar>(path: &Path, adam: &Adam<T>) -> Result<(), ModelError> {
    let (m, v, t) = adam.state();
    let mut out = BufWriter::new(File::create(path)?);
    write_header(&mut out, ADAM_MAGIC, T::DTYPE)?;
    out.write_all(&(m.len() as u32).to_le_bytes())?;
    for i in 0..m.len() {
        out.write_all(&t[i].to_le_bytes())?;
        write_tensor(&mut out, &m[i])?;
        write_tensor(&mut out, &v[i])?;
    }
    out.flush()?;
    Ok(())
}

/// Restores Adam state written by [`write_adam`].
pub fn read_adam<T: Scalar>(path: &Path, adam: &mut Adam<T>) -> Result<(), ModelError> {
    let (m0, _, _) = adam.state();
    let expected = m0.len();
    let shapes: Vec<Vec<usize>> = m0.iter().map(|t| t.shape().to_vec()).collect();
    let mut input = BufReader::new(File::open(path)?);
    read_header(&mut input, ADAM_MAGIC, T::DTYPE)?;
    let n = read_u32(&mut input)? as usize;
    if n != expected {
        return Err(ModelError::Checkpoint(format!(
            "optimizer store holds {n} entries, model expects {expected}"
        )));
    }
    let mut ms = Vec::with_capacity(n);
    let mut vs = Vec::with_capacity(n);
    let mut ts = Vec::with_capacity(n);
    for shape in &shapes {
        ts.push(read_u64(&mut input)?);
        let mut m = Tensor::zeros(shape);
        read_tensor_into(&mut input, &mut m, "adam m")?;
        let mut v = Tensor::zeros(shape);
        read_tensor_into(&mut input, &mut v, "adam v")?;
        ms.push(m);
        vs.push(v);
    }
    adam.restore_state(ms, vs, ts);
    Ok(())
}

/// JSON metadata written next to the binary stores of one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
    pub spec: GeneratorSpec,
    pub disc_width: usize,
    pub bn_strategy: BnStrategy,
    pub dtype: String,
    pub test_auroc: f64,
}

const META_FILE: &str = "meta.json";
const GEN_FILE: &str = "generator.bin";
const DISC_FILE: &str = "discriminator.bin";
const OPT_G_FILE: &str = "opt_g.bin";
const OPT_D_FILE: &str = "opt_d.bin";

/// Writes a complete checkpoint directory: both models, both optimizer
/// states and the metadata record.
pub fn save_bundle<T: Scalar>(
    dir: &Path,
    gen: &Generator<T>,
    disc: &Discriminator<T>,
    opt_g: &Adam<T>,
    opt_d: &Adam<T>,
    meta: &CheckpointMeta,
) -> Result<(), ModelError> {
    std::fs::create_dir_all(dir)?;
    gen.save_weights(&dir.join(GEN_FILE))?;
    disc.save_weights(&dir.join(DISC_FILE))?;
    write_adam(&dir.join(OPT_G_FILE), opt_g)?;
    write_adam(&dir.join(OPT_D_FILE), opt_d)?;
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| ModelError::Checkpoint(format!("metadata: {e}")))?;
    std::fs::write(dir.join(META_FILE), json)?;
    Ok(())
}

pub fn load_meta(dir: &Path) -> Result<CheckpointMeta, ModelError> {
    let text = std::fs::read_to_string(dir.join(META_FILE))?;
    serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(format!("metadata: {e}")))
}

/// Rebuilds the generator recorded in a checkpoint directory.
pub fn load_generator<T: Scalar>(dir: &Path) -> Result<(Generator<T>, CheckpointMeta), ModelError> {
    let meta = load_meta(dir)?;
    if meta.dtype != T::DTYPE {
        return Err(ModelError::Checkpoint(format!(
            "checkpoint dtype {} does not match requested {}",
            meta.dtype,
            T::DTYPE
        )));
    }
    // weights are overwritten immediately, so the init stream is irrelevant
    let mut rng = derive_rng(meta.seed, "checkpoint-load");
    let mut gen = Generator::build(meta.spec, &mut rng)?;
    gen.load_weights(&dir.join(GEN_FILE))?;
    Ok((gen, meta))
}

/// Rebuilds models and optimizer states; optimizer hyperparameters come from
/// the caller's training configuration.
#[allow(clippy::type_complexity)]
pub fn load_bundle<T: Scalar>(
    dir: &Path,
    lr: T,
    betas: (T, T),
    eps: T,
) -> Result<(Generator<T>, Discriminator<T>, Adam<T>, Adam<T>, CheckpointMeta), ModelError> {
    let (gen, meta) = load_generator::<T>(dir)?;
    let mut rng = derive_rng(meta.seed, "checkpoint-load");
    let mut disc = Discriminator::build(gen.spec().in_channels, meta.disc_width, &mut rng)?;
    disc.load_weights(&dir.join(DISC_FILE))?;
    let mut opt_g = gen.new_optimizer(lr, betas, eps);
    read_adam(&dir.join(OPT_G_FILE), &mut opt_g)?;
    let mut opt_d = disc.new_optimizer(lr, betas, eps);
    read_adam(&dir.join(OPT_D_FILE), &mut opt_d)?;
    Ok((gen, disc, opt_g, opt_d, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_roundtrips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let mut params: ParamSet<f32> = ParamSet::new();
        params.alloc(Tensor::from_vec(&[2, 2], vec![0.1, -0.25, 1e-7, 3.5]));
        params.alloc(Tensor::from_vec(&[3], vec![1.0, 2.0, -0.125]));
        let buf = Tensor::from_vec(&[2], vec![0.5f32, 0.75]);
        write_store(&path, &params, &[&buf]).unwrap();

        let mut params2: ParamSet<f32> = ParamSet::new();
        params2.alloc(Tensor::zeros(&[2, 2]));
        params2.alloc(Tensor::zeros(&[3]));
        let mut buf2 = Tensor::zeros(&[2]);
        load_into(&path, &mut params2, &mut [&mut buf2]).unwrap();
        assert_eq!(params2.at(0), params.at(0));
        assert_eq!(params2.at(1), params.at(1));
        assert_eq!(buf2, buf);
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let mut params: ParamSet<f32> = ParamSet::new();
        params.alloc(Tensor::zeros(&[1]));
        write_store(&path, &params, &[]).unwrap();

        let mut params64: ParamSet<f64> = ParamSet::new();
        params64.alloc(Tensor::zeros(&[1]));
        let err = load_into(&path, &mut params64, &mut []).unwrap_err();
        assert!(err.to_string().contains("dtype"));
    }

    #[test]
    fn adam_state_roundtrips() {
        let mut params: ParamSet<f64> = ParamSet::new();
        let id = params.alloc(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let mut adam = Adam::new(&params, 0.01, (0.9, 0.999), 1e-8);
        // push the state away from zero
        for _ in 0..3 {
            let mut tape = crate::graph::Tape::new();
            let p = params.bind(&mut tape, id);
            let sq = tape.sqr(p);
            let loss = tape.mean_all(sq);
            let grads = tape.backward(loss);
            adam.step(&mut params, &tape, &grads);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adam.bin");
        write_adam(&path, &adam).unwrap();

        let mut adam2 = Adam::new(&params, 0.01, (0.9, 0.999), 1e-8);
        read_adam(&path, &mut adam2).unwrap();
        let (m1, v1, t1) = adam.state();
        let (m2, v2, t2) = adam2.state();
        assert_eq!(m1, m2);
        assert_eq!(v1, v2);
        assert_eq!(t1, t2);
    }
}
