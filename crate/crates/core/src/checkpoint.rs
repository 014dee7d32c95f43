//! Checkpoint container: magic + version, a JSON header describing configs,
//! step counters and the tensor index, then raw little-endian f32 payload.
//!
//! Layout:
//!
//! ```text
//! [0..8)    magic "CYFCKPT1"
//! [8..12)   u32 LE format version
//! [12..20)  u64 LE header length H
//! [20..20+H) JSON header
//! [20+H..]  payload: f32 LE tensors at the offsets the header declares
//! ```
//!
//! Loading revalidates everything: the tensor name set and shapes are
//! re-derived from the configs stored in the header and must match the index
//! exactly, offsets must tile the payload, and the file length must agree.
//! Model parameters and optimizer moments round-trip bit-exactly, which is
//! what makes resumed runs continue bit-identically.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{
    build_discriminator, build_generator, DiscriminatorConfig, GeneratorConfig, ModelBundle,
};
use crate::params::ParamSet;
use crate::training::{AdamState, Optimizers, TrainingConfig};

const MAGIC: &[u8; 8] = b"CYFCKPT1";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    step: u64,
    training_config: TrainingConfig,
    generator_config: GeneratorConfig,
    discriminator_config: DiscriminatorConfig,
    adam_t: [u64; 3],
    payload_bytes: u64,
    tensors: Vec<TensorEntry>,
}

/// A fully decoded checkpoint.
#[derive(Debug)]
pub struct Checkpoint {
    pub bundle: ModelBundle<f32>,
    pub step: u64,
    pub config: TrainingConfig,
    pub optimizers: Optimizers,
}

fn group_names<'a>(
    prefix: &'a str,
    ps: &'a ParamSet<f32>,
) -> impl Iterator<Item = (String, Vec<usize>)> + 'a {
    ps.iter().map(move |(name, v)| (format!("{prefix}.{name}"), v.shape().to_vec()))
}

/// Canonical tensor order: model parameters per network, then Adam moments.
fn expected_layout(
    gen_cfg: &GeneratorConfig,
    disc_cfg: &DiscriminatorConfig,
) -> Result<Vec<(String, Vec<usize>)>> {
    // A throwaway init gives the authoritative name/shape list.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let g: ParamSet<f32> = build_generator(gen_cfg, &mut rng)?;
    let d: ParamSet<f32> = build_discriminator(disc_cfg, &mut rng)?;
    let mut out = Vec::new();
    for prefix in ["C", "E"] {
        out.extend(group_names(prefix, &g));
    }
    out.extend(group_names("D", &d));
    for prefix in ["C", "E"] {
        for (name, shape) in group_names(prefix, &g) {
            let base = name.strip_prefix(prefix).unwrap();
            out.push((format!("opt.{prefix}{base}.m"), shape.clone()));
            out.push((format!("opt.{prefix}{base}.v"), shape));
        }
    }
    for (name, shape) in group_names("D", &d) {
        let base = name.strip_prefix("D").unwrap();
        out.push((format!("opt.D{base}.m"), shape.clone()));
        out.push((format!("opt.D{base}.v"), shape));
    }
    Ok(out)
}

fn tensors_in_order<'a>(
    bundle: &'a ModelBundle<f32>,
    opt: &'a Optimizers,
) -> Vec<(String, &'a ArrayD<f32>)> {
    let mut out: Vec<(String, &ArrayD<f32>)> = Vec::new();
    for (prefix, ps) in [("C", &bundle.c), ("E", &bundle.e), ("D", &bundle.d)] {
        for (name, v) in ps.iter() {
            out.push((format!("{prefix}.{name}"), v));
        }
    }
    for (prefix, ps, state) in [
        ("C", &bundle.c, &opt.c),
        ("E", &bundle.e, &opt.e),
        ("D", &bundle.d, &opt.d),
    ] {
        for (i, (name, _)) in ps.iter().enumerate() {
            out.push((format!("opt.{prefix}.{name}.m"), &state.m[i]));
            out.push((format!("opt.{prefix}.{name}.v"), &state.v[i]));
        }
    }
    out
}

/// Serializes the bundle, optimizer state, step counter and config.
pub fn save_checkpoint(
    path: &Path,
    bundle: &ModelBundle<f32>,
    step: u64,
    config: &TrainingConfig,
    optimizers: &Optimizers,
) -> Result<()> {
    let tensors = tensors_in_order(bundle, optimizers);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, v) in &tensors {
        entries.push(TensorEntry { name: name.clone(), shape: v.shape().to_vec(), offset });
        offset += (v.len() * 4) as u64;
    }
    let header = Header {
        step,
        training_config: config.clone(),
        generator_config: bundle.gen_cfg.clone(),
        discriminator_config: bundle.disc_cfg.clone(),
        adam_t: [optimizers.c.t, optimizers.e.t, optimizers.d.t],
        payload_bytes: offset,
        tensors: entries,
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, v) in &tensors {
        for x in v.iter() {
            w.write_all(&x.to_bits().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads just the tensor names of a checkpoint, in file order.
pub fn tensor_names(path: &Path) -> Result<Vec<String>> {
    let header = read_header(path)?.0;
    Ok(header.tensors.into_iter().map(|t| t.name).collect())
}

fn read_header(path: &Path) -> Result<(Header, Vec<u8>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Checkpoint(format!("file shorter than the 8-byte magic: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:02x?}; not a checkpoint file",
            magic
        )));
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4)
        .map_err(|e| Error::Checkpoint(format!("truncated at the version field (offset 8): {e}")))?;
    let version = u32::from_le_bytes(v4);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let mut l8 = [0u8; 8];
    r.read_exact(&mut l8)
        .map_err(|e| Error::Checkpoint(format!("truncated at the header length (offset 12): {e}")))?;
    let header_len = u64::from_le_bytes(l8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(|e| {
        Error::Checkpoint(format!("truncated inside the {header_len}-byte header at offset 20: {e}"))
    })?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() as u64 != header.payload_bytes {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes but the header at offset 20 declares {} (file truncated or padded)",
            payload.len(),
            header.payload_bytes
        )));
    }
    Ok((header, payload))
}

/// Decodes and fully validates a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (header, payload) = read_header(path)?;
    let expected = expected_layout(&header.generator_config, &header.discriminator_config)?;
    if header.tensors.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint indexes {} tensors but the configs imply {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    for (entry, (want_name, want_shape)) in header.tensors.iter().zip(&expected) {
        if &entry.name != want_name {
            return Err(Error::Checkpoint(format!(
                "tensor name mismatch: found '{}' where '{}' was expected",
                entry.name, want_name
            )));
        }
        if &entry.shape != want_shape {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' has shape {:?}, expected {:?}",
                entry.name, entry.shape, want_shape
            )));
        }
    }

    let read_tensor = |entry: &TensorEntry| -> Result<ArrayD<f32>> {
        let len: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + len * 4;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' spans payload bytes {start}..{end} but payload is {} bytes",
                entry.name,
                payload.len()
            )));
        }
        let mut data = Vec::with_capacity(len);
        for chunk in payload[start..end].chunks_exact(4) {
            data.push(f32::from_bits(u32::from_le_bytes(chunk.try_into().unwrap())));
        }
        ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
            .map_err(|e| Error::Checkpoint(format!("tensor '{}': {e}", entry.name)))
    };

    let mut by_name = std::collections::HashMap::new();
    for entry in &header.tensors {
        by_name.insert(entry.name.clone(), read_tensor(entry)?);
    }

    let mut take = |name: &str| -> ArrayD<f32> {
        by_name.remove(name).expect("validated name set")
    };
    let mut load_group = |prefix: &str, reference: &[(String, Vec<usize>)]| -> ParamSet<f32> {
        let mut ps = ParamSet::new();
        for (name, _) in reference {
            if let Some(base) = name.strip_prefix(&format!("{prefix}.")) {
                ps.add(base, take(name));
            }
        }
        ps
    };
    let model_entries: Vec<(String, Vec<usize>)> = expected
        .iter()
        .filter(|(n, _)| !n.starts_with("opt."))
        .cloned()
        .collect();
    let c = load_group("C", &model_entries);
    let e = load_group("E", &model_entries);
    let d = load_group("D", &model_entries);

    let mut load_adam = |prefix: &str, ps: &ParamSet<f32>, t: u64| -> AdamState {
        let mut m = Vec::with_capacity(ps.len());
        let mut v = Vec::with_capacity(ps.len());
        for (name, _) in ps.iter() {
            m.push(take(&format!("opt.{prefix}.{name}.m")));
            v.push(take(&format!("opt.{prefix}.{name}.v")));
        }
        AdamState { t, m, v }
    };
    let opt_c = load_adam("C", &c, header.adam_t[0]);
    let opt_e = load_adam("E", &e, header.adam_t[1]);
    let opt_d = load_adam("D", &d, header.adam_t[2]);

    let bundle = ModelBundle {
        gen_cfg: header.generator_config,
        disc_cfg: header.discriminator_config,
        c,
        e,
        d,
    };
    Ok(Checkpoint {
        bundle,
        step: header.step,
        config: header.training_config,
        optimizers: Optimizers { c: opt_c, e: opt_e, d: opt_d },
    })
}
