//! Self-describing binary checkpoint: a JSON header (format version, dtype,
//! config echo, schedule position, tensor directory) followed by raw
//! little-endian parameter data. Round-trips are bit-exact; files are
//! written atomically via temp + rename. See docs/checkpoint.md.

use super::{RunConfig, TrainState};
use crate::error::{Error, Result};
use crate::real::Real;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const CKPT_MAGIC: &[u8; 8] = b"DIVACKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    len: u64,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CkptHeader {
    format_version: u32,
    dtype: String,
    stage: String,
    step: u64,
    seed: u64,
    opt_enc_t: u64,
    opt_bb_t: u64,
    opt_critic_t: u64,
    config: RunConfig,
    tensors: Vec<TensorMeta>,
}

fn collect_tensors<T: Real>(state: &TrainState<T>) -> Vec<(String, Vec<T>)> {
    let mut out: Vec<(String, Vec<T>)> = Vec::new();
    for (n, s) in state.backbone.leaves() {
        out.push((n, s.to_vec()));
    }
    for (n, s) in state.encoders.leaves() {
        out.push((n, s.to_vec()));
    }
    for (n, s) in state.readouts.leaves() {
        out.push((n, s.to_vec()));
    }
    out.push((
        "critic.proj".to_string(),
        state.uni_critic.proj.as_ref().expect("bilinear critic").as_slice().to_vec(),
    ));
    for (n, v) in &state.ema {
        out.push((format!("ema.{n}"), v.clone()));
    }
    for (opt, tag) in [
        (&state.opt_enc, "adam_enc"),
        (&state.opt_bb, "adam_bb"),
        (&state.opt_critic, "adam_critic"),
    ] {
        for (i, n) in opt.names.iter().enumerate() {
            out.push((format!("{tag}.m.{n}"), opt.m[i].clone()));
        }
        for (i, n) in opt.names.iter().enumerate() {
            out.push((format!("{tag}.v.{n}"), opt.v[i].clone()));
        }
    }
    out
}

/// Serialize the whole training state. Writes to `path` atomically.
pub fn save_checkpoint<T: Real>(state: &TrainState<T>, path: &Path) -> Result<()> {
    let tensors = collect_tensors(state);
    let mut metas = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, data) in &tensors {
        metas.push(TensorMeta {
            name: name.clone(),
            len: data.len() as u64,
            offset,
        });
        offset += (data.len() * T::DTYPE.byte_width()) as u64;
    }
    let header = CkptHeader {
        format_version: CKPT_VERSION,
        dtype: T::DTYPE.tag().to_string(),
        stage: state.stage.clone(),
        step: state.step,
        seed: state.seed,
        opt_enc_t: state.opt_enc.t,
        opt_bb_t: state.opt_bb.t,
        opt_critic_t: state.opt_critic.t,
        config: state.run.clone(),
        tensors: metas,
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| Error::Io(format!("header encode: {e}")))?;

    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(CKPT_MAGIC)?;
        f.write_all(&CKPT_VERSION.to_le_bytes())?;
        f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        f.write_all(&header_bytes)?;
        let mut buf = Vec::with_capacity(1 << 16);
        for (_, data) in &tensors {
            buf.clear();
            for x in data {
                x.write_le(&mut buf);
            }
            f.write_all(&buf)?;
        }
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Load a checkpoint; every tensor must be present with its declared size,
/// and the dtype must match the requested scalar type.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<TrainState<T>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 20 || &bytes[0..8] != CKPT_MAGIC {
        return Err(Error::Io(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
    if version != CKPT_VERSION {
        return Err(Error::Io(format!(
            "field `format_version`: file has {version}, expected {CKPT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes([
        bytes[12], bytes[13], bytes[14], bytes[15], bytes[16], bytes[17], bytes[18], bytes[19],
    ]) as usize;
    let header_end = 20 + header_len;
    if bytes.len() < header_end {
        return Err(Error::Io("truncated checkpoint: header cut short".into()));
    }
    let header: CkptHeader = serde_json::from_slice(&bytes[20..header_end])
        .map_err(|e| Error::Io(format!("header decode: {e}")))?;
    if header.dtype != T::DTYPE.tag() {
        return Err(Error::Io(format!(
            "field `dtype`: file holds {}, requested {}",
            header.dtype,
            T::DTYPE.tag()
        )));
    }
    let width = T::DTYPE.byte_width();
    let blob = &bytes[header_end..];
    let expected: u64 = header.tensors.iter().map(|t| t.len * width as u64).sum();
    if blob.len() as u64 != expected {
        return Err(Error::Io(format!(
            "truncated checkpoint: payload holds {} bytes, directory expects {expected}",
            blob.len()
        )));
    }

    let mut table: std::collections::HashMap<&str, Vec<T>> = std::collections::HashMap::new();
    for meta in &header.tensors {
        let start = meta.offset as usize;
        let end = start + meta.len as usize * width;
        if end > blob.len() {
            return Err(Error::Io(format!(
                "tensor `{}` extends past the payload",
                meta.name
            )));
        }
        let mut v = Vec::with_capacity(meta.len as usize);
        for i in 0..meta.len as usize {
            v.push(T::read_le(&blob[start + i * width..start + (i + 1) * width]));
        }
        table.insert(meta.name.as_str(), v);
    }

    let mut state = TrainState::<T>::init(&header.config, header.seed)?;
    state.stage = header.stage;
    state.step = header.step;

    let fill = |name: String, slice: &mut [T]| -> Result<()> {
        let v = table
            .get(name.as_str())
            .ok_or_else(|| Error::Io(format!("missing tensor `{name}`")))?;
        if v.len() != slice.len() {
            return Err(Error::Io(format!(
                "tensor `{name}` holds {} values, expected {}",
                v.len(),
                slice.len()
            )));
        }
        slice.copy_from_slice(v);
        Ok(())
    };

    for (n, s) in state.backbone.leaves_mut() {
        fill(n, s)?;
    }
    for (n, s) in state.encoders.leaves_mut() {
        fill(n, s)?;
    }
    for (n, s) in state.readouts.leaves_mut() {
        fill(n, s)?;
    }
    fill(
        "critic.proj".to_string(),
        state.uni_critic.proj.as_mut().expect("bilinear critic").as_mut_slice(),
    )?;

    // EMA shadow: reconstruct in directory order, stripping the prefix
    state.ema = header
        .tensors
        .iter()
        .filter_map(|m| {
            m.name
                .strip_prefix("ema.")
                .map(|bare| (bare.to_string(), table[m.name.as_str()].clone()))
        })
        .collect();

    state.opt_enc.t = header.opt_enc_t;
    state.opt_bb.t = header.opt_bb_t;
    state.opt_critic.t = header.opt_critic_t;
    for (opt, tag) in [
        (&mut state.opt_enc, "adam_enc"),
        (&mut state.opt_bb, "adam_bb"),
        (&mut state.opt_critic, "adam_critic"),
    ] {
        for i in 0..opt.names.len() {
            let name = opt.names[i].clone();
            fill(format!("{tag}.m.{name}"), &mut opt.m[i])?;
            fill(format!("{tag}.v.{name}"), &mut opt.v[i])?;
        }
    }

    Ok(state)
}
