//! Single-file checkpoint archive.
//!
//! Layout: `CSGCKPT\0`, `u32` format version, `u64` header length (both
//! little endian), a JSON header, then every tensor as raw little-endian `f64`
//! in header order.

use std::io::Write;
use std::path::Path;

use cosimgen_core::optim::AdamState;
use cosimgen_core::palette::ClassPalette;
use cosimgen_core::superres::{SrCheckpoint, SrConfig};
use cosimgen_core::trainer::{Checkpoint, TrainConfig, FORMAT_VERSION};
use cosimgen_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, io_err, Result};
use crate::palette_file::PaletteFile;

pub const MAGIC: &[u8; 8] = b"CSGCKPT\0";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Decoded archive: its kind, free-form metadata and named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

/// Writes to a sibling temporary file, syncs, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_file_name(format!(
        ".{}.tmp{}",
        path.file_name().and_then(|s| s.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    let mut f = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn encode(a: &Archive) -> Vec<u8> {
    let header = Header {
        kind: a.kind.clone(),
        meta: a.meta.clone(),
        tensors: a.tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let total: usize = a.tensors.iter().map(|(_, t)| t.numel()).sum();
    let mut out = Vec::with_capacity(20 + json.len() + 8 * total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &a.tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Archive> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(format_err("not a checkpoint archive"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(cosimgen_core::Error::Config(format!("archive format version {version}, expected {FORMAT_VERSION}")).into());
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| format_err("truncated archive header"))?;
    let header: Header = serde_json::from_slice(body).map_err(format_err)?;
    let mut pos = 20 + hlen;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = bytes.get(pos..pos + 8 * n).ok_or_else(|| format_err(format!("truncated tensor {}", e.name)))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        tensors.push((e.name, Tensor::new(&e.shape, data)?));
        pos += 8 * n;
    }
    if pos != bytes.len() {
        return Err(format_err("trailing bytes after last tensor"));
    }
    Ok(Archive { kind: header.kind, meta: header.meta, tensors })
}

pub fn write(path: &Path, a: &Archive) -> Result<()> {
    write_atomic(path, &encode(a))
}

pub fn read(path: &Path) -> Result<Archive> {
    decode(&std::fs::read(path).map_err(io_err(path))?)
}

fn push_opt(tensors: &mut Vec<(String, Tensor)>, prefix: &str, s: &AdamState) {
    for (name, m, v) in &s.moments {
        tensors.push((format!("{prefix}.m/{name}"), m.clone()));
        tensors.push((format!("{prefix}.v/{name}"), v.clone()));
    }
}

fn take_opt(tensors: &[(String, Tensor)], prefix: &str, step: u64) -> Result<AdamState> {
    let (mp, vp) = (format!("{prefix}.m/"), format!("{prefix}.v/"));
    let mut moments = Vec::new();
    for (name, m) in tensors.iter().filter_map(|(n, t)| n.strip_prefix(&mp).map(|s| (s, t))) {
        let key = format!("{vp}{name}");
        let v = tensors.iter().find(|(n, _)| *n == key).ok_or_else(|| format_err(format!("missing {key}")))?;
        moments.push((name.to_string(), m.clone(), v.1.clone()));
    }
    Ok(AdamState { step, moments })
}

fn params(tensors: &[(String, Tensor)]) -> Vec<(String, Tensor)> {
    tensors.iter().filter_map(|(n, t)| n.strip_prefix("param/").map(|s| (s.to_string(), t.clone()))).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DiffusionMeta {
    version: u32,
    step: usize,
    config: TrainConfig,
    class_names: Vec<String>,
    palette: PaletteFile,
    rng_word_pos: String,
    opt_gen_step: u64,
    opt_disc_step: u64,
}

pub const DIFFUSION: &str = "diffusion";
pub const SUPERRES: &str = "superres";

pub fn diffusion_archive(ckpt: &Checkpoint, palette: &ClassPalette) -> Archive {
    let meta = DiffusionMeta {
        version: ckpt.version,
        step: ckpt.step,
        config: ckpt.config.clone(),
        class_names: ckpt.class_names.clone(),
        palette: PaletteFile::from_palette(palette),
        rng_word_pos: ckpt.rng_word_pos.to_string(),
        opt_gen_step: ckpt.opt_gen.step,
        opt_disc_step: ckpt.opt_disc.step,
    };
    let mut tensors: Vec<(String, Tensor)> = ckpt.params.iter().map(|(n, t)| (format!("param/{n}"), t.clone())).collect();
    push_opt(&mut tensors, "opt_gen", &ckpt.opt_gen);
    push_opt(&mut tensors, "opt_disc", &ckpt.opt_disc);
    Archive { kind: DIFFUSION.into(), meta: serde_json::to_value(meta).expect("meta serializes"), tensors }
}

pub fn diffusion_checkpoint(a: &Archive) -> Result<(Checkpoint, ClassPalette)> {
    if a.kind != DIFFUSION {
        return Err(format_err(format!("expected a {DIFFUSION} checkpoint, found {}", a.kind)));
    }
    let m: DiffusionMeta = serde_json::from_value(a.meta.clone()).map_err(format_err)?;
    let ckpt = Checkpoint {
        version: m.version,
        step: m.step,
        config: m.config,
        class_names: m.class_names,
        params: params(&a.tensors),
        opt_gen: take_opt(&a.tensors, "opt_gen", m.opt_gen_step)?,
        opt_disc: take_opt(&a.tensors, "opt_disc", m.opt_disc_step)?,
        rng_word_pos: m.rng_word_pos.parse().map_err(format_err)?,
    };
    Ok((ckpt, m.palette.to_palette()?))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SrMeta {
    version: u32,
    step: usize,
    config: SrConfig,
    rng_word_pos: String,
    opt_step: u64,
}

pub fn sr_archive(ckpt: &SrCheckpoint) -> Archive {
    let meta = SrMeta {
        version: ckpt.version,
        step: ckpt.step,
        config: ckpt.config.clone(),
        rng_word_pos: ckpt.rng_word_pos.to_string(),
        opt_step: ckpt.opt.step,
    };
    let mut tensors: Vec<(String, Tensor)> = ckpt.params.iter().map(|(n, t)| (format!("param/{n}"), t.clone())).collect();
    push_opt(&mut tensors, "opt", &ckpt.opt);
    Archive { kind: SUPERRES.into(), meta: serde_json::to_value(meta).expect("meta serializes"), tensors }
}

pub fn sr_checkpoint(a: &Archive) -> Result<SrCheckpoint> {
    if a.kind != SUPERRES {
        return Err(format_err(format!("expected a {SUPERRES} checkpoint, found {}", a.kind)));
    }
    let m: SrMeta = serde_json::from_value(a.meta.clone()).map_err(format_err)?;
    Ok(SrCheckpoint {
        version: m.version,
        step: m.step,
        config: m.config,
        params: params(&a.tensors),
        opt: take_opt(&a.tensors, "opt", m.opt_step)?,
        rng_word_pos: m.rng_word_pos.parse().map_err(format_err)?,
    })
}
