//! Versioned binary checkpoints.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, `u32`-prefixed
//! configuration text, `u32` class count with `u32`-prefixed class strings,
//! `u32` tensor count, then per tensor `u32`-prefixed name, `u32` rank,
//! `u32` extents and `f32` values.

use std::path::Path;

use numcore::Tensor;

use crate::config::TrainConfig;
use crate::data::AnswerVocab;
use crate::error::{Error, Result};
use crate::model::Model;

pub const MAGIC: &[u8; 8] = b"VQACKPT\0";
pub const VERSION: u32 = 1;

pub struct Checkpoint {
    pub config: TrainConfig,
    pub answers: AnswerVocab,
    pub model: Model,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode(config: &TrainConfig, answers: &AnswerVocab, model: &Model) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, &config.to_kv());
    put_u32(&mut out, answers.len());
    for a in answers.classes() {
        put_str(&mut out, a);
    }
    put_u32(&mut out, model.store.len());
    for (name, t) in model.store.iter() {
        put_str(&mut out, name);
        put_u32(&mut out, t.rank());
        for &e in t.shape() {
            put_u32(&mut out, e);
        }
        for &x in t.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

pub fn save(path: &Path, config: &TrainConfig, answers: &AnswerVocab, model: &Model) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode(config, answers, model)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            what: "checkpoint",
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        let b = self.take(n)?.to_vec();
        String::from_utf8(b).map_err(|_| self.err("string is not UTF-8"))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(r.err("bad magic"));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let config = TrainConfig::from_kv(&r.string()?)?;
    let n_classes = r.u32()?;
    let classes = (0..n_classes).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let answers = AnswerVocab::from_answers(classes.iter().map(String::as_str));
    let mut model = Model::new(&config.model, config.seed)?;
    let n_tensors = r.u32()?;
    if n_tensors != model.store.len() {
        return Err(r.err(format!("{n_tensors} tensors stored, model has {}", model.store.len())));
    }
    for _ in 0..n_tensors {
        let name = r.string()?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let id = model
            .store
            .id(&name)
            .ok_or_else(|| r.err(format!("unknown parameter {name}")))?;
        let expected = model.store.get(id).shape().to_vec();
        if shape != expected {
            return Err(Error::CheckpointMismatch {
                version,
                name,
                expected,
                found: shape,
            });
        }
        let n: usize = shape.iter().product();
        let raw = r.take(4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        *model.store.get_mut(id) = Tensor::new(&shape, data)?;
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes"));
    }
    Ok(Checkpoint { config, answers, model })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Loads a checkpoint and checks it against the parameters `expected`
/// would create.
pub fn load_for(path: &Path, expected: &crate::config::ModelConfig) -> Result<Checkpoint> {
    let ck = load(path)?;
    let reference = Model::new(expected, 0)?;
    for (name, t) in reference.store.iter() {
        let found = ck
            .model
            .store
            .by_name(name)
            .map(|s| s.shape().to_vec())
            .unwrap_or_default();
        if found != t.shape() {
            return Err(Error::CheckpointMismatch {
                version: VERSION,
                name: name.to_string(),
                expected: t.shape().to_vec(),
                found,
            });
        }
    }
    if reference.store.len() != ck.model.store.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} tensors, configuration expects {}",
            ck.model.store.len(),
            reference.store.len()
        )));
    }
    Ok(ck)
}
