//! Model and training configuration with `key=value` text round-tripping.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which optional components are active. Mirrors the four ablation columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Toggles {
    pub qqformer: bool,
    pub cmcl: bool,
    pub cmm: bool,
    pub ahead: bool,
}

impl Toggles {
    pub const ALL: Toggles = Toggles {
        qqformer: true,
        cmcl: true,
        cmm: true,
        ahead: true,
    };
    pub const NONE: Toggles = Toggles {
        qqformer: false,
        cmcl: false,
        cmm: false,
        ahead: false,
    };

    /// Short label such as `qqformer+cmm`, or `none`.
    pub fn label(&self) -> String {
        let names: Vec<&str> = [
            (self.qqformer, "qqformer"),
            (self.cmcl, "cmcl"),
            (self.cmm, "cmm"),
            (self.ahead, "ahead"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if names.is_empty() {
            "none".into()
        } else {
            names.join("+")
        }
    }
}

/// How the partner stream enters the elementwise gate of a CMM block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartnerMix {
    /// Mean-pool the partner stream and broadcast it over the own stream.
    Pooled,
    /// Token-by-token product; requires equal stream lengths.
    Elementwise,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub image_layers: usize,
    pub text_layers: usize,
    pub mlp_ratio: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub n_queries: usize,
    pub qformer_layers: usize,
    pub cmm_blocks: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: usize,
    pub dt_rank: usize,
    pub decoder_layers: usize,
    pub max_answer_len: usize,
    pub n_classes: usize,
    pub ln_eps: f64,
    pub partner: PartnerMix,
    pub toggles: Toggles,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 3,
            patch: 8,
            d_model: 32,
            heads: 2,
            image_layers: 2,
            text_layers: 2,
            mlp_ratio: 2,
            max_len: 24,
            vocab_size: 64,
            n_queries: 32,
            qformer_layers: 2,
            cmm_blocks: 2,
            d_state: 8,
            d_conv: 4,
            expand: 2,
            dt_rank: 2,
            decoder_layers: 2,
            max_answer_len: 8,
            n_classes: 2,
            ln_eps: 1e-5,
            partner: PartnerMix::Pooled,
            toggles: Toggles::ALL,
        }
    }
}

impl ModelConfig {
    pub fn n_patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Tokens in the query stream: learnable queries, or raw patch tokens
    /// when the QQ-Former is disabled.
    pub fn query_stream_len(&self) -> usize {
        if self.toggles.qqformer {
            self.n_queries
        } else {
            self.n_patches()
        }
    }

    /// Length of the fused token memory read by the auxiliary decoder.
    pub fn memory_len(&self) -> usize {
        self.query_stream_len() + self.max_len
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return bad(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            ));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.n_queries == 0 || self.max_len < 2 || self.d_state == 0 || self.d_conv == 0 {
            return bad("n_queries, d_state, d_conv must be >= 1 and max_len >= 2".into());
        }
        if self.dt_rank == 0 || self.expand == 0 || self.mlp_ratio == 0 {
            return bad("dt_rank, expand, mlp_ratio must be >= 1".into());
        }
        if self.partner == PartnerMix::Elementwise && self.query_stream_len() != self.max_len {
            return bad("elementwise partner mixing needs equal stream lengths".into());
        }
        if self.n_classes == 0 || self.vocab_size < 5 {
            return bad("need at least one class and a vocabulary beyond the reserved ids".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    /// Parameters are rounded to `f32` after every update.
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub seed: u64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    /// Desk-scale preset: trains from scratch on CPU in minutes.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig {
                patch: 16,
                ..ModelConfig::default()
            },
            lr: 1e-3,
            epochs: 50,
            batch_size: 8,
            alpha: 0.2,
            beta: 0.3,
            tau: 0.07,
            seed: 0,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            precision: Precision::F32,
        }
    }

    /// Reference-scale hyperparameters (384×384 input, lr 5e-6).
    pub fn paper() -> Self {
        let mut c = Self::toy();
        c.lr = 5e-6;
        c.model.image_size = 384;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset {other:?} (toy, paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be >= 0".into()));
        }
        if !(self.tau > 0.0) || !(self.lr > 0.0) {
            return Err(Error::Config("tau and lr must be > 0".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let m = &self.model;
        let t = &m.toggles;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("image_size", m.image_size.to_string());
        put("channels", m.channels.to_string());
        put("patch", m.patch.to_string());
        put("d_model", m.d_model.to_string());
        put("heads", m.heads.to_string());
        put("image_layers", m.image_layers.to_string());
        put("text_layers", m.text_layers.to_string());
        put("mlp_ratio", m.mlp_ratio.to_string());
        put("max_len", m.max_len.to_string());
        put("vocab_size", m.vocab_size.to_string());
        put("n_queries", m.n_queries.to_string());
        put("qformer_layers", m.qformer_layers.to_string());
        put("cmm_blocks", m.cmm_blocks.to_string());
        put("d_state", m.d_state.to_string());
        put("d_conv", m.d_conv.to_string());
        put("expand", m.expand.to_string());
        put("dt_rank", m.dt_rank.to_string());
        put("decoder_layers", m.decoder_layers.to_string());
        put("max_answer_len", m.max_answer_len.to_string());
        put("n_classes", m.n_classes.to_string());
        put("ln_eps", format!("{:e}", m.ln_eps));
        put(
            "partner",
            match m.partner {
                PartnerMix::Pooled => "pooled".into(),
                PartnerMix::Elementwise => "elementwise".into(),
            },
        );
        put("qqformer", t.qqformer.to_string());
        put("cmcl", t.cmcl.to_string());
        put("cmm", t.cmm.to_string());
        put("ahead", t.ahead.to_string());
        put("lr", format!("{:e}", self.lr));
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("alpha", self.alpha.to_string());
        put("beta", self.beta.to_string());
        put("tau", self.tau.to_string());
        put("seed", self.seed.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("adam_beta1", self.adam_beta1.to_string());
        put("adam_beta2", self.adam_beta2.to_string());
        put("adam_eps", format!("{:e}", self.adam_eps));
        put(
            "precision",
            match self.precision {
                Precision::F32 => "f32".into(),
                Precision::F64 => "f64".into(),
            },
        );
        s
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
        }
        let m = &mut self.model;
        match key {
            "image_size" => m.image_size = num(key, value)?,
            "channels" => m.channels = num(key, value)?,
            "patch" => m.patch = num(key, value)?,
            "d_model" => m.d_model = num(key, value)?,
            "heads" => m.heads = num(key, value)?,
            "image_layers" => m.image_layers = num(key, value)?,
            "text_layers" => m.text_layers = num(key, value)?,
            "mlp_ratio" => m.mlp_ratio = num(key, value)?,
            "max_len" => m.max_len = num(key, value)?,
            "vocab_size" => m.vocab_size = num(key, value)?,
            "n_queries" => m.n_queries = num(key, value)?,
            "qformer_layers" => m.qformer_layers = num(key, value)?,
            "cmm_blocks" => m.cmm_blocks = num(key, value)?,
            "d_state" => m.d_state = num(key, value)?,
            "d_conv" => m.d_conv = num(key, value)?,
            "expand" => m.expand = num(key, value)?,
            "dt_rank" => m.dt_rank = num(key, value)?,
            "decoder_layers" => m.decoder_layers = num(key, value)?,
            "max_answer_len" => m.max_answer_len = num(key, value)?,
            "n_classes" => m.n_classes = num(key, value)?,
            "ln_eps" => m.ln_eps = num(key, value)?,
            "partner" => {
                m.partner = match value {
                    "pooled" => PartnerMix::Pooled,
                    "elementwise" => PartnerMix::Elementwise,
                    _ => return Err(Error::Config(format!("invalid partner {value:?}"))),
                }
            }
            "qqformer" => m.toggles.qqformer = num(key, value)?,
            "cmcl" => m.toggles.cmcl = num(key, value)?,
            "cmm" => m.toggles.cmm = num(key, value)?,
            "ahead" => m.toggles.ahead = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "adam_beta1" => self.adam_beta1 = num(key, value)?,
            "adam_beta2" => self.adam_beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::Config(format!("invalid precision {value:?}"))),
                }
            }
            "preset" => {
                let seed = self.seed;
                *self = Self::preset(value)?;
                self.seed = seed;
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (key, value) in parse_kv(text)? {
            self.set(&key, &value)?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::toy();
        c.apply_kv(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv(&text)
    }

    /// Short stable digest of the full configuration.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_kv().as_bytes());
        hex::encode(&digest[..6])
    }
}

pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut c = TrainConfig::toy();
        c.seed = 42;
        c.model.toggles.cmm = false;
        c.alpha = 0.4;
        let back = TrainConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(TrainConfig::from_kv("bogus=1").is_err());
        assert!(TrainConfig::from_kv("epochs").is_err());
    }

    #[test]
    fn presets_differ_in_scale() {
        let p = TrainConfig::paper();
        assert_eq!(p.lr, 5e-6);
        assert_eq!(p.model.image_size, 384);
        assert_eq!((p.alpha, p.beta, p.epochs, p.batch_size), (0.2, 0.3, 50, 8));
        assert_eq!(TrainConfig::toy().lr, 1e-3);
    }

    #[test]
    fn toggle_labels() {
        assert_eq!(Toggles::NONE.label(), "none");
        assert_eq!(Toggles::ALL.label(), "qqformer+cmcl+cmm+ahead");
    }
}
