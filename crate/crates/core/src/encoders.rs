//! Patch-embedding image encoder, token-embedding text encoder, and the
//! word-level vocabulary they share with the answer decoder.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use numcore::{Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{key_padding_bias, masked_mean, sinusoidal, sinusoidal_2d, EncoderLayer, Linear, Norm};
use crate::params::{Ctx, ParamBuilder, ParamId};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Row-major `H × W × C` pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 || pixels.len() != height * width * channels {
            return Err(Error::Contract(format!(
                "image {height}x{width}x{channels} needs {} pixels, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Contract(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: vec![value.clamp(0.0, 1.0); height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * self.channels + c] = v.clamp(0.0, 1.0);
    }

    pub fn patch_grid(&self, patch: usize) -> Result<(usize, usize)> {
        if patch == 0 || !self.height.is_multiple_of(patch) || !self.width.is_multiple_of(patch) {
            return Err(Error::Contract(format!(
                "image {}x{} not divisible by patch size {patch}",
                self.height, self.width
            )));
        }
        Ok((self.height / patch, self.width / patch))
    }

    /// Flattened patches `[n_patches, P·P·C]`, patches in row-major grid
    /// order and pixels within a patch in `(row, col, channel)` order.
    pub fn patches(&self, patch: usize) -> Result<Tensor> {
        let (gh, gw) = self.patch_grid(patch)?;
        let pd = patch * patch * self.channels;
        let mut data = Vec::with_capacity(gh * gw * pd);
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..patch {
                    let row = (gy * patch + py) * self.width + gx * patch;
                    let start = row * self.channels;
                    data.extend_from_slice(&self.pixels[start..start + patch * self.channels]);
                }
            }
        }
        Ok(Tensor::new(&[gh * gw, pd], data)?)
    }
}

/// Stacks the patches of several equally sized images into `[B, n, P·P·C]`.
pub fn patch_batch(images: &[&ImageGrid], patch: usize) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Contract("empty image batch".into()))?
        .patches(patch)?;
    let (n, pd) = (first.shape()[0], first.shape()[1]);
    let mut data = first.into_data();
    for img in &images[1..] {
        let p = img.patches(patch)?;
        if p.shape() != [n, pd] {
            return Err(Error::Contract("images in a batch differ in size".into()));
        }
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::new(&[images.len(), n, pd], data)?)
}

/// Token ids with padding only as a suffix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    ids: Vec<usize>,
}

impl TokenSeq {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if let Some(first_pad) = ids.iter().position(|&i| i == PAD) {
            if ids[first_pad..].iter().any(|&i| i != PAD) {
                return Err(Error::Contract("PAD tokens must form a suffix".into()));
            }
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-PAD tokens.
    pub fn content_len(&self) -> usize {
        self.ids.iter().take_while(|&&i| i != PAD).count()
    }

    /// Right-pads with PAD to `len`.
    pub fn padded(&self, len: usize) -> Result<Self> {
        if self.content_len() > len {
            return Err(Error::Contract(format!(
                "sequence of {} tokens exceeds maximum length {len}",
                self.content_len()
            )));
        }
        let mut ids = self.ids[..self.content_len()].to_vec();
        ids.resize(len, PAD);
        Ok(Self { ids })
    }
}

/// Word-level vocabulary; line index in the vocabulary file is the id.
#[derive(Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    unknown: AtomicUsize,
}

impl Clone for Vocab {
    fn clone(&self) -> Self {
        Self {
            tokens: self.tokens.clone(),
            index: self.index.clone(),
            unknown: AtomicUsize::new(self.unknown.load(Ordering::Relaxed)),
        }
    }
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl Vocab {
    /// Reserved tokens followed by `words` in order of first appearance.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
            unknown: AtomicUsize::new(0),
        };
        for w in RESERVED.iter().copied().chain(words) {
            if !v.index.contains_key(w) {
                v.index.insert(w.to_string(), v.tokens.len());
                v.tokens.push(w.to_string());
            }
        }
        v
    }

    pub fn from_lines(text: &str) -> Result<Self> {
        let tokens: Vec<&str> = text.lines().collect();
        if tokens.len() < RESERVED.len() || tokens[..4] != RESERVED {
            return Err(Error::Contract(
                "vocabulary must start with <pad> <bos> <eos> <unk>".into(),
            ));
        }
        let v = Self::from_words(tokens[4..].iter().copied());
        if v.len() != tokens.len() {
            return Err(Error::Contract("vocabulary contains duplicate tokens".into()));
        }
        Ok(v)
    }

    pub fn to_lines(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_lines(&text)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Words mapped to UNK since construction.
    pub fn unknown_count(&self) -> usize {
        self.unknown.load(Ordering::Relaxed)
    }

    /// `[BOS, words.., EOS]`; unknown words become UNK.
    pub fn tokenize(&self, text: &str) -> TokenSeq {
        let mut ids = vec![BOS];
        for w in text.split_whitespace() {
            ids.push(self.id(w).unwrap_or_else(|| {
                self.unknown.fetch_add(1, Ordering::Relaxed);
                UNK
            }));
        }
        ids.push(EOS);
        TokenSeq { ids }
    }

    /// Joins content tokens with single spaces, dropping BOS/EOS/PAD.
    pub fn detokenize(&self, seq: &TokenSeq) -> String {
        seq.ids()
            .iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Per-token features `[B, n, d]` and their masked mean `[B, d]`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput<'t> {
    pub tokens: Var<'t>,
    pub pooled: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub patch: usize,
    pub proj: Linear,
    pub layers: Vec<EncoderLayer>,
    pub norm: Norm,
    pos: Tensor,
}

impl ImageEncoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            patch: cfg.patch,
            proj: Linear::new(pb, "image.proj", cfg.patch_dim(), d, true),
            layers: (0..cfg.image_layers)
                .map(|i| EncoderLayer::new(pb, &format!("image.layer{i}"), d, cfg.heads, cfg.mlp_ratio, cfg.ln_eps))
                .collect(),
            norm: Norm::new(pb, "image.ln", d, cfg.ln_eps),
            pos: sinusoidal_2d(cfg.image_size / cfg.patch, cfg.image_size / cfg.patch, d),
        }
    }

    fn check(&self, patches: &Tensor) -> Result<()> {
        let s = patches.shape();
        if s.len() != 3 || s[1] != self.pos.shape()[0] || s[2] != self.proj.d_in {
            return Err(Error::Contract(format!(
                "image encoder expects [B, {}, {}] patches, got {s:?}",
                self.pos.shape()[0],
                self.proj.d_in
            )));
        }
        Ok(())
    }

    /// Linear patch projections before positions are added.
    pub fn patch_projections<'t>(&self, cx: &Ctx<'t>, patches: Var<'t>) -> Result<Var<'t>> {
        self.proj.forward(cx, patches)
    }

    /// Projections plus sinusoidal positions.
    pub fn patch_embed<'t>(&self, cx: &Ctx<'t>, patches: Var<'t>) -> Result<Var<'t>> {
        let x = self.patch_projections(cx, patches)?;
        Ok(x.add(cx.constant(self.pos.clone()))?)
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, patches: &Tensor) -> Result<EncoderOutput<'t>> {
        self.check(patches)?;
        self.forward_var(cx, cx.constant(patches.clone()))
    }

    pub fn forward_var<'t>(&self, cx: &Ctx<'t>, patches: Var<'t>) -> Result<EncoderOutput<'t>> {
        let mut x = self.patch_embed(cx, patches)?;
        for layer in &self.layers {
            x = layer.forward(cx, x, None)?;
        }
        let tokens = self.norm.forward(cx, x)?;
        Ok(EncoderOutput {
            tokens,
            pooled: tokens.mean_axis(1, false)?,
        })
    }

    /// Encodes a single image.
    pub fn encode<'t>(&self, cx: &Ctx<'t>, img: &ImageGrid) -> Result<EncoderOutput<'t>> {
        let p = img.patches(self.patch)?;
        let n = p.shape()[0];
        let pd = p.shape()[1];
        self.forward(cx, &p.reshape(&[1, n, pd])?)
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embed: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub norm: Norm,
    vocab_size: usize,
    d: usize,
    max_len: usize,
}

impl TextEncoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            embed: pb.normal("text.embed", &[cfg.vocab_size, d], 1.0),
            layers: (0..cfg.text_layers)
                .map(|i| EncoderLayer::new(pb, &format!("text.layer{i}"), d, cfg.heads, cfg.mlp_ratio, cfg.ln_eps))
                .collect(),
            norm: Norm::new(pb, "text.ln", d, cfg.ln_eps),
            vocab_size: cfg.vocab_size,
            d,
            max_len: cfg.max_len,
        }
    }

    /// Encodes equally long rows of ids; `lens[b]` counts the non-PAD prefix.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, ids: &[Vec<usize>], lens: &[usize]) -> Result<EncoderOutput<'t>> {
        let n = ids.first().map_or(0, Vec::len);
        if n == 0 || ids.iter().any(|r| r.len() != n) || lens.len() != ids.len() {
            return Err(Error::Contract(
                "text batch must be non-empty rows of equal length".into(),
            ));
        }
        if n > self.max_len {
            return Err(Error::Contract(format!(
                "sequence length {n} exceeds maximum {}",
                self.max_len
            )));
        }
        if let Some(&bad) = ids.iter().flatten().find(|&&i| i >= self.vocab_size) {
            return Err(Error::Contract(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        if lens.iter().any(|&l| l == 0 || l > n) {
            return Err(Error::Contract(
                "every sequence needs at least one non-PAD token".into(),
            ));
        }
        let flat: Vec<usize> = ids.iter().flatten().copied().collect();
        let b = ids.len();
        let emb = cx.p(self.embed).index_select(0, &flat)?.reshape(&[b, n, self.d])?;
        let pos = sinusoidal(n, self.d);
        let mut x = emb.add(cx.constant(pos))?;
        let bias = lens
            .iter()
            .any(|&l| l < n)
            .then(|| cx.constant(key_padding_bias(lens, n)));
        for layer in &self.layers {
            x = layer.forward(cx, x, bias)?;
        }
        let tokens = self.norm.forward(cx, x)?;
        Ok(EncoderOutput {
            tokens,
            pooled: masked_mean(cx, tokens, lens)?,
        })
    }

    pub fn encode<'t>(&self, cx: &Ctx<'t>, seq: &TokenSeq) -> Result<EncoderOutput<'t>> {
        if seq.is_empty() {
            return Err(Error::Contract("cannot encode an empty sequence".into()));
        }
        self.forward(cx, &[seq.ids().to_vec()], &[seq.content_len().max(1)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_round_trip() {
        let v = Vocab::from_words("is there a square".split(' '));
        let s = v.tokenize("is there a square");
        assert_eq!(s.ids()[0], BOS);
        assert_eq!(*s.ids().last().unwrap(), EOS);
        assert_eq!(v.detokenize(&s), "is there a square");
        assert_eq!(v.tokenize("").ids(), &[BOS, EOS]);
        assert_eq!(v.unknown_count(), 0);
        assert_eq!(v.tokenize("is there a circle").ids()[4], UNK);
        assert_eq!(v.unknown_count(), 1);
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocab::from_words(["red", "circle"]);
        let back = Vocab::from_lines(&v.to_lines()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("circle"), Some(5));
        assert!(Vocab::from_lines("a\nb\n").is_err());
    }

    #[test]
    fn pad_must_be_suffix() {
        assert!(TokenSeq::new(vec![1, 0, 5]).is_err());
        let s = TokenSeq::new(vec![1, 5, 2, 0, 0]).unwrap();
        assert_eq!(s.content_len(), 3);
        assert_eq!(s.padded(4).unwrap().ids(), &[1, 5, 2, 0]);
        assert!(s.padded(2).is_err());
    }

    #[test]
    fn patches_are_row_major() {
        let img = ImageGrid::new(2, 4, 1, vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]).unwrap();
        let p = img.patches(2).unwrap();
        assert_eq!(p.shape(), &[2, 4]);
        assert_eq!(p.row(0), &[0.0, 0.1, 0.4, 0.5]);
        assert_eq!(p.row(1), &[0.2, 0.3, 0.6, 0.7]);
        assert!(img.patches(3).is_err());
    }
}
