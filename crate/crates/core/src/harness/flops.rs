//! Analytic parameter and FLOP counts.
//!
//! FLOPs count matrix products as `2·m·k·n`, attention score and mixing
//! products likewise, the depthwise causal convolution as `2·T·D·W`, and the
//! selective scan as `8·T·D·N + 2·T·D` (decay, input drive, state update and
//! readout per state; skip term per channel). Normalizations, activations
//! and elementwise gates are not counted.

use numcore::Tape;

use crate::config::ModelConfig;
use crate::encoders::{ImageGrid, TokenSeq, BOS, EOS};
use crate::error::Result;
use crate::model::{Batch, LossWeights, Model};
use crate::params::Ctx;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Count {
    pub params: usize,
    pub flops: u64,
}

impl std::ops::Add for Count {
    type Output = Count;
    fn add(self, o: Count) -> Count {
        Count {
            params: self.params + o.params,
            flops: self.flops + o.flops,
        }
    }
}

impl std::iter::Sum for Count {
    fn sum<I: Iterator<Item = Count>>(iter: I) -> Count {
        iter.fold(Count::default(), |a, b| a + b)
    }
}

impl Count {
    fn params(params: usize) -> Self {
        Self { params, flops: 0 }
    }

    fn times(self, k: usize) -> Self {
        Self {
            params: self.params * k,
            flops: self.flops * k as u64,
        }
    }
}

pub fn matmul_flops(m: usize, k: usize, n: usize) -> u64 {
    2 * (m * k * n) as u64
}

/// Linear map applied to `n` tokens.
pub fn linear(n: usize, d_in: usize, d_out: usize, bias: bool) -> Count {
    Count {
        params: d_in * d_out + if bias { d_out } else { 0 },
        flops: matmul_flops(n, d_in, d_out),
    }
}

fn norm(d: usize) -> Count {
    Count::params(2 * d)
}

/// Score and mixing products of attention: `4·nq·nk·d`.
pub fn attention_score_flops(nq: usize, nk: usize, d: usize) -> u64 {
    2 * matmul_flops(nq, d, nk)
}

pub fn attention(nq: usize, nk: usize, d: usize) -> Count {
    linear(nq, d, d, true)
        + linear(nk, d, d, false)
        + linear(nk, d, d, true)
        + linear(nq, d, d, true)
        + Count {
            params: 0,
            flops: attention_score_flops(nq, nk, d),
        }
}

pub fn feed_forward(n: usize, d: usize, ratio: usize) -> Count {
    linear(n, d, ratio * d, true) + linear(n, ratio * d, d, true)
}

fn encoder_layer(n: usize, d: usize, ratio: usize) -> Count {
    norm(d).times(2) + attention(n, n, d) + feed_forward(n, d, ratio)
}

pub fn image_encoder(cfg: &ModelConfig) -> Count {
    let (n, d) = (cfg.n_patches(), cfg.d_model);
    linear(n, cfg.patch_dim(), d, true) + encoder_layer(n, d, cfg.mlp_ratio).times(cfg.image_layers) + norm(d)
}

pub fn text_encoder(cfg: &ModelConfig) -> Count {
    let (l, d) = (cfg.max_len, cfg.d_model);
    Count::params(cfg.vocab_size * d) + encoder_layer(l, d, cfg.mlp_ratio).times(cfg.text_layers) + norm(d)
}

pub fn qqformer(cfg: &ModelConfig) -> Count {
    let (k, l, d) = (cfg.n_queries, cfg.max_len, cfg.d_model);
    let layer = norm(d).times(4)
        + attention(k, k + l, d)
        + attention(k, cfg.n_patches(), d)
        + feed_forward(k, d, cfg.mlp_ratio);
    Count::params(k * d) + layer.times(cfg.qformer_layers)
}

/// One selective-scan block over `t` tokens.
pub fn mamba_block(cfg: &ModelConfig, t: usize) -> Count {
    let (d, di, n, r, w) = (cfg.d_model, cfg.d_inner(), cfg.d_state, cfg.dt_rank, cfg.d_conv);
    linear(t, d, di, false).times(2)
        + Count {
            params: di * w + di,
            flops: 2 * (t * di * w) as u64,
        }
        + linear(t, di, r + 2 * n, false)
        + linear(t, r, di, true)
        + Count {
            params: di * n + di,
            flops: (8 * t * di * n + 2 * t * di) as u64,
        }
        + linear(t, di, d, true)
}

/// One stream of an interaction block: scan block plus fusion map.
pub fn cmm_stream(cfg: &ModelConfig, t: usize) -> Count {
    mamba_block(cfg, t) + linear(t, cfg.d_model, cfg.d_model, true)
}

/// Interaction stack over query length `k` and text length `l`.
pub fn cmm_stack(cfg: &ModelConfig, k: usize, l: usize) -> Count {
    let blocks = if cfg.toggles.cmm { cfg.cmm_blocks } else { 0 };
    norm(cfg.d_model).times(2) + (cmm_stream(cfg, k) + cmm_stream(cfg, l)).times(blocks)
}

/// Transformer cross-attention stack of the same width and depth: per block
/// and stream, attention to the other stream plus a ratio-4 feed-forward
/// with two normalizations.
pub fn reference_attention_stack(d: usize, k: usize, l: usize, blocks: usize) -> Count {
    let stream = |nq: usize, nk: usize| norm(d).times(2) + attention(nq, nk, d) + feed_forward(nq, d, 4);
    (stream(k, l) + stream(l, k)).times(blocks)
}

pub fn classifier(cfg: &ModelConfig) -> Count {
    let d = cfg.d_model;
    linear(1, 2 * d, d, true) + norm(d) + linear(1, d, cfg.n_classes, true)
}

pub fn decoder(cfg: &ModelConfig) -> Count {
    let (d, t, m) = (cfg.d_model, cfg.max_answer_len + 1, cfg.memory_len());
    let layer = norm(d).times(3) + attention(t, t, d) + attention(t, m, d) + feed_forward(t, d, cfg.mlp_ratio);
    Count::params(cfg.vocab_size * d + m)
        + layer.times(cfg.decoder_layers)
        + norm(d)
        + linear(t, d, cfg.vocab_size, true)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EfficiencyReport {
    pub params: usize,
    /// Forward FLOPs for one sample.
    pub flops: u64,
    /// Bytes held by the tape after one single-sample forward and loss.
    pub peak_bytes: usize,
    pub modules: Vec<(String, Count)>,
}

impl EfficiencyReport {
    pub fn to_kv(&self) -> String {
        let mut s = format!(
            "params={}\nflops={}\npeak_bytes={}\n",
            self.params, self.flops, self.peak_bytes
        );
        for (name, c) in &self.modules {
            s.push_str(&format!("{name}.params={}\n{name}.flops={}\n", c.params, c.flops));
        }
        s
    }
}

pub fn module_counts(cfg: &ModelConfig) -> Vec<(String, Count)> {
    let mut m = vec![
        ("image".to_string(), image_encoder(cfg)),
        ("text".to_string(), text_encoder(cfg)),
    ];
    if cfg.toggles.qqformer {
        m.push(("qqformer".into(), qqformer(cfg)));
    }
    m.push(("cmm".into(), cmm_stack(cfg, cfg.query_stream_len(), cfg.max_len)));
    m.push(("classifier".into(), classifier(cfg)));
    if cfg.toggles.ahead {
        m.push(("decoder".into(), decoder(cfg)));
    }
    m
}

/// Peak tape bytes for one sample with an open question.
pub fn measure_peak_bytes(cfg: &ModelConfig) -> Result<usize> {
    let model = Model::new(cfg, 0)?;
    let mut text = vec![BOS, 4.min(cfg.vocab_size - 1), EOS];
    let lens = vec![text.len()];
    text.resize(cfg.max_len, 0);
    let batch = Batch {
        ids: vec![0],
        patches: ImageGrid::filled(cfg.image_size, cfg.image_size, cfg.channels, 0.5)
            .patches(cfg.patch)?
            .reshape(&[1, cfg.n_patches(), cfg.patch_dim()])?,
        text: vec![text],
        lens,
        targets: vec![0],
        is_open: vec![true],
        answers: vec![TokenSeq::new(vec![BOS, 4.min(cfg.vocab_size - 1), EOS])?],
    };
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &model.store);
    let fwd = model.forward(&cx, &batch)?;
    model.losses(&cx, &fwd, &batch, LossWeights::default())?;
    Ok(tape.resident_bytes())
}

pub fn count_params_flops(cfg: &ModelConfig) -> Result<EfficiencyReport> {
    cfg.validate()?;
    let modules = module_counts(cfg);
    let total: Count = modules.iter().map(|(_, c)| *c).sum();
    Ok(EfficiencyReport {
        params: total.params,
        flops: total.flops,
        peak_bytes: measure_peak_bytes(cfg)?,
        modules,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_formula() {
        assert_eq!(linear(1, 32, 5, true).params, 32 * 5 + 5);
        assert_eq!(linear(3, 4, 5, false).flops, 2 * 3 * 4 * 5);
    }
}
