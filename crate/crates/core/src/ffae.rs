//! Answer classifier, auxiliary free-form answer decoder with a learnable
//! memory mask, and the weighted multi-task objective.

use numcore::{softplus, Tensor, Var};

use crate::config::ModelConfig;
use crate::encoders::{TokenSeq, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::nn::{causal_bias, sinusoidal, Attention, FeedForward, Linear, Norm, MASKED};
use crate::params::{Ctx, ParamBuilder, ParamId};

/// Floor inside the mask log keeping the attention bias finite.
pub const MASK_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Classifier {
    pub fc1: Linear,
    pub norm: Norm,
    pub fc2: Linear,
}

impl Classifier {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            fc1: Linear::new(pb, "cls.fc1", 2 * d, d, true),
            norm: Norm::new(pb, "cls.ln", d, cfg.ln_eps),
            fc2: Linear::new(pb, "cls.fc2", d, cfg.n_classes, true),
        }
    }

    /// Logits `[B, C]` from fused features `[B, 2d]`.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, x_f: Var<'t>) -> Result<Var<'t>> {
        let h = self.norm.forward(cx, self.fc1.forward(cx, x_f)?)?.gelu();
        self.fc2.forward(cx, h)
    }
}

/// Sigmoid binary cross-entropy against one-hot targets, mean over `B·C`.
pub fn cls_loss<'t>(cx: &Ctx<'t>, logits: Var<'t>, targets: &[usize]) -> Result<Var<'t>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != targets.len() {
        return Err(Error::Contract(format!(
            "cls_loss: logits {s:?} do not match {} targets",
            targets.len()
        )));
    }
    let c = s[1];
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::Contract(format!("cls_loss: target {t} outside [0, {c})")));
    }
    let y = Tensor::from_fn(&[targets.len(), c], |i| f64::from(targets[i / c] == i % c));
    Ok(logits.softplus().sub(logits.mul(cx.constant(y))?)?.mean())
}

/// Lowest-index argmax.
pub fn predict_answer(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln_self: Norm,
    pub self_attn: Attention,
    pub ln_cross: Norm,
    pub cross_attn: Attention,
    pub ln_ffn: Norm,
    pub ffn: FeedForward,
}

/// Teacher-forced answer decoder reading the fused token memory.
#[derive(Clone, Debug)]
pub struct AuxDecoder {
    pub embed: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub norm: Norm,
    pub head: Linear,
    /// Learnable per-memory-token mask, initialized to ones.
    pub mask: ParamId,
    d: usize,
    vocab: usize,
    steps: usize,
    memory_len: usize,
}

/// Teacher-forcing inputs and targets for a batch of answers.
#[derive(Clone, Debug, PartialEq)]
pub struct AnswerBatch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

impl AnswerBatch {
    /// Splits `[BOS, w.., EOS]` sequences into shifted input/target rows of
    /// length `steps`, padded with PAD.
    pub fn new(answers: &[TokenSeq], steps: usize) -> Result<Self> {
        let mut inputs = Vec::with_capacity(answers.len());
        let mut targets = Vec::with_capacity(answers.len());
        for a in answers {
            let ids = &a.ids()[..a.content_len()];
            if ids.len() < 2 || ids[0] != BOS || ids[ids.len() - 1] != EOS {
                return Err(Error::Contract("answers must be wrapped in BOS/EOS".into()));
            }
            if ids.len() - 1 > steps {
                return Err(Error::Contract(format!(
                    "answer of {} tokens exceeds decoder length {steps}",
                    ids.len() - 1
                )));
            }
            let mut inp = ids[..ids.len() - 1].to_vec();
            let mut tgt = ids[1..].to_vec();
            inp.resize(steps, PAD);
            tgt.resize(steps, PAD);
            inputs.push(inp);
            targets.push(tgt);
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

impl AuxDecoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let eps = cfg.ln_eps;
        let layers = (0..cfg.decoder_layers)
            .map(|i| {
                let n = format!("dec.layer{i}");
                DecoderLayer {
                    ln_self: Norm::new(pb, &format!("{n}.ln_self"), d, eps),
                    self_attn: Attention::new(pb, &format!("{n}.self"), d, cfg.heads),
                    ln_cross: Norm::new(pb, &format!("{n}.ln_cross"), d, eps),
                    cross_attn: Attention::new(pb, &format!("{n}.cross"), d, cfg.heads),
                    ln_ffn: Norm::new(pb, &format!("{n}.ln_ffn"), d, eps),
                    ffn: FeedForward::new(pb, &format!("{n}.ffn"), d, cfg.mlp_ratio),
                }
            })
            .collect();
        Self {
            embed: pb.normal("dec.embed", &[cfg.vocab_size, d], 1.0),
            layers,
            norm: Norm::new(pb, "dec.ln", d, eps),
            head: Linear::new(pb, "dec.head", d, cfg.vocab_size, true),
            mask: pb.ones("dec.mask", &[cfg.memory_len()]),
            d,
            vocab: cfg.vocab_size,
            steps: cfg.max_answer_len + 1,
            memory_len: cfg.memory_len(),
        }
    }

    /// Decoder length: longest answer plus BOS.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `log(softplus(m) + ε) − log(softplus(1) + ε)` as a `[1, 1, M]` bias;
    /// exactly zero where `m = 1`.
    pub fn mask_bias<'t>(&self, cx: &Ctx<'t>) -> Result<Var<'t>> {
        let at_one = (softplus(1.0) + MASK_EPS).ln();
        let m = cx.p(self.mask);
        Ok(m.softplus()
            .add_scalar(MASK_EPS)
            .ln()
            .add_scalar(-at_one)
            .reshape(&[1, 1, self.memory_len])?)
    }

    /// Token logits `[O, T, V]` for teacher-forced `inputs`.
    ///
    /// `memory: [O, M, d]`; `memory_valid[o]` is the number of leading memory
    /// tokens plus valid text tokens, so PAD text tokens are hidden.
    pub fn logits<'t>(
        &self,
        cx: &Ctx<'t>,
        memory: Var<'t>,
        memory_bias: Option<&Tensor>,
        inputs: &[Vec<usize>],
        use_mask: bool,
    ) -> Result<Var<'t>> {
        let o = inputs.len();
        let t = inputs.first().map_or(0, Vec::len);
        let ms = memory.shape();
        if o == 0 || t == 0 || ms.len() != 3 || ms[0] != o || ms[1] != self.memory_len || ms[2] != self.d {
            return Err(Error::Contract(format!(
                "decoder: memory {ms:?} does not match {o} answers over {} memory tokens",
                self.memory_len
            )));
        }
        if let Some(&bad) = inputs.iter().flatten().find(|&&i| i >= self.vocab) {
            return Err(Error::Contract(format!("decoder: token {bad} outside vocabulary")));
        }
        let flat: Vec<usize> = inputs.iter().flatten().copied().collect();
        let emb = cx.p(self.embed).index_select(0, &flat)?.reshape(&[o, t, self.d])?;
        let mut x = emb.add(cx.constant(sinusoidal(t, self.d)))?;
        let causal = cx.constant(causal_bias(t));
        let mut cross_bias = memory_bias.map(|b| cx.constant(b.clone()));
        if use_mask {
            let mb = self.mask_bias(cx)?;
            cross_bias = Some(match cross_bias {
                Some(b) => b.add(mb)?,
                None => mb,
            });
        }
        for layer in &self.layers {
            let h = layer.ln_self.forward(cx, x)?;
            x = x.add(layer.self_attn.forward(cx, h, h, Some(causal))?)?;
            let h = layer.ln_cross.forward(cx, x)?;
            x = x.add(layer.cross_attn.forward(cx, h, memory, cross_bias)?)?;
            let h = layer.ln_ffn.forward(cx, x)?;
            x = x.add(layer.ffn.forward(cx, h)?)?;
        }
        let h = self.norm.forward(cx, x)?;
        self.head.forward(cx, h)
    }

    /// Mean token cross-entropy over non-PAD targets.
    pub fn loss<'t>(
        &self,
        cx: &Ctx<'t>,
        memory: Var<'t>,
        memory_bias: Option<&Tensor>,
        answers: &AnswerBatch,
        use_mask: bool,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let logits = self.logits(cx, memory, memory_bias, &answers.inputs, use_mask)?;
        let (o, t, v) = (answers.len(), answers.inputs[0].len(), self.vocab);
        let count = answers.targets.iter().flatten().filter(|&&i| i != PAD).count();
        let w = Tensor::from_fn(&[o, t, v], |i| {
            let tok = answers.targets[i / (t * v)][(i / v) % t];
            if tok != PAD && tok == i % v {
                -1.0 / count as f64
            } else {
                0.0
            }
        });
        let loss = logits.log_softmax(2)?.mul(cx.constant(w))?.sum();
        Ok((loss, logits))
    }

    /// Greedy decoding for one memory `[1, M, d]`.
    pub fn generate(&self, cx: &Ctx<'_>, memory: Var<'_>, memory_bias: Option<&Tensor>) -> Result<TokenSeq> {
        let mut ids = vec![BOS];
        while ids.len() <= self.steps {
            let logits = self.logits(cx, memory, memory_bias, &[ids.clone()], true)?;
            let v = logits.value();
            let last = &v.data()[(ids.len() - 1) * self.vocab..ids.len() * self.vocab];
            let next = predict_answer(last);
            ids.push(next);
            if next == EOS || next == PAD {
                break;
            }
        }
        if *ids.last().unwrap() == PAD {
            ids.pop();
        }
        TokenSeq::new(ids)
    }
}

/// `[B, 1, M]` bias hiding PAD text tokens in a `[query ‖ text]` memory.
pub fn memory_padding_bias(query_len: usize, text_lens: &[usize], text_len: usize) -> Option<Tensor> {
    if text_lens.iter().all(|&l| l == text_len) {
        return None;
    }
    let m = query_len + text_len;
    let mut t = Tensor::zeros(&[text_lens.len(), 1, m]);
    for (b, &len) in text_lens.iter().enumerate() {
        for j in len..text_len {
            t.data_mut()[b * m + query_len + j] = MASKED;
        }
    }
    Some(t)
}

/// Scalar values of every objective term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_vtc: f64,
    pub l_v2t: f64,
    pub l_t2v: f64,
    pub l_aux: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// `l_cls + α·l_vtc + β·l_aux`, evaluated in the same order as
/// [`weighted_total`].
pub fn total_loss(l_cls: f64, l_vtc: f64, l_aux: f64, alpha: f64, beta: f64) -> Result<LossBreakdown> {
    if !(alpha >= 0.0 && beta >= 0.0) {
        return Err(Error::Contract(format!(
            "loss weights must be >= 0, got {alpha}, {beta}"
        )));
    }
    Ok(LossBreakdown {
        l_cls,
        l_vtc,
        l_v2t: f64::NAN,
        l_t2v: f64::NAN,
        l_aux,
        total: (l_cls + l_vtc * alpha) + l_aux * beta,
        alpha,
        beta,
    })
}

pub fn weighted_total<'t>(cls: Var<'t>, vtc: Var<'t>, aux: Var<'t>, alpha: f64, beta: f64) -> Result<Var<'t>> {
    Ok(cls.add(vtc.scale(alpha))?.add(aux.scale(beta))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(predict_answer(&[0.1, 0.9]), 1);
        assert_eq!(predict_answer(&[2.0, 2.0, 2.0]), 0);
        assert_eq!(predict_answer(&[0.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn total_of_ones() {
        let l = total_loss(1.0, 1.0, 1.0, 0.2, 0.3).unwrap();
        assert!((l.total - 1.5).abs() < 1e-15);
        assert_eq!(total_loss(0.7, 5.0, 9.0, 0.0, 0.0).unwrap().total, 0.7);
        assert!(total_loss(1.0, 1.0, 1.0, -0.1, 0.0).is_err());
    }

    #[test]
    fn answer_batch_shifts() {
        let a = TokenSeq::new(vec![BOS, 7, 8, EOS]).unwrap();
        let b = AnswerBatch::new(&[a], 4).unwrap();
        assert_eq!(b.inputs[0], vec![BOS, 7, 8, PAD]);
        assert_eq!(b.targets[0], vec![7, 8, EOS, PAD]);
    }
}
