//! The full network: encoders → query former → interaction stack → heads.

use numcore::{Tensor, Var};

use crate::cifr::{Cifr, FusedFeature};
use crate::config::ModelConfig;
use crate::data::{VqaSample, OUT_OF_SET};
use crate::encoders::{patch_batch, ImageEncoder, TextEncoder, TokenSeq, Vocab};
use crate::error::{Error, Result};
use crate::ffae::{cls_loss, memory_padding_bias, weighted_total, AnswerBatch, AuxDecoder, Classifier, LossBreakdown};
use crate::fvta::{vtc_loss, QqFormer, TextContext};
use crate::params::{Ctx, ParamBuilder, ParamStore};

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub qq: Option<QqFormer>,
    pub cifr: Cifr,
    pub classifier: Classifier,
    pub decoder: Option<AuxDecoder>,
}

/// Model-ready tensors for a group of samples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub patches: Tensor,
    pub text: Vec<Vec<usize>>,
    pub lens: Vec<usize>,
    pub targets: Vec<usize>,
    pub is_open: Vec<bool>,
    pub answers: Vec<TokenSeq>,
}

impl Batch {
    pub fn new(samples: &[&VqaSample], vocab: &Vocab, cfg: &ModelConfig) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
        let patches = patch_batch(&images, cfg.patch)?;
        let mut text = Vec::with_capacity(samples.len());
        let mut lens = Vec::with_capacity(samples.len());
        for s in samples {
            let seq = vocab.tokenize(&s.question);
            lens.push(seq.content_len());
            text.push(seq.padded(cfg.max_len)?.ids().to_vec());
        }
        Ok(Self {
            ids: samples.iter().map(|s| s.id).collect(),
            patches,
            text,
            lens,
            targets: samples.iter().map(|s| s.answer_class).collect(),
            is_open: samples.iter().map(|s| s.is_open).collect(),
            answers: samples.iter().map(|s| vocab.tokenize(&s.answer)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lens.is_empty()
    }

    pub fn open_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_open[i]).collect()
    }
}

/// Loss weights and contrastive temperature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 0.3,
            tau: 0.07,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Losses<'t> {
    pub cls: Var<'t>,
    pub vtc: Var<'t>,
    pub v2t: Var<'t>,
    pub t2v: Var<'t>,
    pub aux: Var<'t>,
    pub total: Var<'t>,
    pub weights: LossWeights,
}

impl Losses<'_> {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            l_cls: self.cls.item(),
            l_vtc: self.vtc.item(),
            l_v2t: self.v2t.item(),
            l_t2v: self.t2v.item(),
            l_aux: self.aux.item(),
            total: self.total.item(),
            alpha: self.weights.alpha,
            beta: self.weights.beta,
        }
    }

    /// First non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("cls", self.cls),
            ("vtc", self.vtc),
            ("aux", self.aux),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.item().is_finite())
        .map(|(n, _)| n)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Forward<'t> {
    /// Image encoder output tokens `[B, n_patches, d]`.
    pub image_tokens: Var<'t>,
    pub text_pooled: Var<'t>,
    /// Query stream `[B, K, d]` entering the interaction stack.
    pub queries: Var<'t>,
    pub fused: FusedFeature<'t>,
    pub logits: Var<'t>,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut pb = ParamBuilder::new(seed);
        let image = ImageEncoder::new(&mut pb, cfg);
        let text = TextEncoder::new(&mut pb, cfg);
        let qq = cfg.toggles.qqformer.then(|| QqFormer::new(&mut pb, cfg));
        let cifr = Cifr::new(&mut pb, cfg);
        let classifier = Classifier::new(&mut pb, cfg);
        let decoder = cfg.toggles.ahead.then(|| AuxDecoder::new(&mut pb, cfg));
        Ok(Self {
            cfg: cfg.clone(),
            store: pb.finish(),
            image,
            text,
            qq,
            cifr,
            classifier,
            decoder,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.numel()
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, batch: &Batch) -> Result<Forward<'t>> {
        self.forward_patches(cx, cx.constant(batch.patches.clone()), batch)
    }

    /// Forward pass with the patch tensor supplied as a tape value.
    pub fn forward_patches<'t>(&self, cx: &Ctx<'t>, patches: Var<'t>, batch: &Batch) -> Result<Forward<'t>> {
        let img = self.image.forward_var(cx, patches)?;
        let txt = self.text.forward(cx, &batch.text, &batch.lens)?;
        let queries = match &self.qq {
            Some(qq) => qq.forward(
                cx,
                img.tokens,
                Some(TextContext {
                    tokens: txt.tokens,
                    lens: &batch.lens,
                }),
            )?,
            None => img.tokens,
        };
        let fused = self.cifr.forward(cx, queries, txt.tokens, &batch.lens)?;
        let logits = self.classifier.forward(cx, fused.x_f)?;
        Ok(Forward {
            image_tokens: img.tokens,
            text_pooled: txt.pooled,
            queries,
            fused,
            logits,
        })
    }

    /// Auxiliary answer loss over the open samples of `batch`; exactly zero
    /// without open samples or without the decoder.
    pub fn aux_loss<'t>(&self, cx: &Ctx<'t>, fwd: &Forward<'t>, batch: &Batch) -> Result<Var<'t>> {
        let open = batch.open_indices();
        let Some(dec) = &self.decoder else {
            return Ok(cx.tape().scalar(0.0));
        };
        if open.is_empty() {
            return Ok(cx.tape().scalar(0.0));
        }
        let memory = fwd.fused.memory.index_select(0, &open)?;
        let lens: Vec<usize> = open.iter().map(|&i| batch.lens[i]).collect();
        let bias = memory_padding_bias(self.cfg.query_stream_len(), &lens, self.cfg.max_len);
        let answers: Vec<TokenSeq> = open.iter().map(|&i| batch.answers[i].clone()).collect();
        let ab = AnswerBatch::new(&answers, dec.steps())?;
        Ok(dec.loss(cx, memory, bias.as_ref(), &ab, true)?.0)
    }

    pub fn losses<'t>(&self, cx: &Ctx<'t>, fwd: &Forward<'t>, batch: &Batch, w: LossWeights) -> Result<Losses<'t>> {
        if batch.targets.contains(&OUT_OF_SET) {
            return Err(Error::Contract("training batch contains an out-of-set answer".into()));
        }
        let cls = cls_loss(cx, fwd.logits, &batch.targets)?;
        let (vtc, v2t, t2v) = if self.cfg.toggles.cmcl {
            let l = vtc_loss(cx, fwd.queries, fwd.text_pooled, w.tau)?;
            (l.total, l.v2t, l.t2v)
        } else {
            let zero = cx.tape().scalar(0.0);
            (zero, zero, zero)
        };
        let aux = self.aux_loss(cx, fwd, batch)?;
        let total = weighted_total(cls, vtc, aux, w.alpha, w.beta)?;
        Ok(Losses {
            cls,
            vtc,
            v2t,
            t2v,
            aux,
            total,
            weights: w,
        })
    }

    /// Greedy answer string for sample `i` of the batch.
    pub fn generate(
        &self,
        cx: &Ctx<'_>,
        fwd: &Forward<'_>,
        batch: &Batch,
        i: usize,
        vocab: &Vocab,
    ) -> Result<Option<String>> {
        let Some(dec) = &self.decoder else {
            return Ok(None);
        };
        let memory = fwd.fused.memory.index_select(0, &[i])?;
        let bias = memory_padding_bias(self.cfg.query_stream_len(), &[batch.lens[i]], self.cfg.max_len);
        let seq = dec.generate(cx, memory, bias.as_ref())?;
        Ok(Some(vocab.detokenize(&seq)))
    }
}
