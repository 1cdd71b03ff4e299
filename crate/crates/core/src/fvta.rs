//! Question-aware query former and max-over-queries contrastive loss.

use numcore::{Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Attention, FeedForward, Norm, MASKED};
use crate::params::{Ctx, ParamBuilder, ParamId};

#[derive(Clone, Debug)]
pub struct QqLayer {
    pub ln_self: Norm,
    pub ln_text: Norm,
    pub self_attn: Attention,
    pub ln_cross: Norm,
    pub cross_attn: Attention,
    pub ln_ffn: Norm,
    pub ffn: FeedForward,
}

/// Learnable query bank refined against visual tokens, conditioned on the
/// question through the self-attention context.
#[derive(Clone, Debug)]
pub struct QqFormer {
    pub queries: ParamId,
    pub layers: Vec<QqLayer>,
    n_queries: usize,
    d: usize,
}

/// Question tokens `[B, L, d]` with their non-PAD lengths.
#[derive(Clone, Copy, Debug)]
pub struct TextContext<'t, 'a> {
    pub tokens: Var<'t>,
    pub lens: &'a [usize],
}

impl QqFormer {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let eps = cfg.ln_eps;
        let layers = (0..cfg.qformer_layers)
            .map(|i| {
                let n = format!("qq.layer{i}");
                QqLayer {
                    ln_self: Norm::new(pb, &format!("{n}.ln_self"), d, eps),
                    ln_text: Norm::new(pb, &format!("{n}.ln_text"), d, eps),
                    self_attn: Attention::new(pb, &format!("{n}.self"), d, cfg.heads),
                    ln_cross: Norm::new(pb, &format!("{n}.ln_cross"), d, eps),
                    cross_attn: Attention::new(pb, &format!("{n}.cross"), d, cfg.heads),
                    ln_ffn: Norm::new(pb, &format!("{n}.ln_ffn"), d, eps),
                    ffn: FeedForward::new(pb, &format!("{n}.ffn"), d, cfg.mlp_ratio),
                }
            })
            .collect();
        Self {
            queries: pb.normal("qq.queries", &[cfg.n_queries, d], 1.0),
            layers,
            n_queries: cfg.n_queries,
            d,
        }
    }

    /// Aligned queries `[B, K, d]` from visual tokens `[B, n, d]`.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, visual: Var<'t>, text: Option<TextContext<'t, '_>>) -> Result<Var<'t>> {
        let vs = visual.shape();
        if vs.len() != 3 || vs[1] == 0 {
            return Err(Error::Contract(format!(
                "visual tokens must be [B, n>0, d], got {vs:?}"
            )));
        }
        if vs[2] != self.d {
            return Err(Error::Contract(format!(
                "visual width {} does not match query width {}",
                vs[2], self.d
            )));
        }
        let b = vs[0];
        let k = self.n_queries;
        let ctx_bias = match text {
            Some(t) => {
                let l = t.tokens.shape()[1];
                if t.lens.iter().all(|&n| n == l) {
                    None
                } else {
                    let width = k + l;
                    let mut bias = Tensor::zeros(&[b, 1, width]);
                    for (bi, &len) in t.lens.iter().enumerate() {
                        for j in len..l {
                            bias.data_mut()[bi * width + k + j] = MASKED;
                        }
                    }
                    Some(cx.constant(bias))
                }
            }
            None => None,
        };
        let mut z = cx.p(self.queries).broadcast_to(&[b, k, self.d])?;
        for layer in &self.layers {
            let h = layer.ln_self.forward(cx, z)?;
            let context = match text {
                Some(t) => {
                    let tn = layer.ln_text.forward(cx, t.tokens)?;
                    cx.tape().concat(&[h, tn], 1)?
                }
                None => h,
            };
            z = z.add(layer.self_attn.forward(cx, h, context, ctx_bias)?)?;
            let h = layer.ln_cross.forward(cx, z)?;
            z = z.add(layer.cross_attn.forward(cx, h, visual, None)?)?;
            let h = layer.ln_ffn.forward(cx, z)?;
            z = z.add(layer.ffn.forward(cx, h)?)?;
        }
        Ok(z)
    }
}

/// Contrastive loss terms as tape values.
#[derive(Clone, Copy, Debug)]
pub struct VtcLoss<'t> {
    pub total: Var<'t>,
    pub v2t: Var<'t>,
    pub t2v: Var<'t>,
}

/// Similarity matrix `S[i][j] = max_k cos(z[i,k], t[j])` as a `[B, B]` var.
pub fn max_similarity<'t>(z: Var<'t>, t: Var<'t>) -> Result<Var<'t>> {
    let (zs, ts) = (z.shape(), t.shape());
    if zs.len() != 3 || ts.len() != 2 || zs[0] != ts[0] || zs[2] != ts[1] || zs[0] == 0 {
        return Err(Error::Contract(format!(
            "vtc expects z [B, K, d] and t [B, d], got {zs:?} and {ts:?}"
        )));
    }
    let (b, k, d) = (zs[0], zs[1], zs[2]);
    check_nonzero(&z.value(), b, k * d, "query")?;
    check_nonzero(&t.value(), b, d, "text")?;
    let zn = z.l2_normalize(0.0)?.reshape(&[b * k, d])?;
    let tn = t.l2_normalize(0.0)?;
    let sims = zn.matmul_t(tn)?.reshape(&[b, k, b])?;
    Ok(sims.max_axis(1, false)?)
}

fn check_nonzero(v: &Tensor, b: usize, stride: usize, which: &'static str) -> Result<()> {
    let d = v.shape().last().copied().unwrap_or(1);
    for i in 0..b {
        let sample = &v.data()[i * stride..(i + 1) * stride];
        if sample.chunks(d).any(|row| row.iter().all(|&x| x == 0.0)) {
            return Err(Error::ZeroNorm { index: i, which });
        }
    }
    Ok(())
}

/// In-batch InfoNCE in both directions over max-over-queries cosine
/// similarity at temperature `tau`.
pub fn vtc_loss<'t>(cx: &Ctx<'t>, z: Var<'t>, t: Var<'t>, tau: f64) -> Result<VtcLoss<'t>> {
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
    }
    let s = max_similarity(z, t)?.scale(1.0 / tau);
    let b = s.shape()[0];
    let diag = cx.constant(Tensor::eye(b).map(|x| -x / b as f64));
    let v2t = s.log_softmax(1)?.mul(diag)?.sum();
    let t2v = s.transpose()?.log_softmax(1)?.mul(diag)?.sum();
    Ok(VtcLoss {
        total: v2t.add(t2v)?,
        v2t,
        t2v,
    })
}
