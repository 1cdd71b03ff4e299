//! Building blocks shared by the encoders, the query former and the decoder.

use numcore::{Tensor, Var};

use crate::error::Result;
use crate::params::{Ctx, ParamBuilder, ParamId};

/// Additive attention bias for keys that must receive no weight.
pub const MASKED: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let w = pb.normal(&format!("{name}.w"), &[d_in, d_out], (d_in as f64).powf(-0.5));
        let b = bias.then(|| pb.zeros(&format!("{name}.b"), &[d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(cx.p(self.w))?;
        Ok(match self.b {
            Some(b) => y.add(cx.p(b))?,
            None => y,
        })
    }

    pub fn numel(&self) -> usize {
        self.d_in * self.d_out + if self.b.is_some() { self.d_out } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl Norm {
    pub fn new(pb: &mut ParamBuilder, name: &str, d: usize, eps: f64) -> Self {
        Self {
            gain: pb.ones(&format!("{name}.g"), &[d]),
            bias: pb.zeros(&format!("{name}.b"), &[d]),
            eps,
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.layer_norm(Some(cx.p(self.gain)), Some(cx.p(self.bias)), self.eps)?)
    }
}

/// Multi-head scaled dot-product attention on `[B, n, d]` streams.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(pb: &mut ParamBuilder, name: &str, d: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(pb, &format!("{name}.q"), d, d, true),
            k: Linear::new(pb, &format!("{name}.k"), d, d, false),
            v: Linear::new(pb, &format!("{name}.v"), d, d, true),
            o: Linear::new(pb, &format!("{name}.o"), d, d, true),
            heads,
        }
    }

    /// `bias` is added to the `[B, nq, nk]` scores and may broadcast.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, query: Var<'t>, kv: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let q = self.q.forward(cx, query)?;
        let k = self.k.forward(cx, kv)?;
        let v = self.v.forward(cx, kv)?;
        let d = self.q.d_out;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    q.narrow(2, h * dh, dh)?,
                    k.narrow(2, h * dh, dh)?,
                    v.narrow(2, h * dh, dh)?,
                )
            };
            let mut s = qh.matmul_t(kh)?.scale(scale);
            if let Some(b) = bias {
                s = s.add(b)?;
            }
            outs.push(s.softmax(2)?.matmul(vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            cx.tape().concat(&outs, 2)?
        };
        self.o.forward(cx, cat)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder, name: &str, d: usize, ratio: usize) -> Self {
        Self {
            up: Linear::new(pb, &format!("{name}.up"), d, d * ratio, true),
            down: Linear::new(pb, &format!("{name}.down"), d * ratio, d, true),
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.up.forward(cx, x)?.gelu();
        self.down.forward(cx, h)
    }
}

/// Pre-norm self-attention + feed-forward layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(pb: &mut ParamBuilder, name: &str, d: usize, heads: usize, ratio: usize, eps: f64) -> Self {
        Self {
            norm1: Norm::new(pb, &format!("{name}.ln1"), d, eps),
            attn: Attention::new(pb, &format!("{name}.attn"), d, heads),
            norm2: Norm::new(pb, &format!("{name}.ln2"), d, eps),
            ffn: FeedForward::new(pb, &format!("{name}.ffn"), d, ratio),
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let h = self.norm1.forward(cx, x)?;
        let x = x.add(self.attn.forward(cx, h, h, bias)?)?;
        let h = self.norm2.forward(cx, x)?;
        Ok(x.add(self.ffn.forward(cx, h)?)?)
    }
}

/// Sinusoidal position table `[n, d]`.
pub fn sinusoidal(n: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[n, d], |i| {
        let (pos, j) = ((i / d) as f64, i % d);
        let freq = 10000f64.powf(-((j / 2 * 2) as f64) / d as f64);
        if j % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

/// Position table `[gh·gw, d]` for a row-major grid: the first half of the
/// width encodes the row, the second half the column.
pub fn sinusoidal_2d(gh: usize, gw: usize, d: usize) -> Tensor {
    let half = d / 2;
    let rows = sinusoidal(gh, half);
    let cols = sinusoidal(gw, d - half);
    Tensor::from_fn(&[gh * gw, d], |i| {
        let (cell, j) = (i / d, i % d);
        let (r, c) = (cell / gw, cell % gw);
        if j < half {
            rows.data()[r * half + j]
        } else {
            cols.data()[c * (d - half) + j - half]
        }
    })
}

/// `[B, 1, n]` bias that hides keys at positions `>= lens[b]`.
pub fn key_padding_bias(lens: &[usize], n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[lens.len(), 1, n]);
    for (b, &len) in lens.iter().enumerate() {
        for j in len..n {
            t.data_mut()[b * n + j] = MASKED;
        }
    }
    t
}

/// `[1, n, n]` bias hiding future positions.
pub fn causal_bias(n: usize) -> Tensor {
    Tensor::from_fn(&[1, n, n], |i| if i % n > i / n { MASKED } else { 0.0 })
}

/// `[B, n, 1]` indicator of valid positions.
pub fn valid_mask(lens: &[usize], n: usize) -> Tensor {
    Tensor::from_fn(&[lens.len(), n, 1], |i| if i % n < lens[i / n] { 1.0 } else { 0.0 })
}

/// Mean over the first `lens[b]` tokens of `x: [B, n, d]`, giving `[B, d]`.
pub fn masked_mean<'t>(cx: &Ctx<'t>, x: Var<'t>, lens: &[usize]) -> Result<Var<'t>> {
    let n = x.shape()[1];
    if lens.iter().all(|&l| l == n) {
        return Ok(x.mean_axis(1, false)?);
    }
    let mask = cx.constant(valid_mask(lens, n));
    let inv = Tensor::from_fn(&[lens.len(), 1], |b| 1.0 / lens[b] as f64);
    let s = x.mul(mask)?.sum_axis(1, false)?;
    Ok(s.mul(cx.constant(inv))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_bias_hides_future() {
        let c = causal_bias(3);
        assert_eq!(c.at(&[0, 0, 1]), MASKED);
        assert_eq!(c.at(&[0, 2, 1]), 0.0);
        assert_eq!(c.at(&[0, 1, 1]), 0.0);
    }

    #[test]
    fn sinusoid_first_row() {
        let s = sinusoidal(2, 4);
        assert_eq!(s.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((s.at(&[1, 0]) - 1f64.sin()).abs() < 1e-15);
        assert!((s.at(&[1, 2]) - 0.01f64.sin()).abs() < 1e-15);
    }
}
