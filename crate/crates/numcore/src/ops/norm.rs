use crate::error::{Result, TensorError};
use crate::ops::reduce::check_axis;
use crate::tensor::{split_at_axis, Tensor};

/// Softmax along `axis` with max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("softmax", x.shape(), axis)?;
    let (outer, len, inner) = split_at_axis(x.shape(), axis);
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for a in 0..len {
                mx = mx.max(d[at(a)]);
            }
            let mut sum = 0.0;
            for a in 0..len {
                let e = (d[at(a)] - mx).exp();
                out[at(a)] = e;
                sum += e;
            }
            for a in 0..len {
                out[at(a)] /= sum;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

pub fn softmax_backward(y: &Tensor, axis: usize, g: &[f64], gx: &mut [f64]) {
    let (outer, len, inner) = split_at_axis(y.shape(), axis);
    let yd = y.data();
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let mut dot = 0.0;
            for a in 0..len {
                dot += g[at(a)] * yd[at(a)];
            }
            for a in 0..len {
                gx[at(a)] += yd[at(a)] * (g[at(a)] - dot);
            }
        }
    }
}

pub fn log_softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("log_softmax", x.shape(), axis)?;
    let (outer, len, inner) = split_at_axis(x.shape(), axis);
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for a in 0..len {
                mx = mx.max(d[at(a)]);
            }
            let mut sum = 0.0;
            for a in 0..len {
                sum += (d[at(a)] - mx).exp();
            }
            let lse = mx + sum.ln();
            for a in 0..len {
                out[at(a)] = d[at(a)] - lse;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

pub fn log_softmax_backward(y: &Tensor, axis: usize, g: &[f64], gx: &mut [f64]) {
    let (outer, len, inner) = split_at_axis(y.shape(), axis);
    let yd = y.data();
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let gsum: f64 = (0..len).map(|a| g[at(a)]).sum();
            for a in 0..len {
                gx[at(a)] += g[at(a)] - yd[at(a)].exp() * gsum;
            }
        }
    }
}

/// Saved statistics of a layer norm forward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    /// Normalized input before gain and bias.
    pub xhat: Vec<f64>,
    /// Per-row reciprocal standard deviation.
    pub rstd: Vec<f64>,
}

/// Normalizes over the last axis, then applies optional gain and bias.
pub fn layer_norm(
    x: &Tensor,
    gain: Option<&Tensor>,
    bias: Option<&Tensor>,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let shape = x.shape();
    let Some(&width) = shape.last() else {
        return Err(TensorError::contract("layer_norm", "input must have rank >= 1"));
    };
    for p in [gain, bias].into_iter().flatten() {
        if p.shape() != [width] {
            return Err(TensorError::mismatch("layer_norm", shape, p.shape()));
        }
    }
    let rows = x.numel() / width;
    let d = x.data();
    let mut xhat = vec![0.0; d.len()];
    let mut rstd = vec![0.0; rows];
    let mut out = vec![0.0; d.len()];
    for r in 0..rows {
        let row = &d[r * width..(r + 1) * width];
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..width {
            let xh = (row[c] - mean) * rs;
            xhat[r * width + c] = xh;
            let gv = gain.map_or(1.0, |g| g.data()[c]);
            let bv = bias.map_or(0.0, |b| b.data()[c]);
            out[r * width + c] = xh * gv + bv;
        }
    }
    Ok((Tensor::new(shape, out)?, LayerNormCache { xhat, rstd }))
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: Option<&Tensor>,
    width: usize,
    g: &[f64],
    gx: Option<&mut [f64]>,
    mut ggain: Option<&mut [f64]>,
    mut gbias: Option<&mut [f64]>,
) {
    let rows = cache.rstd.len();
    let n = width as f64;
    let mut gx = gx;
    let mut dxhat = vec![0.0; width];
    for r in 0..rows {
        let xh = &cache.xhat[r * width..(r + 1) * width];
        let gr = &g[r * width..(r + 1) * width];
        for c in 0..width {
            if let Some(gg) = ggain.as_deref_mut() {
                gg[c] += gr[c] * xh[c];
            }
            if let Some(gb) = gbias.as_deref_mut() {
                gb[c] += gr[c];
            }
            dxhat[c] = gr[c] * gain.map_or(1.0, |t| t.data()[c]);
        }
        if let Some(gx) = gx.as_deref_mut() {
            let sum: f64 = dxhat.iter().sum();
            let dot: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
            let rs = cache.rstd[r];
            for c in 0..width {
                gx[r * width + c] += rs / n * (n * dxhat[c] - sum - xh[c] * dot);
            }
        }
    }
}
