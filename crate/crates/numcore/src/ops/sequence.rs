//! Causal sequence kernels: depthwise convolution and the selective scan.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

fn seq_dims(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(TensorError::contract(op, format!("expected [.., T, C], got {s:?}")));
    }
    let (t, c) = (s[s.len() - 2], s[s.len() - 1]);
    Ok((x.numel() / (t * c), t, c))
}

/// Depthwise causal convolution over the time axis of `x: [.., T, C]` with
/// `weight: [C, W]`; output position `t` sees inputs `t-W+1 ..= t`.
pub fn causal_conv1d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (batch, t_len, ch) = seq_dims("causal_conv1d", x)?;
    if weight.rank() != 2 || weight.shape()[0] != ch {
        return Err(TensorError::mismatch("causal_conv1d", x.shape(), weight.shape()));
    }
    if let Some(b) = bias {
        if b.shape() != [ch] {
            return Err(TensorError::mismatch("causal_conv1d", x.shape(), b.shape()));
        }
    }
    let width = weight.shape()[1];
    let (xd, wd) = (x.data(), weight.data());
    let mut out = vec![0.0; x.numel()];
    for bi in 0..batch {
        let base = bi * t_len * ch;
        for t in 0..t_len {
            for c in 0..ch {
                let mut acc = bias.map_or(0.0, |b| b.data()[c]);
                for j in 0..width {
                    let s = t as isize - (width as isize - 1) + j as isize;
                    if s >= 0 {
                        acc += wd[c * width + j] * xd[base + s as usize * ch + c];
                    }
                }
                out[base + t * ch + c] = acc;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

pub fn causal_conv1d_backward(
    x: &Tensor,
    weight: &Tensor,
    g: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    mut gb: Option<&mut [f64]>,
) {
    let (batch, t_len, ch) = seq_dims("causal_conv1d", x).expect("validated in forward");
    let width = weight.shape()[1];
    let (xd, wd) = (x.data(), weight.data());
    for bi in 0..batch {
        let base = bi * t_len * ch;
        for t in 0..t_len {
            for c in 0..ch {
                let gv = g[base + t * ch + c];
                if let Some(gb) = gb.as_deref_mut() {
                    gb[c] += gv;
                }
                for j in 0..width {
                    let s = t as isize - (width as isize - 1) + j as isize;
                    if s < 0 {
                        continue;
                    }
                    let xi = base + s as usize * ch + c;
                    if let Some(gx) = gx.as_deref_mut() {
                        gx[xi] += gv * wd[c * width + j];
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        gw[c * width + j] += gv * xd[xi];
                    }
                }
            }
        }
    }
}

/// Inputs of one selective-scan call.
///
/// Shapes: `x, delta: [.., T, D]`, `a: [D, N]`, `b, c: [.., T, N]`,
/// `d_skip: [D]`. `delta` is the post-softplus step size.
#[derive(Clone, Copy)]
pub struct ScanInputs<'a> {
    pub x: &'a Tensor,
    pub delta: &'a Tensor,
    pub a: &'a Tensor,
    pub b: &'a Tensor,
    pub c: &'a Tensor,
    pub d_skip: &'a Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub steps: usize,
    pub inner: usize,
    pub state: usize,
}

impl ScanInputs<'_> {
    pub fn dims(&self) -> Result<ScanDims> {
        let (batch, steps, inner) = seq_dims("selective_scan", self.x)?;
        let bad = |t: &Tensor| TensorError::mismatch("selective_scan", self.x.shape(), t.shape());
        if self.delta.shape() != self.x.shape() {
            return Err(bad(self.delta));
        }
        if self.a.rank() != 2 || self.a.shape()[0] != inner {
            return Err(bad(self.a));
        }
        let state = self.a.shape()[1];
        let mut bc_shape = self.x.shape().to_vec();
        *bc_shape.last_mut().unwrap() = state;
        if self.b.shape() != bc_shape.as_slice() {
            return Err(bad(self.b));
        }
        if self.c.shape() != bc_shape.as_slice() {
            return Err(bad(self.c));
        }
        if self.d_skip.shape() != [inner] {
            return Err(bad(self.d_skip));
        }
        Ok(ScanDims {
            batch,
            steps,
            inner,
            state,
        })
    }
}

/// Runs the recurrence
///
/// ```text
/// h_t = exp(Δ_t ⊙ A) ⊙ h_{t-1} + (Δ_t ⊙ B_t) · x_t,   h_0 = 0
/// y_t = C_t · h_t + D ⊙ x_t
/// ```
///
/// and returns `y` together with every hidden state `h_1..h_T`
/// (layout `[batch, T, D, N]`).
pub fn selective_scan(inp: ScanInputs<'_>) -> Result<(Tensor, Vec<f64>)> {
    let ScanDims {
        batch,
        steps,
        inner,
        state,
    } = inp.dims()?;
    let (x, dt, a, b, c, ds) = (
        inp.x.data(),
        inp.delta.data(),
        inp.a.data(),
        inp.b.data(),
        inp.c.data(),
        inp.d_skip.data(),
    );
    let mut y = vec![0.0; x.len()];
    let mut states = vec![0.0; batch * steps * inner * state];
    let mut h = vec![0.0; inner * state];
    for bi in 0..batch {
        h.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..steps {
            let row = bi * steps + t;
            for d in 0..inner {
                let xv = x[row * inner + d];
                let dv = dt[row * inner + d];
                let mut acc = 0.0;
                for n in 0..state {
                    let hn = &mut h[d * state + n];
                    *hn = (dv * a[d * state + n]).exp() * *hn + dv * b[row * state + n] * xv;
                    acc += c[row * state + n] * *hn;
                }
                y[row * inner + d] = acc + ds[d] * xv;
            }
            states[row * inner * state..(row + 1) * inner * state].copy_from_slice(&h);
        }
    }
    Ok((Tensor::new(inp.x.shape(), y)?, states))
}

/// Gradient buffers for the scan inputs; `None` skips that input.
#[derive(Default)]
pub struct ScanGrads<'a> {
    pub x: Option<&'a mut [f64]>,
    pub delta: Option<&'a mut [f64]>,
    pub a: Option<&'a mut [f64]>,
    pub b: Option<&'a mut [f64]>,
    pub c: Option<&'a mut [f64]>,
    pub d_skip: Option<&'a mut [f64]>,
}

pub fn selective_scan_backward(inp: ScanInputs<'_>, states: &[f64], g: &[f64], mut out: ScanGrads<'_>) {
    let ScanDims {
        batch,
        steps,
        inner,
        state,
    } = inp.dims().expect("validated in forward");
    let (x, dt, a, b, c, ds) = (
        inp.x.data(),
        inp.delta.data(),
        inp.a.data(),
        inp.b.data(),
        inp.c.data(),
        inp.d_skip.data(),
    );
    // gradient of the loss w.r.t. h_t, carried backwards through time
    let mut gh = vec![0.0; inner * state];
    let hs = inner * state;
    for bi in 0..batch {
        gh.iter_mut().for_each(|v| *v = 0.0);
        for t in (0..steps).rev() {
            let row = bi * steps + t;
            let h_t = &states[row * hs..(row + 1) * hs];
            let h_prev = if t > 0 {
                Some(&states[(row - 1) * hs..row * hs])
            } else {
                None
            };
            for d in 0..inner {
                let gy = g[row * inner + d];
                let xv = x[row * inner + d];
                let dv = dt[row * inner + d];
                if let Some(gd) = out.d_skip.as_deref_mut() {
                    gd[d] += gy * xv;
                }
                let mut gx_acc = gy * ds[d];
                let mut gdelta = 0.0;
                for n in 0..state {
                    let k = d * state + n;
                    if let Some(gc) = out.c.as_deref_mut() {
                        gc[row * state + n] += gy * h_t[k];
                    }
                    let ghk = gh[k] + gy * c[row * state + n];
                    let abar = (dv * a[k]).exp();
                    let hp = h_prev.map_or(0.0, |h| h[k]);
                    // h_t = abar * h_prev + dv * b * x
                    let g_abar = ghk * hp * abar;
                    gdelta += g_abar * a[k] + ghk * b[row * state + n] * xv;
                    if let Some(ga) = out.a.as_deref_mut() {
                        ga[k] += g_abar * dv;
                    }
                    if let Some(gb) = out.b.as_deref_mut() {
                        gb[row * state + n] += ghk * dv * xv;
                    }
                    gx_acc += ghk * dv * b[row * state + n];
                    gh[k] = ghk * abar;
                }
                if let Some(gx) = out.x.as_deref_mut() {
                    gx[row * inner + d] += gx_acc;
                }
                if let Some(gd) = out.delta.as_deref_mut() {
                    gd[row * inner + d] += gdelta;
                }
            }
        }
    }
}
