//! Row-major GEMM kernels.
//!
//! Every output element is accumulated over the contraction index in a fixed
//! ascending order, so results do not depend on how rows are batched.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// How a (possibly batched) product maps onto flat GEMM calls.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatmulPlan {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `b` is a single matrix shared by every batch entry.
    pub shared_b: bool,
    /// `b` is stored as `[n, k]` and used transposed.
    pub trans_b: bool,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize], trans_b: bool) -> Result<(Self, Vec<usize>)> {
        let op = if trans_b { "matmul_t" } else { "matmul" };
        if a.len() < 2 || b.len() < 2 {
            return Err(TensorError::mismatch(op, a, b));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (bk, n) = if trans_b {
            (b[b.len() - 1], b[b.len() - 2])
        } else {
            (b[b.len() - 2], b[b.len() - 1])
        };
        if bk != k {
            return Err(TensorError::mismatch(op, a, b));
        }
        let lead = &a[..a.len() - 2];
        let batch: usize = lead.iter().product();
        let shared_b = b.len() == 2;
        if !shared_b && &b[..b.len() - 2] != lead {
            return Err(TensorError::mismatch(op, a, b));
        }
        let mut out = lead.to_vec();
        out.extend([m, n]);
        Ok((
            Self {
                batch,
                m,
                k,
                n,
                shared_b,
                trans_b,
            },
            out,
        ))
    }

    fn b_stride(&self) -> usize {
        if self.shared_b {
            0
        } else {
            self.k * self.n
        }
    }
}

/// `out += a · b` with `a: m×k`, `b: k×n`.
pub fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` with `a: m×k`, `b: n×k`.
pub fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out += aᵀ · g` with `a: m×k`, `g: m×n`, `out: k×n`.
pub fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

pub fn forward(a: &Tensor, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let (plan, out_shape) = MatmulPlan::new(a.shape(), b.shape(), trans_b)?;
    let MatmulPlan { batch, m, k, n, .. } = plan;
    let mut out = vec![0.0; batch * m * n];
    let (ad, bd) = (a.data(), b.data());
    if plan.shared_b {
        // One tall GEMM over all leading rows.
        if trans_b {
            gemm_nt(ad, bd, &mut out, batch * m, k, n);
        } else {
            gemm_nn(ad, bd, &mut out, batch * m, k, n);
        }
    } else {
        for bi in 0..batch {
            let a_s = &ad[bi * m * k..(bi + 1) * m * k];
            let b_s = &bd[bi * k * n..(bi + 1) * k * n];
            let o_s = &mut out[bi * m * n..(bi + 1) * m * n];
            if trans_b {
                gemm_nt(a_s, b_s, o_s, m, k, n);
            } else {
                gemm_nn(a_s, b_s, o_s, m, k, n);
            }
        }
    }
    Tensor::new(&out_shape, out)
}

pub fn backward(a: &Tensor, b: &Tensor, trans_b: bool, g: &[f64], ga: Option<&mut [f64]>, gb: Option<&mut [f64]>) {
    let (plan, _) = MatmulPlan::new(a.shape(), b.shape(), trans_b).expect("validated in forward");
    let MatmulPlan { batch, m, k, n, .. } = plan;
    let (ad, bd) = (a.data(), b.data());
    let bs = plan.b_stride();
    if let Some(ga) = ga {
        for bi in 0..batch {
            let g_s = &g[bi * m * n..(bi + 1) * m * n];
            let b_s = &bd[bi * bs..bi * bs + k * n];
            let ga_s = &mut ga[bi * m * k..(bi + 1) * m * k];
            if trans_b {
                gemm_nn(g_s, b_s, ga_s, m, n, k);
            } else {
                gemm_nt(g_s, b_s, ga_s, m, n, k);
            }
        }
    }
    if let Some(gb) = gb {
        for bi in 0..batch {
            let g_s = &g[bi * m * n..(bi + 1) * m * n];
            let a_s = &ad[bi * m * k..(bi + 1) * m * k];
            let gb_s = &mut gb[bi * bs..bi * bs + k * n];
            if trans_b {
                gemm_tn(g_s, a_s, gb_s, m, n, k);
            } else {
                gemm_tn(a_s, g_s, gb_s, m, k, n);
            }
        }
    }
}

/// Swaps the last two axes.
pub fn transpose_last2(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(TensorError::contract("transpose", "rank must be at least 2"));
    }
    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
    let batch = x.numel() / (r * c);
    let mut out = vec![0.0; x.numel()];
    let d = x.data();
    for bi in 0..batch {
        let base = bi * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = d[base + i * c + j];
            }
        }
    }
    let mut shape = s.to_vec();
    let l = shape.len();
    shape.swap(l - 2, l - 1);
    Tensor::new(&shape, out)
}
