use crate::error::{Result, TensorError};
use crate::tensor::{broadcast_shape, broadcast_strides, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }

    #[inline]
    fn apply(self, x: f64, y: f64) -> f64 {
        match self {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        }
    }
}

/// Visits every output element with the matching flat offsets into `a` and `b`.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let (mut ao, mut bo) = (0usize, 0usize);
    let mut o = 0;
    for _ in 0..outer {
        for j in 0..last {
            f(o, ao + j * la, bo + j * lb);
            o += 1;
        }
        // odometer over the leading axes
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            ao += sa[ax];
            bo += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ao -= sa[ax] * out[ax];
            bo -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

pub fn binary_forward(kind: BinaryKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| kind.apply(x, y)).collect();
        return Tensor::new(a.shape(), data);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())
        .ok_or_else(|| TensorError::mismatch(kind.name(), a.shape(), b.shape()))?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let n: usize = out_shape.iter().product();
    let mut out = vec![0.0; n];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| {
        out[o] = kind.apply(ad[i], bd[j]);
    });
    Tensor::new(&out_shape, out)
}

pub fn binary_backward(
    kind: BinaryKind,
    a: &Tensor,
    b: &Tensor,
    out_shape: &[usize],
    g: &[f64],
    mut ga: Option<&mut [f64]>,
    mut gb: Option<&mut [f64]>,
) {
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(out_shape, &sa, &sb, |o, i, j| {
        let go = g[o];
        let (x, y) = (ad[i], bd[j]);
        let (dx, dy) = match kind {
            BinaryKind::Add => (go, go),
            BinaryKind::Sub => (go, -go),
            BinaryKind::Mul => (go * y, go * x),
            BinaryKind::Div => (go / y, -go * x / (y * y)),
        };
        if let Some(ga) = ga.as_deref_mut() {
            ga[i] += dx;
        }
        if let Some(gb) = gb.as_deref_mut() {
            gb[j] += dy;
        }
    });
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Neg,
    Exp,
    Log,
    Sqrt,
    Square,
    Gelu,
    Silu,
    Relu,
    Softplus,
    Sigmoid,
    Tanh,
    Scale(f64),
    AddScalar(f64),
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF via erf.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl UnaryKind {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryKind::Neg => -x,
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Sqrt => x.sqrt(),
            UnaryKind::Square => x * x,
            UnaryKind::Gelu => x * normal_cdf(x),
            UnaryKind::Silu => x * sigmoid(x),
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::Softplus => softplus(x),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Scale(c) => x * c,
            UnaryKind::AddScalar(c) => x + c,
        }
    }

    /// dy/dx given the input and the forward output.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryKind::Neg => -1.0,
            UnaryKind::Exp => y,
            UnaryKind::Log => 1.0 / x,
            UnaryKind::Sqrt => 0.5 / y,
            UnaryKind::Square => 2.0 * x,
            UnaryKind::Gelu => normal_cdf(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp(),
            UnaryKind::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            UnaryKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Softplus => sigmoid(x),
            UnaryKind::Sigmoid => y * (1.0 - y),
            UnaryKind::Tanh => 1.0 - y * y,
            UnaryKind::Scale(c) => c,
            UnaryKind::AddScalar(_) => 1.0,
        }
    }
}

pub fn unary_forward(kind: UnaryKind, x: &Tensor) -> Tensor {
    x.map(|v| kind.apply(v))
}

pub fn unary_backward(kind: UnaryKind, x: &Tensor, y: &Tensor, g: &[f64], gx: &mut [f64]) {
    for (((o, &xv), &yv), &gv) in gx.iter_mut().zip(x.data()).zip(y.data()).zip(g) {
        *o += gv * kind.derivative(xv, yv);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_reference_values() {
        assert_eq!(UnaryKind::Gelu.apply(0.0), 0.0);
        // x·Φ(x) at 1 via erf
        let expected = 0.5 * (1.0 + libm::erf(1.0 / 2f64.sqrt()));
        assert!((UnaryKind::Gelu.apply(1.0) - expected).abs() < 1e-15);
        assert!((UnaryKind::Gelu.apply(1.0) - 0.841345).abs() < 1e-5);
    }

    #[test]
    fn silu_relu_zero_points() {
        assert_eq!(UnaryKind::Silu.apply(0.0), 0.0);
        assert_eq!(UnaryKind::Relu.apply(-3.0), 0.0);
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn broadcast_row_bias() {
        let a = Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::from_vec(vec![10., 20., 30.]);
        let c = binary_forward(BinaryKind::Add, &a, &b).unwrap();
        assert_eq!(c.data(), &[11., 22., 33., 14., 25., 36.]);
        let col = Tensor::new(&[2, 1], vec![2., 4.]).unwrap();
        let d = binary_forward(BinaryKind::Div, &a, &col).unwrap();
        assert_eq!(d.data(), &[0.5, 1., 1.5, 1., 1.25, 1.5]);
    }

    #[test]
    fn incompatible_broadcast_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4]);
        let err = binary_forward(BinaryKind::Mul, &a, &b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "mul",
                lhs: vec![2, 3],
                rhs: vec![4]
            }
        );
    }
}
