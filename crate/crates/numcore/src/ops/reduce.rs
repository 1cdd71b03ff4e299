use crate::error::{Result, TensorError};
use crate::tensor::{split_at_axis, Tensor};

pub(crate) fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::AxisOutOfRange {
            op,
            axis,
            rank: shape.len(),
        });
    }
    Ok(())
}

pub(crate) fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

pub fn sum_all(x: &Tensor) -> Tensor {
    Tensor::scalar(x.data().iter().sum())
}

pub fn sum_axis(x: &Tensor, axis: usize, keepdim: bool) -> Result<Tensor> {
    check_axis("sum_axis", x.shape(), axis)?;
    let (outer, len, inner) = split_at_axis(x.shape(), axis);
    let d = x.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for a in 0..len {
            let src = &d[(o * len + a) * inner..(o * len + a + 1) * inner];
            for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *dst += v;
            }
        }
    }
    Tensor::new(&reduced_shape(x.shape(), axis, keepdim), out)
}

/// Broadcasts a reduced gradient back along `axis`.
pub fn sum_axis_backward(in_shape: &[usize], axis: usize, scale: f64, g: &[f64], gx: &mut [f64]) {
    let (outer, len, inner) = split_at_axis(in_shape, axis);
    for o in 0..outer {
        let src = &g[o * inner..(o + 1) * inner];
        for a in 0..len {
            let dst = &mut gx[(o * len + a) * inner..(o * len + a + 1) * inner];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d += v * scale;
            }
        }
    }
}

/// Max along `axis`; ties resolve to the lowest index. Returns the argmax
/// positions alongside the values.
pub fn max_axis(x: &Tensor, axis: usize, keepdim: bool) -> Result<(Tensor, Vec<usize>)> {
    check_axis("max_axis", x.shape(), axis)?;
    let (outer, len, inner) = split_at_axis(x.shape(), axis);
    let d = x.data();
    let mut out = vec![f64::NEG_INFINITY; outer * inner];
    let mut arg = vec![0usize; outer * inner];
    for o in 0..outer {
        for a in 0..len {
            for i in 0..inner {
                let v = d[(o * len + a) * inner + i];
                let k = o * inner + i;
                if v > out[k] {
                    out[k] = v;
                    arg[k] = a;
                }
            }
        }
    }
    Ok((Tensor::new(&reduced_shape(x.shape(), axis, keepdim), out)?, arg))
}

pub fn max_axis_backward(in_shape: &[usize], axis: usize, arg: &[usize], g: &[f64], gx: &mut [f64]) {
    let (outer, len, inner) = split_at_axis(in_shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let k = o * inner + i;
            gx[(o * len + arg[k]) * inner + i] += g[k];
        }
    }
}
