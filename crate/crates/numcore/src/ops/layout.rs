use crate::error::{Result, TensorError};
use crate::ops::reduce::check_axis;
use crate::tensor::{broadcast_shape, broadcast_strides, split_at_axis, Tensor};

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::contract("concat", "no inputs"))?;
    check_axis("concat", first.shape(), axis)?;
    let mut shape = first.shape().to_vec();
    shape[axis] = 0;
    for p in parts {
        let ok = p.rank() == first.rank()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(TensorError::mismatch("concat", first.shape(), p.shape()));
        }
        shape[axis] += p.shape()[axis];
    }
    let (outer, _, inner) = split_at_axis(&shape, axis);
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let w = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
        }
    }
    Tensor::new(&shape, out)
}

/// Routes the gradient of a concat back to part `which`.
pub fn concat_backward(
    part_extents: &[usize],
    out_shape: &[usize],
    axis: usize,
    which: usize,
    g: &[f64],
    gx: &mut [f64],
) {
    let (outer, total, inner) = split_at_axis(out_shape, axis);
    let start: usize = part_extents[..which].iter().sum();
    let w = part_extents[which] * inner;
    for o in 0..outer {
        let src = &g[(o * total + start) * inner..(o * total + start) * inner + w];
        for (d, &v) in gx[o * w..(o + 1) * w].iter_mut().zip(src) {
            *d += v;
        }
    }
}

pub fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    check_axis("narrow", x.shape(), axis)?;
    if len == 0 || start + len > x.shape()[axis] {
        return Err(TensorError::contract(
            "narrow",
            format!("range {start}..{} outside axis {axis} of {:?}", start + len, x.shape()),
        ));
    }
    let (outer, extent, inner) = split_at_axis(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(&shape, out)
}

pub fn narrow_backward(in_shape: &[usize], axis: usize, start: usize, len: usize, g: &[f64], gx: &mut [f64]) {
    let (outer, extent, inner) = split_at_axis(in_shape, axis);
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        let src = &g[o * len * inner..(o + 1) * len * inner];
        for (d, &v) in gx[base..base + len * inner].iter_mut().zip(src) {
            *d += v;
        }
    }
}

/// Gathers slices along `axis`; indices may repeat.
pub fn index_select(x: &Tensor, axis: usize, indices: &[usize]) -> Result<Tensor> {
    check_axis("index_select", x.shape(), axis)?;
    let (outer, extent, inner) = split_at_axis(x.shape(), axis);
    if indices.is_empty() {
        return Err(TensorError::contract("index_select", "empty index list"));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= extent) {
        return Err(TensorError::contract(
            "index_select",
            format!("index {bad} out of range for extent {extent}"),
        ));
    }
    let mut out = Vec::with_capacity(outer * indices.len() * inner);
    for o in 0..outer {
        for &i in indices {
            let base = (o * extent + i) * inner;
            out.extend_from_slice(&x.data()[base..base + inner]);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = indices.len();
    Tensor::new(&shape, out)
}

pub fn index_select_backward(in_shape: &[usize], axis: usize, indices: &[usize], g: &[f64], gx: &mut [f64]) {
    let (outer, extent, inner) = split_at_axis(in_shape, axis);
    let n = indices.len();
    for o in 0..outer {
        for (k, &i) in indices.iter().enumerate() {
            let src = &g[(o * n + k) * inner..(o * n + k + 1) * inner];
            let base = (o * extent + i) * inner;
            for (d, &v) in gx[base..base + inner].iter_mut().zip(src) {
                *d += v;
            }
        }
    }
}

pub fn broadcast_to(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    match broadcast_shape(x.shape(), shape) {
        Some(s) if s == shape => {}
        _ => return Err(TensorError::mismatch("broadcast_to", x.shape(), shape)),
    }
    let strides = broadcast_strides(x.shape(), shape);
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(x.data()[off]);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(shape, out)
}

pub fn broadcast_to_backward(in_shape: &[usize], out_shape: &[usize], g: &[f64], gx: &mut [f64]) {
    let strides = broadcast_strides(in_shape, out_shape);
    let mut idx = vec![0usize; out_shape.len()];
    for &gv in g {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        gx[off] += gv;
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}
