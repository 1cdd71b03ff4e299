//! Fourth-order central finite differences as an independent gradient oracle.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default step for 64-bit checks.
pub const DEFAULT_STEP: f64 = 1e-3;

/// Floor for the denominator of [`relative_error`].
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Rounding noise of one stencil estimate, in units of `ε·|f|/h`.
pub const STENCIL_NOISE: f64 = 16.0;

/// Relative resolution asked of [`check_gradients`]: gradients smaller than
/// the stencil noise divided by this are compared against that bound.
pub const RESOLUTION: f64 = 1e-4;

/// Derivative from `f_at(offset)` and the largest `|f|` seen:
/// `(−f(2h) + 8f(h) − 8f(−h) + f(−2h)) / 12h`.
fn stencil<E>(mut f_at: impl FnMut(f64) -> std::result::Result<f64, E>, h: f64) -> std::result::Result<(f64, f64), E> {
    let (p2, p1, m1, m2) = (f_at(2.0 * h)?, f_at(h)?, f_at(-h)?, f_at(-2.0 * h)?);
    let scale = p2.abs().max(p1.abs()).max(m1.abs()).max(m2.abs());
    Ok(((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h), scale))
}

/// Fourth-order central difference for every element.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let (d, _) = stencil(
            |off| {
                probe.data_mut()[i] = orig + off;
                Ok::<f64, ()>(f(&probe))
            },
            h,
        )
        .expect("infallible");
        probe.data_mut()[i] = orig;
        out.push(d);
    }
    Tensor::new(x.shape(), out).expect("same shape as x")
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Result of comparing autodiff against finite differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// (input index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Checks the gradient of a scalar function of several tensors.
///
/// `build` records the function on a fresh tape given one trainable leaf per
/// input. `probe` limits which elements are finite-differenced per input:
/// `None` checks them all, `Some(k)` checks an evenly strided subset of at
/// most `k` elements.
pub fn check_gradients<F>(inputs: &[Tensor], probe: Option<usize>, h: f64, build: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        Ok(build(&tape, &vars)?.item())
    };

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = build(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut xs = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v);
        let n = inputs[k].numel();
        let stride = match probe {
            Some(p) if p < n => n.div_ceil(p),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = xs[k].data()[i];
            let (numeric, scale) = stencil(
                |off| {
                    xs[k].data_mut()[i] = orig + off;
                    eval(&xs)
                },
                h,
            )?;
            xs[k].data_mut()[i] = orig;
            let a = analytic.data()[i];
            let floor = REL_ERR_FLOOR.max(STENCIL_NOISE * f64::EPSILON * scale / (h * RESOLUTION));
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if err > report.max_rel_err || err.is_nan() {
                report.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = (k, i);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_at_three() {
        let x = Tensor::from_vec(vec![3.0]);
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, DEFAULT_STEP);
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::from_vec(vec![1.0, -2.0, 0.5]);
        let g = finite_diff_grad(|_| 4.2, &x, DEFAULT_STEP);
        assert!(g.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-10, 0.0) - 1e-2).abs() < 1e-15);
    }
}
