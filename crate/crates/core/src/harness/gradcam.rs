//! Gradient-weighted class activation maps over image patch tokens.

use std::path::Path;

use numcore::{Tape, Var};

use crate::data::{write_ppm, VqaSample};
use crate::encoders::{ImageGrid, Vocab};
use crate::error::{Error, Result};
use crate::ffae::predict_answer;
use crate::model::{Batch, Model};
use crate::params::Ctx;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Predicted,
    Class(usize),
}

/// Per-patch attribution, max-normalized to 1 unless all zero.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub values: Vec<f64>,
    pub sample_id: usize,
    pub target_class: usize,
    /// No gradient reached the activations.
    pub zero_gradient: bool,
}

impl SaliencyMap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid_w + col]
    }

    /// Index of the first maximal cell.
    pub fn argmax(&self) -> usize {
        predict_answer(&self.values)
    }

    pub fn to_kv(&self) -> String {
        let cells: Vec<String> = self.values.iter().map(|v| format!("{v:.4}")).collect();
        format!(
            "sample={}\ntarget_class={}\ngrid={}x{}\nzero_gradient={}\nvalues={}\n",
            self.sample_id,
            self.target_class,
            self.grid_h,
            self.grid_w,
            self.zero_gradient,
            cells.join(",")
        )
    }
}

/// Raw cell values from activations and their gradient, both `[n, c]`:
/// `ReLU(Σ_c mean_p(grad[p, c]) · act[n, c])`, max-normalized.
pub fn cam_from(act: &[f64], grad: &[f64], n: usize, c: usize) -> Vec<f64> {
    let mut w = vec![0.0; c];
    for p in 0..n {
        for (wc, g) in w.iter_mut().zip(&grad[p * c..(p + 1) * c]) {
            *wc += g / n as f64;
        }
    }
    let mut cam: Vec<f64> = (0..n)
        .map(|p| {
            let s: f64 = act[p * c..(p + 1) * c].iter().zip(&w).map(|(a, w)| a * w).sum();
            s.max(0.0)
        })
        .collect();
    let max = cam.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        for v in &mut cam {
            *v /= max;
        }
    }
    cam
}

/// Grad-CAM for any recorded computation. `build` returns the activations
/// (`[n, c]` with optional leading unit axes) and a scalar target.
pub fn gradcam_with<F>(grid: (usize, usize), build: F) -> Result<(Vec<f64>, bool)>
where
    F: for<'t> FnOnce(&'t Tape) -> Result<(Var<'t>, Var<'t>)>,
{
    let tape = Tape::new();
    let (act, target) = build(&tape)?;
    let shape = act.shape();
    let c = *shape.last().unwrap_or(&0);
    let n = act.value().numel() / c.max(1);
    if n != grid.0 * grid.1 {
        return Err(Error::Contract(format!(
            "activations {shape:?} do not cover a {}x{} grid",
            grid.0, grid.1
        )));
    }
    let grads = tape.backward(target)?;
    let grad = match grads.get(act) {
        Some(g) if g.data().iter().any(|&x| x != 0.0) => g.clone(),
        _ => return Ok((vec![0.0; n], true)),
    };
    Ok((cam_from(act.value().data(), grad.data(), n, c), false))
}

/// Grad-CAM on the image encoder's output patch tokens.
pub fn gradcam(model: &Model, sample: &VqaSample, vocab: &Vocab, target: Target) -> Result<SaliencyMap> {
    let batch = Batch::new(&[sample], vocab, &model.cfg)?;
    let (gh, gw) = sample.image.patch_grid(model.cfg.patch)?;
    let mut class = 0;
    let (values, zero_gradient) = gradcam_with((gh, gw), |tape| {
        let cx = Ctx::new(tape, &model.store);
        let fwd = model.forward(&cx, &batch)?;
        let logits = fwd.logits.value();
        class = match target {
            Target::Predicted => predict_answer(logits.data()),
            Target::Class(c) if c < logits.numel() => c,
            Target::Class(c) => return Err(Error::Contract(format!("target class {c} out of range"))),
        };
        Ok((fwd.image_tokens, fwd.logits.narrow(1, class, 1)?.sum()))
    })?;
    Ok(SaliencyMap {
        grid_h: gh,
        grid_w: gw,
        values,
        sample_id: sample.id,
        target_class: class,
        zero_gradient,
    })
}

/// Blends the map over the image as a red heat layer.
pub fn overlay(img: &ImageGrid, map: &SaliencyMap) -> ImageGrid {
    let (ph, pw) = (img.height() / map.grid_h, img.width() / map.grid_w);
    let mut out = ImageGrid::filled(img.height(), img.width(), 3, 0.0);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let v = map.at(y / ph, x / pw);
            for ch in 0..3 {
                let base = img.get(y, x, ch.min(img.channels() - 1));
                let heat = if ch == 0 { v } else { 0.0 };
                out.set(y, x, ch, 0.5 * base + 0.5 * heat);
            }
        }
    }
    out
}

pub fn write_overlay(path: &Path, img: &ImageGrid, map: &SaliencyMap) -> Result<()> {
    write_ppm(path, &overlay(img, map))
}
