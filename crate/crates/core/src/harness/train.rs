use std::path::PathBuf;

use numcore::Tape;

use crate::config::{Precision, TrainConfig};
use crate::data::{batch_iter, Dataset, VqaSample};
use crate::error::{Error, Result};
use crate::ffae::LossBreakdown;
use crate::harness::checkpoint;
use crate::harness::eval::{evaluate, MetricsReport};
use crate::model::{Batch, LossWeights, Model};
use crate::par::ExecMode;
use crate::params::{AdamW, Ctx};

#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Step-averaged losses.
    pub mean: LossBreakdown,
    pub val: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Loss breakdown of every optimizer step, in order.
    pub steps: Vec<LossBreakdown>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainReport {
    pub fn total_trace(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.total).collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where the best checkpoint is written.
    pub checkpoint: Option<PathBuf>,
    pub eval_mode: ExecMode,
    /// Skip per-epoch validation; the final epoch is kept.
    pub skip_validation: bool,
}

pub struct Trained {
    pub config: TrainConfig,
    /// Parameters from the best validation epoch.
    pub model: Model,
    pub report: TrainReport,
}

/// Sizes the model's vocabulary and class count to the dataset.
pub fn fit_config(cfg: &TrainConfig, data: &Dataset) -> TrainConfig {
    let mut c = cfg.clone();
    c.model.vocab_size = data.vocab.len();
    c.model.n_classes = data.answers.len();
    c
}

fn mean_breakdown(steps: &[LossBreakdown]) -> LossBreakdown {
    let n = steps.len().max(1) as f64;
    let avg = |f: fn(&LossBreakdown) -> f64| steps.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        l_cls: avg(|s| s.l_cls),
        l_vtc: avg(|s| s.l_vtc),
        l_v2t: avg(|s| s.l_v2t),
        l_t2v: avg(|s| s.l_t2v),
        l_aux: avg(|s| s.l_aux),
        total: avg(|s| s.total),
        alpha: steps.first().map_or(0.0, |s| s.alpha),
        beta: steps.first().map_or(0.0, |s| s.beta),
    }
}

/// One optimizer step; returns the loss breakdown.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    batch: &Batch,
    weights: LossWeights,
    precision: Precision,
    step: usize,
) -> Result<LossBreakdown> {
    let grads = {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &model.store);
        let fwd = model.forward(&cx, batch)?;
        let losses = model.losses(&cx, &fwd, batch, weights)?;
        if let Some(term) = losses.non_finite_term() {
            return Err(Error::NonFinite { step, term });
        }
        let g = tape.backward(losses.total)?;
        (cx.param_grads(&g), losses.breakdown())
    };
    opt.update(&mut model.store, &grads.0);
    if precision == Precision::F32 {
        model.store.round_to_f32();
    }
    Ok(grads.1)
}

/// Cosine decay from `base` at step 0 towards zero at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = step.min(total) as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

pub fn train(cfg: &TrainConfig, data: &Dataset, opts: &TrainOptions) -> Result<Trained> {
    let cfg = fit_config(cfg, data);
    cfg.validate()?;
    let mut model = Model::new(&cfg.model, cfg.seed)?;
    if cfg.precision == Precision::F32 {
        model.store.round_to_f32();
    }
    let mut opt = AdamW::new(
        &model.store,
        cfg.lr,
        cfg.adam_beta1,
        cfg.adam_beta2,
        cfg.adam_eps,
        cfg.weight_decay,
    );
    let weights = LossWeights {
        alpha: cfg.alpha,
        beta: cfg.beta,
        tau: cfg.tau,
    };
    let train: &[VqaSample] = &data.train.samples;
    if train.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    let validate = !opts.skip_validation && !data.val.samples.is_empty();
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let total_steps = cfg.epochs * train.len().div_ceil(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        let first = steps.len();
        for idx in batch_iter(train.len(), cfg.batch_size, cfg.seed, epoch, true) {
            let refs: Vec<&VqaSample> = idx.iter().map(|&i| &train[i]).collect();
            let batch = Batch::new(&refs, &data.vocab, &cfg.model)?;
            let step = steps.len();
            opt.lr = cosine_lr(cfg.lr, step, total_steps);
            steps.push(train_step(&mut model, &mut opt, &batch, weights, cfg.precision, step)?);
        }
        let val = if validate {
            evaluate(&model, &data.val.samples, &data.vocab, opts.eval_mode)?
        } else {
            MetricsReport::default()
        };
        let score = val.acc_overall();
        if best.as_ref().is_none_or(|(b, _, _)| score >= *b) {
            best = Some((score, epoch, model.clone()));
            if let Some(path) = &opts.checkpoint {
                checkpoint::save(path, &cfg, &data.answers, &model)?;
            }
        }
        epochs.push(EpochRecord {
            epoch,
            mean: mean_breakdown(&steps[first..]),
            val,
        });
    }
    let (best_epoch, model) = match best {
        Some((_, e, m)) => (e, m),
        None => {
            if let Some(path) = &opts.checkpoint {
                checkpoint::save(path, &cfg, &data.answers, &model)?;
            }
            (0, model)
        }
    };
    Ok(Trained {
        config: cfg,
        model,
        report: TrainReport {
            steps,
            epochs,
            best_epoch,
        },
    })
}
