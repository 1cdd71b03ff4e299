//! Ablation rows and loss-weight sweeps.

use std::fmt::Write as _;

use crate::config::{Toggles, TrainConfig};
use crate::data::Dataset;
use crate::error::Result;
use crate::harness::eval::{evaluate, format_table, MetricsReport};
use crate::harness::train::{train, TrainOptions};
use crate::par::{self, ExecMode};

/// The six component settings: none, each single component, all.
pub fn ablation_settings() -> [Toggles; 6] {
    let one = |f: fn(&mut Toggles)| {
        let mut t = Toggles::NONE;
        f(&mut t);
        t
    };
    [
        Toggles::NONE,
        one(|t| t.qqformer = true),
        one(|t| t.cmcl = true),
        one(|t| t.cmm = true),
        one(|t| t.ahead = true),
        Toggles::ALL,
    ]
}

#[derive(Clone, Debug)]
pub struct ExperimentRow {
    pub label: String,
    pub config: TrainConfig,
    pub config_hash: String,
    pub params: usize,
    pub metrics: MetricsReport,
}

fn run(cfg: &TrainConfig, data: &Dataset, label: String) -> Result<ExperimentRow> {
    let opts = TrainOptions {
        eval_mode: ExecMode::Sequential,
        ..Default::default()
    };
    let out = train(cfg, data, &opts)?;
    let metrics = evaluate(&out.model, &data.test.samples, &data.vocab, ExecMode::Sequential)?;
    Ok(ExperimentRow {
        label,
        config_hash: out.config.hash(),
        params: out.model.num_params(),
        config: out.config,
        metrics,
    })
}

/// Trains and tests one model per ablation setting.
pub fn ablate(cfg: &TrainConfig, data: &Dataset, mode: ExecMode) -> Result<Vec<ExperimentRow>> {
    let jobs: Vec<(String, TrainConfig)> = ablation_settings()
        .iter()
        .map(|t| {
            let mut c = cfg.clone();
            c.model.toggles = *t;
            (t.label(), c)
        })
        .collect();
    par::try_map(&jobs, mode, |(label, c)| run(c, data, label.clone()))
}

/// Weight sweep: `alpha` rows hold `beta` fixed and vice versa.
#[derive(Clone, Debug)]
pub struct SweepTable {
    pub alpha: Vec<ExperimentRow>,
    pub beta: Vec<ExperimentRow>,
}

pub const SWEEP_VALUES: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

pub fn sweep(cfg: &TrainConfig, data: &Dataset, values: &[f64], mode: ExecMode) -> Result<SweepTable> {
    let mut jobs = Vec::new();
    for &v in values {
        let mut c = cfg.clone();
        c.alpha = v;
        jobs.push((format!("alpha={v}"), c));
    }
    for &v in values {
        let mut c = cfg.clone();
        c.beta = v;
        jobs.push((format!("beta={v}"), c));
    }
    let mut rows = par::try_map(&jobs, mode, |(label, c)| run(c, data, label.clone()))?;
    let beta = rows.split_off(values.len());
    Ok(SweepTable { alpha: rows, beta })
}

/// Metrics table followed by `key=value` provenance lines.
pub fn format_rows(rows: &[ExperimentRow]) -> String {
    let table: Vec<(String, &MetricsReport)> = rows.iter().map(|r| (r.label.clone(), &r.metrics)).collect();
    let mut s = format_table(&table);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "row={} params={} config_hash={}", r.label, r.params, r.config_hash);
    }
    s
}

pub fn format_sweep(t: &SweepTable) -> String {
    let block = |rows: &[ExperimentRow]| {
        let table: Vec<(String, &MetricsReport)> = rows.iter().map(|r| (r.label.clone(), &r.metrics)).collect();
        format_table(&table)
    };
    format!("{}\n{}", block(&t.alpha), block(&t.beta))
}
