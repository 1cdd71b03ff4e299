use std::fmt::Write as _;

use numcore::Tape;

use crate::data::{AnswerVocab, VqaSample};
use crate::encoders::Vocab;
use crate::error::{Error, Result};
use crate::ffae::predict_answer;
use crate::model::{Batch, Model};
use crate::par::{self, ExecMode};
use crate::params::Ctx;

/// Samples per evaluation chunk.
pub const EVAL_CHUNK: usize = 16;

/// Accuracy split by question type. Accuracies are derived from counts.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct MetricsReport {
    pub n_open: usize,
    pub n_closed: usize,
    pub correct_open: usize,
    pub correct_closed: usize,
    /// Predicted class per sample, in input order.
    pub predictions: Vec<usize>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl MetricsReport {
    pub fn total(&self) -> usize {
        self.n_open + self.n_closed
    }

    /// `None` when there are no open samples.
    pub fn acc_open(&self) -> Option<f64> {
        ratio(self.correct_open, self.n_open)
    }

    pub fn acc_closed(&self) -> Option<f64> {
        ratio(self.correct_closed, self.n_closed)
    }

    pub fn acc_overall(&self) -> f64 {
        ratio(self.correct_open + self.correct_closed, self.total()).unwrap_or(0.0)
    }

    /// Scores predictions against samples.
    pub fn from_predictions(samples: &[VqaSample], predictions: Vec<usize>) -> Self {
        let mut r = MetricsReport {
            predictions,
            ..Default::default()
        };
        for (s, &p) in samples.iter().zip(&r.predictions) {
            let hit = p == s.answer_class;
            if s.is_open {
                r.n_open += 1;
                r.correct_open += usize::from(hit);
            } else {
                r.n_closed += 1;
                r.correct_closed += usize::from(hit);
            }
        }
        r
    }

    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        let f = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.6}"));
        format!(
            "acc_open={}\nacc_closed={}\nacc_overall={:.6}\nn_open={}\nn_closed={}\ncorrect_open={}\ncorrect_closed={}\n",
            f(self.acc_open()),
            f(self.acc_closed()),
            self.acc_overall(),
            self.n_open,
            self.n_closed,
            self.correct_open,
            self.correct_closed
        )
    }
}

fn cell(x: Option<f64>) -> String {
    x.map_or("n/a".to_string(), |v| format!("{:.2}", 100.0 * v))
}

/// Aligned `Open Closed Overall` table in percent; one row per label.
pub fn format_table(rows: &[(String, &MetricsReport)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
    let mut s = format!(
        "{:<width$}  {:>7}  {:>7}  {:>7}\n",
        "model", "Open", "Closed", "Overall"
    );
    for (label, m) in rows {
        let _ = writeln!(
            s,
            "{label:<width$}  {:>7}  {:>7}  {:>7}",
            cell(m.acc_open()),
            cell(m.acc_closed()),
            cell(Some(m.acc_overall()))
        );
    }
    s
}

/// One parsed table row: label and Open/Closed/Overall percentages.
pub type TableRow = (String, Option<f64>, Option<f64>, Option<f64>);

/// Parses the rows of a [`format_table`] block (header line required).
pub fn parse_table(text: &str) -> Result<Vec<TableRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Contract("empty table".into()))?;
    let cols: Vec<&str> = header.split_whitespace().collect();
    if cols.len() < 4 || cols[cols.len() - 3..] != ["Open", "Closed", "Overall"] {
        return Err(Error::Contract(format!("unexpected table header {header:?}")));
    }
    let num = |s: &str| -> Result<Option<f64>> {
        if s == "n/a" {
            Ok(None)
        } else {
            s.parse()
                .map(Some)
                .map_err(|_| Error::Contract(format!("bad table cell {s:?}")))
        }
    };
    lines
        .map(|l| {
            let parts: Vec<&str> = l.split_whitespace().collect();
            if parts.len() < 4 {
                return Err(Error::Contract(format!("short table row {l:?}")));
            }
            let n = parts.len();
            Ok((
                parts[..n - 3].join(" "),
                num(parts[n - 3])?,
                num(parts[n - 2])?,
                num(parts[n - 1])?,
            ))
        })
        .collect()
}

/// Classifier predictions for `samples`, computed in chunks.
pub fn predict(model: &Model, samples: &[VqaSample], vocab: &Vocab, mode: ExecMode) -> Result<Vec<usize>> {
    let chunks: Vec<&[VqaSample]> = samples.chunks(EVAL_CHUNK).collect();
    let per_chunk = par::try_map(&chunks, mode, |chunk| -> Result<Vec<usize>> {
        let refs: Vec<&VqaSample> = chunk.iter().collect();
        let batch = Batch::new(&refs, vocab, &model.cfg)?;
        let tape = Tape::new();
        let cx = Ctx::frozen(&tape, &model.store);
        let logits = model.forward(&cx, &batch)?.logits.value();
        let c = logits.shape()[1];
        Ok(logits.data().chunks(c).map(predict_answer).collect())
    })?;
    Ok(per_chunk.into_iter().flatten().collect())
}

pub fn evaluate(model: &Model, samples: &[VqaSample], vocab: &Vocab, mode: ExecMode) -> Result<MetricsReport> {
    let preds = predict(model, samples, vocab, mode)?;
    Ok(MetricsReport::from_predictions(samples, preds))
}

/// Re-labels samples against a checkpoint's answer classes.
pub fn relabel(samples: &[VqaSample], answers: &AnswerVocab) -> Vec<VqaSample> {
    samples
        .iter()
        .map(|s| VqaSample {
            answer_class: answers.class(&s.answer),
            ..s.clone()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_round_trip() {
        let m = MetricsReport {
            n_open: 4,
            n_closed: 4,
            correct_open: 3,
            correct_closed: 4,
            predictions: vec![],
        };
        let empty = MetricsReport {
            n_closed: 2,
            correct_closed: 1,
            ..Default::default()
        };
        let t = format_table(&[("all toggles".into(), &m), ("closed".into(), &empty)]);
        let rows = parse_table(&t).unwrap();
        assert_eq!(rows[0], ("all toggles".into(), Some(75.0), Some(100.0), Some(87.5)));
        assert_eq!(rows[1], ("closed".into(), None, Some(50.0), Some(50.0)));
    }
}
