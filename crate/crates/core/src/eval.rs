//! Holdout metrics and the CSV metrics log.

use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::dataio::RecordSource;
use crate::error::{Error, Result};
use crate::model::{exp_loss, StrongModel};
use crate::worker::WorkerEvent;

/// Average precision: scores sorted descending with ties kept in input
/// order, precision taken at the rank of each positive.
pub fn auprc(scores: &[f64], labels: &[i8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::domain(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&y| y > 0).count();
    if positives == 0 {
        return Err(Error::domain("AUPRC needs at least one positive label"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] > 0 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub exp_loss: f64,
    pub auprc: f64,
    /// Fraction of examples with `sign(H(x)) != y`; a zero margin counts as wrong.
    pub error_rate: f64,
}

pub fn evaluate<S: RecordSource + ?Sized>(model: &StrongModel, data: &S) -> Result<Metrics> {
    let mut scores = Vec::with_capacity(data.len() as usize);
    let mut labels = Vec::with_capacity(data.len() as usize);
    let mut xs = Vec::with_capacity(data.len() as usize);
    for rec in data.records()? {
        let rec = rec?;
        scores.push(model.predict(&rec.x)?);
        labels.push(rec.y);
        xs.push(rec.x);
    }
    let loss = exp_loss(model, xs.iter().zip(labels.iter().map(|&y| f64::from(y))))?;
    let wrong = scores
        .iter()
        .zip(&labels)
        .filter(|(s, y)| **s * f64::from(**y) <= 0.0)
        .count();
    Ok(Metrics {
        exp_loss: loss,
        auprc: auprc(&scores, &labels)?,
        error_rate: wrong as f64 / labels.len() as f64,
    })
}

pub const CSV_HEADER: &str = "wall_ms,scanned,worker_id,event,rules,bound,train_loss,test_loss,test_auprc";

struct Row {
    wall_ms: u128,
    event: WorkerEvent,
    test: Option<Metrics>,
}

/// Appends one row per worker event. Holdout metrics are computed on every
/// `eval_every`-th row and on the final row; other rows leave them empty.
///
/// Rows are written one behind so the final row can still be evaluated
/// when [`MetricsLog::finish`] is called.
pub struct MetricsLog<'a, W: Write> {
    out: csv::Writer<W>,
    test: Option<&'a dyn RecordSource>,
    eval_every: usize,
    started: Instant,
    rows: usize,
    pending: Option<Row>,
}

impl<'a> MetricsLog<'a, File> {
    pub fn create(
        path: impl AsRef<Path>,
        test: Option<&'a dyn RecordSource>,
        eval_every: usize,
    ) -> Result<Self> {
        MetricsLog::new(File::create(path)?, test, eval_every)
    }
}

impl<'a, W: Write> MetricsLog<'a, W> {
    pub fn new(out: W, test: Option<&'a dyn RecordSource>, eval_every: usize) -> Result<Self> {
        if eval_every == 0 {
            return Err(Error::domain("eval_every must be at least 1"));
        }
        let mut out = csv::Writer::from_writer(out);
        out.write_record(CSV_HEADER.split(','))?;
        Ok(MetricsLog {
            out,
            test,
            eval_every,
            started: Instant::now(),
            rows: 0,
            pending: None,
        })
    }

    pub fn record(&mut self, event: &WorkerEvent) -> Result<()> {
        self.flush_pending()?;
        let test = match self.test {
            Some(t) if self.rows.is_multiple_of(self.eval_every) => Some(evaluate(&event.model, t)?),
            _ => None,
        };
        self.pending = Some(Row {
            wall_ms: self.started.elapsed().as_millis(),
            event: event.clone(),
            test,
        });
        self.rows += 1;
        Ok(())
    }

    fn flush_pending(&mut self) -> Result<()> {
        let Some(row) = self.pending.take() else {
            return Ok(());
        };
        let e = &row.event;
        let (tl, ta) = match row.test {
            Some(m) => (m.exp_loss.to_string(), m.auprc.to_string()),
            None => (String::new(), String::new()),
        };
        self.out.write_record([
            row.wall_ms.to_string(),
            e.scanned.to_string(),
            e.worker_id.to_string(),
            e.kind.as_str().to_string(),
            e.rules.to_string(),
            e.bound.to_string(),
            e.train_loss.to_string(),
            tl,
            ta,
        ])?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        if let (Some(row), Some(t)) = (self.pending.as_mut(), self.test) {
            if row.test.is_none() {
                row.test = Some(evaluate(&row.event.model, t)?);
            }
        }
        self.flush_pending()?;
        self.out
            .into_inner()
            .map_err(|e| Error::Io(e.into_error()))
    }
}
