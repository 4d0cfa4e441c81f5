//! CSV and JSON writers. CSVs are header-first with a fixed column order,
//! UTF-8 and LF line endings.

use std::io::Write;

use crate::error::{Error, Result};
use crate::harness::experiments::{ExperimentResult, Rows};
use crate::harness::train::TrainLog;

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

/// Columns: `step, train_loss, eval_nll, acc_d<k>…, mean_acc, trainable,
/// active` and, with `timing`, `wall_ms`.
pub fn write_metrics_csv(log: &TrainLog, timing: bool, out: impl Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header = vec!["step".to_string(), "train_loss".into(), "eval_nll".into()];
    header.extend(log.domains.iter().map(|d| format!("acc_d{d}")));
    header.extend(["mean_acc".to_string(), "trainable".into(), "active".into()]);
    if timing {
        header.push("wall_ms".into());
    }
    w.write_record(&header).map_err(csv_err)?;
    for r in &log.records {
        let mut row = vec![r.step.to_string(), fmt_opt(r.train_loss), fmt_opt(r.eval.as_ref().map(|e| e.nll))];
        for &d in &log.domains {
            row.push(fmt_opt(r.eval.as_ref().and_then(|e| e.domain(d))));
        }
        row.push(fmt_opt(r.eval.as_ref().map(|e| e.mean_accuracy)));
        row.push(r.trainable.to_string());
        row.push(join(&r.active));
        if timing {
            row.push(format!("{:.3}", r.wall_ms));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Columns: `step, layer, s, p, active`.
pub fn write_scores_csv(log: &TrainLog, out: impl Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["step", "layer", "s", "p", "active"]).map_err(csv_err)?;
    for r in &log.scores {
        w.write_record([
            r.step.to_string(),
            r.layer.to_string(),
            r.score.to_string(),
            r.prob.to_string(),
            (r.active as u8).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// One line per experiment row, columns as the row type's fields.
pub fn write_rows_csv(rows: &Rows, out: impl Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    match rows {
        Rows::Drop(r) => r.iter().try_for_each(|x| w.serialize(x)),
        Rows::Head(r) => r.iter().try_for_each(|x| w.serialize(x)),
        Rows::Interference(r) => r.iter().try_for_each(|x| w.serialize(x)),
    }
    .map_err(csv_err)?;
    w.flush()?;
    Ok(())
}

pub fn result_json(result: &ExperimentResult) -> Result<String> {
    let mut s = serde_json::to_string_pretty(result)?;
    s.push('\n');
    Ok(s)
}

/// The committed JSON schema of experiment result documents.
pub const RESULT_SCHEMA: &str = include_str!("../../schemas/experiment_result.schema.json");
