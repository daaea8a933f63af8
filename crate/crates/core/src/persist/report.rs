use std::path::Path;

use serde::{Deserialize, Serialize};

use super::write_atomic;
use crate::error::{Error, Result};
use crate::lion::ParamCountRow;
use crate::robust_opt::TrainingLog;

pub const CSV_HEADER: &str = "run_id,protocol,dataset,seed,accuracy,trainable_params,epochs,wall_time_s";

/// One row of the machine-readable run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub protocol: String,
    pub dataset: String,
    pub seed: u64,
    pub accuracy: f64,
    pub trainable_params: usize,
    pub epochs: usize,
    pub wall_time_s: f64,
}

pub fn records_to_csv(records: &[RunRecord]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_HEADER.split(','))?;
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn records_from_csv(text: &str) -> Result<Vec<RunRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Format(format!(
            "unexpected report header `{}`",
            header.join(",")
        )));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    write_atomic(path, records_to_csv(records)?.as_bytes())
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    records_from_csv(&std::fs::read_to_string(path)?)
}

/// Comparison table, best accuracy first.
pub fn render_table(records: &[RunRecord]) -> String {
    let mut rows: Vec<&RunRecord> = records.iter().collect();
    rows.sort_by(|a, b| b.accuracy.total_cmp(&a.accuracy).then_with(|| a.run_id.cmp(&b.run_id)));
    let mut s = format!(
        "{:<44} {:<14} {:<32} {:>6} {:>9} {:>9} {:>7} {:>9}\n",
        "run", "protocol", "dataset", "seed", "accuracy", "params", "epochs", "time_s"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<44} {:<14} {:<32} {:>6} {:>9.4} {:>9} {:>7} {:>9.2}\n",
            r.run_id, r.protocol, r.dataset, r.seed, r.accuracy, r.trainable_params, r.epochs, r.wall_time_s
        ));
    }
    s
}

pub fn render_complexity(rows: &[ParamCountRow]) -> String {
    let mut s = format!("{:<10} {:<12} {:>12}\n", "method", "formula", "params");
    for r in rows {
        s.push_str(&format!("{:<10} {:<12} {:>12}\n", r.method, r.formula, r.count));
    }
    s
}

pub const TRACE_HEADER: &str = "epoch,loss,accuracy,crucial_fraction,noncrucial_mean_abs,alpha1,alpha2";

/// Per-epoch training trace; gate columns are empty for models without gates.
pub fn trace_to_csv(log: &TrainingLog) -> Result<String> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(TRACE_HEADER.split(','))?;
    for e in &log.epochs {
        let diag = |k: &str| {
            e.diagnostics
                .iter()
                .find(|(n, _)| *n == k)
                .map_or_else(String::new, |(_, v)| format!("{v:?}"))
        };
        w.write_record([
            e.epoch.to_string(),
            format!("{:?}", e.loss),
            format!("{:?}", e.accuracy),
            format!("{:?}", e.crucial_fraction),
            e.noncrucial_mean_abs.map_or_else(String::new, |v| format!("{v:?}")),
            diag("alpha1"),
            diag("alpha2"),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(id: &str, acc: f64) -> RunRecord {
        RunRecord {
            run_id: id.into(),
            protocol: "lion".into(),
            dataset: "blobs+invertible_linear".into(),
            seed: 3,
            accuracy: acc,
            trainable_params: 776,
            epochs: 100,
            wall_time_s: 1.25,
        }
    }

    #[test]
    fn header_and_sorting() {
        let csv = records_to_csv(&[record("a", 0.5)]).unwrap();
        assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
        let table = render_table(&[record("a", 0.5), record("b", 0.9), record("c", 0.7)]);
        let order: Vec<&str> = table
            .lines()
            .skip(1)
            .map(|l| l.split_whitespace().next().unwrap())
            .collect();
        assert_eq!(order, ["b", "c", "a"]);
        assert!(records_from_csv("x,y\n1,2\n").is_err());
    }

    proptest! {
        #[test]
        fn csv_round_trip(
            rows in proptest::collection::vec(
                ("[a-z0-9_-]{1,10}", any::<u64>(), 0.0f64..=1.0, 0usize..1_000_000, 0usize..1000, 0.0f64..1e4),
                0..6,
            )
        ) {
            let records: Vec<RunRecord> = rows
                .into_iter()
                .map(|(id, seed, accuracy, params, epochs, t)| RunRecord {
                    run_id: id,
                    protocol: "head_tuning".into(),
                    dataset: "glyphs, shifted".into(),
                    seed,
                    accuracy,
                    trainable_params: params,
                    epochs,
                    wall_time_s: t,
                })
                .collect();
            let text = records_to_csv(&records).unwrap();
            prop_assert_eq!(records_from_csv(&text).unwrap(), records);
        }
    }
}
