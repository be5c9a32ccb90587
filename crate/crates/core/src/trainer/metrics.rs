use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 5] = [
    "iteration",
    "natural_acc",
    "robust_acc",
    "cumulative_crafted",
    "wall_seconds",
];

/// One evaluation checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub natural_acc: f64,
    pub robust_acc: f64,
    /// Adversarial examples crafted for training so far.
    pub cumulative_crafted: u64,
    pub wall_seconds: f64,
}

pub fn write_metrics_csv<W: Write>(records: &[MetricsRecord], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("metrics csv", e))?;
    Ok(())
}

pub fn save_metrics_csv(records: &[MetricsRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_metrics_csv(records, std::io::BufWriter::new(f))
}

pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != METRICS_HEADER {
        return Err(Error::validation(format!("unexpected metrics header {header:?}")));
    }
    let records = r.deserialize().collect::<std::result::Result<Vec<MetricsRecord>, _>>()?;
    Ok(records)
}

pub fn load_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_metrics_csv(f)
}

/// Accuracies in `[0, 1]`, crafting budget and iteration nondecreasing.
pub fn check_metrics(records: &[MetricsRecord]) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        for (name, v) in [("natural_acc", r.natural_acc), ("robust_acc", r.robust_acc)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!("row {i}: {name} = {v} outside [0, 1]")));
            }
        }
        if i > 0 {
            let prev = &records[i - 1];
            if r.cumulative_crafted < prev.cumulative_crafted || r.iteration < prev.iteration {
                return Err(Error::validation(format!(
                    "row {i}: iteration/cumulative_crafted decreased"
                )));
            }
        }
    }
    Ok(())
}

/// Crafting budget at the first record meeting both accuracy thresholds.
pub fn budget_to_reach(records: &[MetricsRecord], natural: f64, robust: f64) -> Option<u64> {
    records
        .iter()
        .find(|r| r.natural_acc >= natural && r.robust_acc >= robust)
        .map(|r| r.cumulative_crafted)
}
