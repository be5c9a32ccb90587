//! The sweep's `summary.csv`: crafting budget needed per sampling number and
//! robust-accuracy threshold.

use std::io::{Read, Write};

use cat_core::trainer::budget_to_reach;
use cat_core::MetricsRecord;

use crate::CliError;

pub const SUMMARY_HEADER: [&str; 3] = ["sampling_number", "threshold", "crafted_budget"];
/// Written when a threshold is never reached.
pub const NOT_REACHED: &str = "NA";

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub sampling_number: usize,
    pub threshold: f64,
    pub crafted_budget: Option<u64>,
}

/// One row per threshold, in the order given.
pub fn summarize(sampling_number: usize, records: &[MetricsRecord], thresholds: &[f64], natural: f64) -> Vec<SummaryRow> {
    thresholds
        .iter()
        .map(|&t| SummaryRow {
            sampling_number,
            threshold: t,
            crafted_budget: budget_to_reach(records, natural, t),
        })
        .collect()
}

pub fn write_summary<W: Write>(rows: &[SummaryRow], out: W) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    let fail = |e: csv::Error| CliError::Runtime(format!("writing summary: {e}"));
    w.write_record(SUMMARY_HEADER).map_err(fail)?;
    for r in rows {
        let budget = r.crafted_budget.map_or_else(|| NOT_REACHED.to_owned(), |b| b.to_string());
        w.write_record([r.sampling_number.to_string(), r.threshold.to_string(), budget])
            .map_err(fail)?;
    }
    w.flush().map_err(|e| CliError::Runtime(format!("writing summary: {e}")))
}

pub fn read_summary<R: Read>(input: R) -> Result<Vec<SummaryRow>, CliError> {
    let mut r = csv::Reader::from_reader(input);
    let bad = |m: String| CliError::Runtime(format!("summary: {m}"));
    let header = r.headers().map_err(|e| bad(e.to_string()))?;
    if header.iter().ne(SUMMARY_HEADER) {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let crafted_budget = match field(2) {
            NOT_REACHED => None,
            b => Some(b.parse().map_err(|_| bad(format!("bad budget {b:?}")))?),
        };
        rows.push(SummaryRow {
            sampling_number: field(0).parse().map_err(|_| bad(format!("bad sampling number {:?}", field(0))))?,
            threshold: field(1).parse().map_err(|_| bad(format!("bad threshold {:?}", field(1))))?,
            crafted_budget,
        });
    }
    Ok(rows)
}

/// Checks that, per sampling number, budgets never shrink as the threshold
/// rises, that a missed threshold stays missed, and that every budget is a
/// whole number of iterations.
pub fn check_summary(rows: &[SummaryRow]) -> Result<(), String> {
    let mut numbers: Vec<usize> = rows.iter().map(|r| r.sampling_number).collect();
    numbers.dedup();
    for s in numbers {
        let mut mine: Vec<&SummaryRow> = rows.iter().filter(|r| r.sampling_number == s).collect();
        mine.sort_by(|a, b| a.threshold.total_cmp(&b.threshold));
        for pair in mine.windows(2) {
            if pair[0].threshold == pair[1].threshold {
                return Err(format!("sampling number {s}: threshold {} listed twice", pair[0].threshold));
            }
            match (pair[0].crafted_budget, pair[1].crafted_budget) {
                (Some(a), Some(b)) if b < a => {
                    return Err(format!(
                        "sampling number {s}: budget falls from {a} to {b} as the threshold rises"
                    ))
                }
                (None, Some(_)) => {
                    return Err(format!(
                        "sampling number {s}: threshold {} reached after {} was not",
                        pair[1].threshold, pair[0].threshold
                    ))
                }
                _ => {}
            }
        }
        if let Some(b) = mine.iter().filter_map(|r| r.crafted_budget).find(|b| b % s as u64 != 0) {
            return Err(format!("sampling number {s}: budget {b} is not a multiple of it"));
        }
    }
    Ok(())
}

/// Sampling number with the smallest budget for each threshold (lowest
/// sampling number on ties); `None` where no run reached it.
pub fn fastest(rows: &[SummaryRow]) -> Vec<(f64, Option<(usize, u64)>)> {
    let mut thresholds: Vec<f64> = rows.iter().map(|r| r.threshold).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds
        .into_iter()
        .map(|t| {
            let best = rows
                .iter()
                .filter(|r| r.threshold == t)
                .filter_map(|r| r.crafted_budget.map(|b| (r.sampling_number, b)))
                .min_by_key(|&(s, b)| (b, s));
            (t, best)
        })
        .collect()
}
