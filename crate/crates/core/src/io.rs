//! CSV formats: trial data, prior tables and fit tables.

use std::collections::HashMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::gee_fit::{FitResult, SubjectRecord, TrialDataset};
use crate::model_core::{CrossoverLayout, Family, TreatmentSequence};

/// Full precision for reproducible output.
pub fn fmt_num(x: f64) -> String {
    format!("{x:.16e}")
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim().eq_ignore_ascii_case(name))
        .ok_or_else(|| Error::Dataset(format!("missing column {name:?}")))
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

/// Long-format trial data: `subject_id, sequence, period, response`, one
/// row per subject and period. Subjects keep their order of first
/// appearance.
pub fn read_dataset<R: Read>(reader: R, layout: &CrossoverLayout, family: Family) -> Result<TrialDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let (ci, cs, cp, cr) = (
        column(&headers, "subject_id")?,
        column(&headers, "sequence")?,
        column(&headers, "period")?,
        column(&headers, "response")?,
    );
    let p = layout.periods();
    let mut order: Vec<String> = vec![];
    let mut subjects: HashMap<String, (TreatmentSequence, Vec<Option<f64>>)> = HashMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = line_of(&record);
        let bad = |msg: String| Error::Dataset(format!("line {line}: {msg}"));
        let get = |i: usize| record.get(i).ok_or_else(|| bad(format!("missing field {}", i + 1)));
        let id = get(ci)?.to_string();
        let seq: TreatmentSequence = get(cs)?.parse().map_err(|e| bad(format!("{e}")))?;
        seq.validate(layout).map_err(|e| bad(format!("{e}")))?;
        let period: usize = get(cp)?
            .parse()
            .map_err(|_| bad(format!("period {:?} is not an integer", get(cp).unwrap_or(""))))?;
        if period < 1 || period > p {
            return Err(bad(format!("period {period} outside 1..={p}")));
        }
        let y: f64 = get(cr)?
            .parse()
            .map_err(|_| bad(format!("response {:?} is not a number", get(cr).unwrap_or(""))))?;
        if !family.in_support(y) {
            return Err(bad(format!("response {y} outside the {} support", family.name())));
        }
        let entry = subjects.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            (seq.clone(), vec![None; p])
        });
        if entry.0 != seq {
            return Err(bad(format!("subject {id} changes sequence from {} to {seq}", entry.0)));
        }
        if entry.1[period - 1].replace(y).is_some() {
            return Err(bad(format!("subject {id} period {period} given twice")));
        }
    }
    let mut records = Vec::with_capacity(order.len());
    for id in order {
        let (sequence, ys) = subjects.remove(&id).expect("recorded id");
        let responses = ys
            .iter()
            .enumerate()
            .map(|(k, y)| {
                y.ok_or_else(|| Error::Dataset(format!("subject {id} has no response for period {}", k + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(SubjectRecord {
            id,
            sequence,
            responses,
        });
    }
    TrialDataset::new(*layout, family, records)
}

pub fn write_dataset<W: Write>(writer: W, data: &TrialDataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["subject_id", "sequence", "period", "response"])?;
    for s in data.subjects() {
        let seq = s.sequence.to_string();
        for (k, y) in s.responses.iter().enumerate() {
            w.write_record([s.id.as_str(), &seq, &(k + 1).to_string(), &fmt_num(*y)])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Point estimates with interval bounds, one row per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorTable {
    pub names: Vec<String>,
    pub estimates: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
}

/// `parameter, estimate, ci_low, ci_high`; other columns are ignored, so a
/// fit table reads back directly.
pub fn read_prior_table<R: Read>(reader: R) -> Result<PriorTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols = [
        column(&headers, "parameter")?,
        column(&headers, "estimate")?,
        column(&headers, "ci_low")?,
        column(&headers, "ci_high")?,
    ];
    let mut table = PriorTable {
        names: vec![],
        estimates: vec![],
        ci_low: vec![],
        ci_high: vec![],
    };
    for record in rdr.records() {
        let record = record?;
        let line = line_of(&record);
        let num = |i: usize| -> Result<f64> {
            let raw = record.get(i).unwrap_or("");
            raw.parse()
                .map_err(|_| Error::Dataset(format!("line {line}: {raw:?} is not a number")))
        };
        table.names.push(record.get(cols[0]).unwrap_or("").to_string());
        table.estimates.push(num(cols[1])?);
        table.ci_low.push(num(cols[2])?);
        table.ci_high.push(num(cols[3])?);
    }
    if table.names.is_empty() {
        return Err(Error::Dataset("prior table has no rows".into()));
    }
    Ok(table)
}

/// `parameter, estimate, ci_low, ci_high, model_se, sandwich_se`.
pub fn write_fit_table<W: Write>(writer: W, fit: &FitResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["parameter", "estimate", "ci_low", "ci_high", "model_se", "sandwich_se"])?;
    for (k, name) in fit.names.iter().enumerate() {
        w.write_record([
            name.clone(),
            fmt_num(fit.theta_hat[k]),
            fmt_num(fit.ci_low[k]),
            fmt_num(fit.ci_high[k]),
            fmt_num(fit.model_se[k]),
            fmt_num(fit.sandwich_se[k]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Scalar fit outputs as `quantity, value`.
pub fn write_fit_summary<W: Write>(writer: W, fit: &FitResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["quantity", "value"])?;
    let rows = [
        ("structure", fit.structure.name().to_string()),
        ("alpha_hat", fmt_num(fit.alpha_hat)),
        ("alpha_raw", fmt_num(fit.alpha_raw)),
        ("dispersion_hat", fmt_num(fit.dispersion_hat)),
        ("iterations", fit.iterations.to_string()),
        ("converged", fit.converged.to_string()),
        ("estimating_equation_norm", fmt_num(fit.estimating_equation_norm)),
    ];
    for (k, v) in rows {
        w.write_record([k, v.as_str()])?;
    }
    w.flush()?;
    Ok(())
}
