//! File formats: dataset and result CSVs, JSON artifacts, atomic writes.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::bootstrap::{BootstrapRun, Replicate};
use crate::error::{Error, Result};
use crate::model::{Dataset, Design, SubjectDesign};
use crate::study::{BiasRow, CoverageRow, Method};

/// Write `bytes` to a temporary sibling of `path` and rename it into place,
/// so readers never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| Error::InvalidInput(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Format with six significant digits, in the style of C's `%g`.
pub fn fmt_sig(v: f64) -> String {
    if !v.is_finite() {
        return if v.is_nan() {
            "NaN".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    if v == 0.0 {
        return "0".into();
    }
    // round first so that e.g. 999999.5 switches to exponent notation
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format has an exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp) as usize;
        trim_zeros(format!("{v:.decimals$}"))
    } else {
        format!("{}e{}{:02}", trim_zeros(mantissa.to_string()), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), fmt_sig)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidInput(format!("malformed CSV: {other:?}")),
    }
}

fn parse_f64(row: usize, column: &str, text: &str) -> Result<f64> {
    let v: f64 =
        text.trim().parse().map_err(|_| Error::Parse { row, column: column.to_string(), message: format!("`{text}` is not a number") })?;
    if !v.is_finite() {
        return Err(Error::Parse { row, column: column.to_string(), message: "value must be finite".into() });
    }
    Ok(v)
}

fn parse_opt(row: usize, column: &str, text: &str) -> Result<Option<f64>> {
    if text == "NA" || text.is_empty() {
        Ok(None)
    } else {
        parse_f64(row, column, text).map(Some)
    }
}

fn header_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Parse {
        row: 1,
        column: name.to_string(),
        message: "missing column".into(),
    })
}

/// Parse a long-format dataset: header `id,x,y` (an optional `group` column
/// is accepted), one row per observation. Subjects keep the order of their
/// first row. Row numbers in errors count the header as row 1.
pub fn parse_dataset_csv(text: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(csv_err)?.clone();
    let (ci, cx, cy) = (header_index(&headers, "id")?, header_index(&headers, "x")?, header_index(&headers, "y")?);
    let cg = headers.iter().position(|h| h == "group");
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut subjects: Vec<SubjectDesign> = Vec::new();
    let mut observations: Vec<Vec<f64>> = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let row = r + 2;
        let rec = rec.map_err(|e| Error::Parse { row, column: String::new(), message: e.to_string() })?;
        let field = |c: usize, name: &str| {
            rec.get(c).ok_or_else(|| Error::Parse { row, column: name.to_string(), message: "missing field".into() })
        };
        let id = field(ci, "id")?;
        if id.is_empty() {
            return Err(Error::Parse { row, column: "id".into(), message: "empty subject id".into() });
        }
        let x = parse_f64(row, "x", field(cx, "x")?)?;
        if x < 0.0 {
            return Err(Error::Parse { row, column: "x".into(), message: "doses must be non-negative".into() });
        }
        let y = parse_f64(row, "y", field(cy, "y")?)?;
        let group = cg.and_then(|c| rec.get(c)).filter(|g| !g.is_empty()).map(str::to_string);
        let i = *index.entry(id.to_string()).or_insert_with(|| {
            subjects.push(SubjectDesign { id: id.to_string(), group: group.clone(), doses: Vec::new() });
            observations.push(Vec::new());
            subjects.len() - 1
        });
        subjects[i].doses.push(x);
        observations[i].push(y);
    }
    let ds = Dataset { design: Design { subjects }, observations, provenance: None };
    ds.validate()?;
    Ok(ds)
}

pub fn read_dataset_csv(path: &Path) -> Result<Dataset> {
    parse_dataset_csv(&fs::read_to_string(path)?)
}

/// Inverse of [`parse_dataset_csv`]. Values are written at full precision.
pub fn dataset_to_csv(ds: &Dataset) -> String {
    let with_group = ds.design.subjects.iter().any(|s| s.group.is_some());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id", "x", "y"];
    if with_group {
        header.push("group");
    }
    w.write_record(&header).expect("in-memory write");
    for (s, y) in ds.design.subjects.iter().zip(&ds.observations) {
        for (x, v) in s.doses.iter().zip(y) {
            let mut rec = vec![s.id.clone(), x.to_string(), v.to_string()];
            if with_group {
                rec.push(s.group.clone().unwrap_or_default());
            }
            w.write_record(&rec).expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("CSV is UTF-8")
}

pub fn write_dataset_csv(path: &Path, ds: &Dataset) -> Result<()> {
    write_atomic(path, dataset_to_csv(ds).as_bytes())
}

/// Bootstrap distribution: `replicate,status,<params>`, replicates numbered
/// from 1, failed refits with empty values.
pub fn bootstrap_to_csv(run: &BootstrapRun) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["replicate".to_string(), "status".to_string()];
    header.extend(run.param_names.iter().cloned());
    w.write_record(&header).expect("in-memory write");
    for r in &run.replicates {
        let mut rec = vec![(r.index + 1).to_string(), if r.ok() { "ok" } else { "failed" }.to_string()];
        match &r.values {
            Some(v) => rec.extend(v.iter().map(|&x| fmt_sig(x))),
            None => rec.extend(run.param_names.iter().map(|_| String::new())),
        }
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("CSV is UTF-8")
}

/// Parameter names and replicates of a bootstrap CSV.
pub fn parse_bootstrap_csv(text: &str) -> Result<(Vec<String>, Vec<Replicate>)> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers().map_err(csv_err)?.clone();
    if headers.len() < 2 || &headers[0] != "replicate" || &headers[1] != "status" {
        return Err(Error::Parse { row: 1, column: "replicate".into(), message: "expected `replicate,status,...` header".into() });
    }
    let names: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
    let mut reps = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let row = r + 2;
        let rec = rec.map_err(|e| Error::Parse { row, column: String::new(), message: e.to_string() })?;
        let index = rec[0].parse::<usize>().ok().and_then(|i| i.checked_sub(1)).ok_or_else(|| Error::Parse {
            row,
            column: "replicate".into(),
            message: "expected a positive integer".into(),
        })?;
        let values = match &rec[1] {
            "ok" => Some(names.iter().enumerate().map(|(j, n)| parse_f64(row, n, &rec[j + 2])).collect::<Result<Vec<_>>>()?),
            "failed" => None,
            other => return Err(Error::Parse { row, column: "status".into(), message: format!("unknown status `{other}`") }),
        };
        let error = values.is_none().then(|| "failed".to_string());
        reps.push(Replicate { index, values, error });
    }
    Ok((names, reps))
}

pub fn coverage_to_csv(rows: &[CoverageRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scenario", "method", "parameter", "alpha", "coverage", "mc_se", "K_available"]).expect("in-memory write");
    for r in rows {
        w.write_record([
            r.scenario.clone(),
            r.method.to_string(),
            r.parameter.clone(),
            fmt_sig(r.alpha),
            fmt_opt(r.coverage),
            fmt_opt(r.mc_se),
            r.k_available.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("CSV is UTF-8")
}

pub fn parse_coverage_csv(text: &str) -> Result<Vec<CoverageRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let row = r + 2;
        let rec = rec.map_err(|e| Error::Parse { row, column: String::new(), message: e.to_string() })?;
        if rec.len() != 7 {
            return Err(Error::Parse { row, column: String::new(), message: "expected 7 fields".into() });
        }
        let coverage = parse_opt(row, "coverage", &rec[4])?;
        let k_available: usize =
            rec[6].parse().map_err(|_| Error::Parse { row, column: "K_available".into(), message: "expected an integer".into() })?;
        out.push(CoverageRow {
            scenario: rec[0].to_string(),
            method: rec[1].parse::<Method>().map_err(|e| Error::Parse { row, column: "method".into(), message: e.to_string() })?,
            parameter: rec[2].to_string(),
            alpha: parse_f64(row, "alpha", &rec[3])?,
            coverage,
            mc_se: parse_opt(row, "mc_se", &rec[5])?,
            contained: coverage.map_or(0, |c| (c * k_available as f64).round() as usize),
            k_available,
        });
    }
    Ok(out)
}

pub fn bias_to_csv(rows: &[BiasRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scenario", "method", "parameter", "rb_param_pct", "rb_se_pct", "se_empirical"]).expect("in-memory write");
    for r in rows {
        w.write_record([
            r.scenario.clone(),
            r.method.to_string(),
            r.parameter.clone(),
            fmt_opt(r.rb_param_pct),
            fmt_opt(r.rb_se_pct),
            fmt_opt(r.se_empirical),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("CSV is UTF-8")
}

pub fn parse_bias_csv(text: &str) -> Result<Vec<BiasRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let row = r + 2;
        let rec = rec.map_err(|e| Error::Parse { row, column: String::new(), message: e.to_string() })?;
        if rec.len() != 6 {
            return Err(Error::Parse { row, column: String::new(), message: "expected 6 fields".into() });
        }
        out.push(BiasRow {
            scenario: rec[0].to_string(),
            method: rec[1].parse::<Method>().map_err(|e| Error::Parse { row, column: "method".into(), message: e.to_string() })?,
            parameter: rec[2].to_string(),
            rb_param_pct: parse_opt(row, "rb_param_pct", &rec[3])?,
            rb_se_pct: parse_opt(row, "rb_se_pct", &rec[4])?,
            se_empirical: parse_opt(row, "se_empirical", &rec[5])?,
        });
    }
    Ok(out)
}
