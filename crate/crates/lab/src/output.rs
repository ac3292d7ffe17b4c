//! CSV artifacts of a study run.
//!
//! * `results.csv`: one row per record, in the sorted order of the result.
//! * `fits.csv`: one row per convergence-order fit.
//! * `timings.csv`: wall-clock seconds; the only non-reproducible file.
//! * `plot/<curve>.csv`: two-column plot data.
//!
//! Floats are written with `Display`, which round-trips exactly.

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64 as C64;

use crate::error::{LabError, Result};
use crate::study::{Check, Curve, OrderFit, Params, Record, StudyResult, Timing};

pub const RESULTS_HEADER: [&str; 16] = [
    "study",
    "model",
    "flavor",
    "seed",
    "sample",
    "level",
    "steps",
    "t",
    "h",
    "case",
    "metric",
    "value",
    "probe",
    "check",
    "negative_control",
    "pass",
];

pub const FITS_HEADER: [&str; 11] = [
    "model", "flavor", "level", "case", "metric", "order", "std_err", "band_lo", "band_hi", "target", "pass",
];

pub fn encode_check(check: Check) -> String {
    match check {
        Check::AtMost(t) => format!("le:{t}"),
        Check::AtLeast(t) => format!("ge:{t}"),
        Check::Exceeds(t) => format!("gt:{t}"),
        Check::Near { target, tolerance } => format!("near:{target}:{tolerance}"),
        Check::Report => "report".into(),
    }
}

pub fn decode_check(text: &str) -> Option<Check> {
    let mut parts = text.split(':');
    let tag = parts.next()?;
    let mut num = || parts.next()?.parse::<f64>().ok();
    let check = match tag {
        "le" => Check::AtMost(num()?),
        "ge" => Check::AtLeast(num()?),
        "gt" => Check::Exceeds(num()?),
        "near" => Check::Near {
            target: num()?,
            tolerance: num()?,
        },
        "report" => Check::Report,
        _ => return None,
    };
    Some(check)
}

fn encode_probe(z: C64) -> String {
    format!("{},{}", z.re, z.im)
}

fn decode_probe(text: &str) -> Option<C64> {
    let (re, im) = text.split_once(',')?;
    Some(C64::new(re.parse().ok()?, im.parse().ok()?))
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn csv_error(path: &Path) -> impl FnOnce(csv::Error) -> LabError + '_ {
    move |source| LabError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> LabError + '_ {
    move |source| LabError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error(path))?;
    w.write_record(header).map_err(csv_error(path))?;
    for row in rows {
        w.write_record(&row).map_err(csv_error(path))?;
    }
    w.flush().map_err(io_error(path))
}

fn record_row(r: &Record) -> Vec<String> {
    let p = &r.params;
    vec![
        p.study.clone(),
        p.model.clone(),
        p.flavor.clone(),
        opt(p.seed),
        p.sample.to_string(),
        p.level.to_string(),
        p.steps.to_string(),
        p.t.to_string(),
        p.h.to_string(),
        p.case.clone(),
        r.metric.clone(),
        r.value.to_string(),
        encode_probe(r.probe),
        encode_check(r.check),
        r.negative_control.to_string(),
        r.pass.to_string(),
    ]
}

fn fit_row(f: &OrderFit) -> Vec<String> {
    let band = f.band();
    vec![
        f.model.clone(),
        f.flavor.clone(),
        f.level.to_string(),
        f.case.clone(),
        f.metric.clone(),
        f.order.map_or_else(|| "exact".into(), |o| o.to_string()),
        f.std_err.to_string(),
        opt(band.map(|b| b.0)),
        opt(band.map(|b| b.1)),
        format!("{}±{}", f.target, f.tolerance),
        f.pass.to_string(),
    ]
}

fn safe_name(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Write all artifacts of `result` into `dir`, creating it if needed.
/// Returns the paths written.
pub fn write_outputs(result: &StudyResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_error(dir))?;
    let mut written = Vec::new();

    let path = dir.join("results.csv");
    write_rows(&path, &RESULTS_HEADER, result.records.iter().map(record_row))?;
    written.push(path);

    if !result.fits.is_empty() {
        let path = dir.join("fits.csv");
        write_rows(&path, &FITS_HEADER, result.fits.iter().map(fit_row))?;
        written.push(path);
    }

    let path = dir.join("timings.csv");
    write_rows(
        &path,
        &["label", "seconds"],
        result
            .timings
            .iter()
            .map(|t| vec![t.label.clone(), t.seconds.to_string()]),
    )?;
    written.push(path);

    if !result.curves.is_empty() {
        let plot = dir.join("plot");
        fs::create_dir_all(&plot).map_err(io_error(&plot))?;
        for curve in &result.curves {
            let path = plot.join(format!("{}.csv", safe_name(&curve.name)));
            write_rows(
                &path,
                &[&curve.x_label, &curve.y_label],
                curve.points.iter().map(|(x, y)| vec![x.to_string(), y.to_string()]),
            )?;
            written.push(path);
        }
    }
    Ok(written)
}

fn malformed(path: &Path, message: String) -> LabError {
    LabError::Malformed {
        path: path.to_path_buf(),
        message,
    }
}

fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error(path))?;
    let got = r.headers().map_err(csv_error(path))?.clone();
    if got.iter().ne(header.iter().copied()) {
        return Err(malformed(
            path,
            format!("unexpected header {:?}", got.iter().collect::<Vec<_>>()),
        ));
    }
    r.records().map(|row| row.map_err(csv_error(path))).collect()
}

/// Read back `results.csv`.
pub fn read_results(path: &Path) -> Result<Vec<Record>> {
    let rows = read_rows(path, &RESULTS_HEADER)?;
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let line = i + 2;
            let bad = |col: &str| malformed(path, format!("row {line}: bad `{col}`"));
            let num = |idx: usize| -> Result<f64> { row[idx].parse().map_err(|_| bad(RESULTS_HEADER[idx])) };
            let int = |idx: usize| -> Result<usize> { row[idx].parse().map_err(|_| bad(RESULTS_HEADER[idx])) };
            let flag = |idx: usize| -> Result<bool> { row[idx].parse().map_err(|_| bad(RESULTS_HEADER[idx])) };
            let seed = match &row[3] {
                "" => None,
                s => Some(s.parse().map_err(|_| bad("seed"))?),
            };
            Ok(Record {
                params: Params {
                    study: row[0].to_string(),
                    model: row[1].to_string(),
                    flavor: row[2].to_string(),
                    seed,
                    sample: int(4)?,
                    level: int(5)?,
                    steps: int(6)?,
                    t: num(7)?,
                    h: num(8)?,
                    case: row[9].to_string(),
                },
                metric: row[10].to_string(),
                value: num(11)?,
                probe: decode_probe(&row[12]).ok_or_else(|| bad("probe"))?,
                check: decode_check(&row[13]).ok_or_else(|| bad("check"))?,
                negative_control: flag(14)?,
                pass: flag(15)?,
            })
        })
        .collect()
}

/// Read back `fits.csv`.
pub fn read_fits(path: &Path) -> Result<Vec<OrderFit>> {
    let rows = read_rows(path, &FITS_HEADER)?;
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let line = i + 2;
            let bad = |col: &str| malformed(path, format!("row {line}: bad `{col}`"));
            let order = match &row[5] {
                "exact" => None,
                s => Some(s.parse().map_err(|_| bad("order"))?),
            };
            let (target, tolerance) = row[9].split_once('±').ok_or_else(|| bad("target"))?;
            Ok(OrderFit {
                model: row[0].to_string(),
                flavor: row[1].to_string(),
                level: row[2].parse().map_err(|_| bad("level"))?,
                case: row[3].to_string(),
                metric: row[4].to_string(),
                order,
                std_err: row[6].parse().map_err(|_| bad("std_err"))?,
                target: target.parse().map_err(|_| bad("target"))?,
                tolerance: tolerance.parse().map_err(|_| bad("target"))?,
                pass: row[10].parse().map_err(|_| bad("pass"))?,
            })
        })
        .collect()
}

/// Read back `timings.csv`.
pub fn read_timings(path: &Path) -> Result<Vec<Timing>> {
    let rows = read_rows(path, &["label", "seconds"])?;
    rows.iter()
        .map(|row| {
            Ok(Timing {
                label: row[0].to_string(),
                seconds: row[1]
                    .parse()
                    .map_err(|_| malformed(path, format!("bad seconds `{}`", &row[1])))?,
            })
        })
        .collect()
}

/// Read a plot file written by [`write_outputs`].
pub fn read_curve(path: &Path) -> Result<Curve> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error(path))?;
    let header = r.headers().map_err(csv_error(path))?.clone();
    if header.len() != 2 {
        return Err(malformed(path, "a curve has two columns".into()));
    }
    let mut points = Vec::new();
    for row in r.records() {
        let row = row.map_err(csv_error(path))?;
        let x = row[0]
            .parse()
            .map_err(|_| malformed(path, format!("bad x `{}`", &row[0])))?;
        let y = row[1]
            .parse()
            .map_err(|_| malformed(path, format!("bad y `{}`", &row[1])))?;
        points.push((x, y));
    }
    Ok(Curve {
        name: path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string(),
        x_label: header[0].to_string(),
        y_label: header[1].to_string(),
        points,
    })
}
