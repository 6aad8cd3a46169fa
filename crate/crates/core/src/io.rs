//! CSV input/output and result serialization.
//!
//! Numeric fields render with the shortest decimal representation that
//! parses back to the identical bit pattern, so export/import round trips
//! are exact.

use std::io::{Read, Write};

use nalgebra::DMatrix;

use crate::bootstrap::TestResult;
use crate::dataset::ClusteredDataset;
use crate::dgp::{McCell, McTable};
use crate::error::{Error, Result};

/// Schema tag carried by every emitted document.
pub const RESULT_SCHEMA: &str = "ivqr-results/1";
pub const TABLE_SCHEMA: &str = "ivqr-mc-table/1";
pub const DATASET_SCHEMA: &str = "ivqr-dataset/1";

/// Loads a dataset from CSV with header
/// `cluster,y,x,w_1..w_dw,z_1..z_dz[,v]`. With `prepend_intercept` a constant
/// column is inserted ahead of the `w` block (the usual call); disable it
/// when the file already carries one.
pub fn load_csv<R: Read>(reader: R, prepend_intercept: bool) -> Result<ClusteredDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let names: Vec<&str> = headers.iter().collect();

    let col = |name: &str| -> Result<usize> {
        names
            .iter()
            .position(|&h| h == name)
            .ok_or_else(|| Error::MissingColumn { name: name.into() })
    };
    let c_cluster = col("cluster")?;
    let c_y = col("y")?;
    let c_x = col("x")?;
    let w_cols: Vec<usize> = (1..)
        .map(|k| names.iter().position(|&h| h == format!("w_{k}")))
        .take_while(|p| p.is_some())
        .flatten()
        .collect();
    let z_cols: Vec<usize> = (1..)
        .map(|k| names.iter().position(|&h| h == format!("z_{k}")))
        .take_while(|p| p.is_some())
        .flatten()
        .collect();
    if z_cols.is_empty() {
        return Err(Error::MissingColumn { name: "z_1".into() });
    }
    let c_v = names.iter().position(|&h| h == "v");

    let mut y = Vec::new();
    let mut x = Vec::new();
    let mut labels = Vec::new();
    let mut w_raw: Vec<Vec<f64>> = Vec::new();
    let mut z_raw: Vec<Vec<f64>> = Vec::new();
    let mut v: Vec<f64> = Vec::new();

    for (idx, record) in rdr.records().enumerate() {
        let line = idx + 2; // header is line 1
        let record = record.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let field = |c: usize, name: &str| -> Result<f64> {
            let raw = record.get(c).ok_or_else(|| Error::Parse {
                line,
                message: format!("missing field `{name}`"),
            })?;
            let val: f64 = raw.trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("cannot parse `{raw}` in column `{name}`"),
            })?;
            if !val.is_finite() {
                return Err(Error::NonFinite {
                    column: name.into(),
                    line,
                });
            }
            Ok(val)
        };
        let label_raw = record.get(c_cluster).ok_or_else(|| Error::Parse {
            line,
            message: "missing cluster label".into(),
        })?;
        let label: i64 = label_raw.trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("cannot parse cluster label `{label_raw}`"),
        })?;
        labels.push(label);
        y.push(field(c_y, "y")?);
        x.push(field(c_x, "x")?);
        w_raw.push(
            w_cols
                .iter()
                .enumerate()
                .map(|(k, &c)| field(c, &format!("w_{}", k + 1)))
                .collect::<Result<Vec<f64>>>()?,
        );
        z_raw.push(
            z_cols
                .iter()
                .enumerate()
                .map(|(k, &c)| field(c, &format!("z_{}", k + 1)))
                .collect::<Result<Vec<f64>>>()?,
        );
        if let Some(c) = c_v {
            v.push(field(c, "v")?);
        }
    }

    let n = y.len();
    if n == 0 {
        return Err(Error::Parse {
            line: 2,
            message: "no data rows".into(),
        });
    }
    let dw_file = w_cols.len();
    let dw = dw_file + usize::from(prepend_intercept);
    if dw == 0 {
        return Err(Error::MissingColumn { name: "w_1".into() });
    }
    let w = DMatrix::from_fn(n, dw, |i, c| {
        if prepend_intercept {
            if c == 0 {
                1.0
            } else {
                w_raw[i][c - 1]
            }
        } else {
            w_raw[i][c]
        }
    });
    let z = DMatrix::from_fn(n, z_cols.len(), |i, c| z_raw[i][c]);
    ClusteredDataset::new(y, x, w, z, &labels, if v.is_empty() { None } else { Some(v) })
}

pub fn load_csv_path(path: &std::path::Path, prepend_intercept: bool) -> Result<ClusteredDataset> {
    let file = std::fs::File::open(path)?;
    load_csv(std::io::BufReader::new(file), prepend_intercept)
}

/// Shortest decimal rendering that round-trips to the same f64.
pub fn render_float(x: f64) -> String {
    format!("{x}")
}

/// Writes a dataset as CSV. With `drop_first_w` the leading control column
/// (the intercept the loader re-inserts) is omitted.
pub fn save_csv<W: Write>(ds: &ClusteredDataset, out: W, drop_first_w: bool) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let dw = ds.d_w();
    let w_start = usize::from(drop_first_w);
    let mut header = vec!["cluster".to_string(), "y".to_string(), "x".to_string()];
    for k in w_start..dw {
        header.push(format!("w_{}", k - w_start + 1));
    }
    for k in 0..ds.d_z() {
        header.push(format!("z_{}", k + 1));
    }
    header.push("v".to_string());
    wtr.write_record(&header).map_err(|e| Error::Io(e.to_string()))?;
    for i in 0..ds.n() {
        let mut rec = vec![
            ds.cluster[i].to_string(),
            render_float(ds.y[i]),
            render_float(ds.x[i]),
        ];
        for c in w_start..dw {
            rec.push(render_float(ds.w[(i, c)]));
        }
        for c in 0..ds.d_z() {
            rec.push(render_float(ds.z[(i, c)]));
        }
        rec.push(render_float(ds.v[i]));
        wtr.write_record(&rec).map_err(|e| Error::Io(e.to_string()))?;
    }
    wtr.flush().map_err(|e| Error::Io(e.to_string()))?;
    Ok(())
}

/// Test results plus the fully resolved configuration, as one JSON document.
pub fn results_to_json(results: &[TestResult], config: serde_json::Value) -> serde_json::Value {
    serde_json::json!({
        "schema": RESULT_SCHEMA,
        "config": config,
        "results": results,
    })
}

/// Rejection table as JSON with the schema tag and configuration echo.
pub fn mc_table_to_json(table: &McTable, config: serde_json::Value) -> serde_json::Value {
    serde_json::json!({
        "schema": TABLE_SCHEMA,
        "config": config,
        "replications": table.replications,
        "cells": table.cells,
    })
}

/// Rejection table as CSV in the published layout: one row per method, one
/// column per quantile index, grouped into hypothesis panels. Rates are in
/// percent with one decimal.
pub fn mc_table_to_csv(table: &McTable) -> String {
    let mut taus: Vec<f64> = table.cells.iter().map(|c| c.tau).collect();
    taus.sort_by(|a, b| a.partial_cmp(b).unwrap());
    taus.dedup();
    let mut methods: Vec<_> = Vec::new();
    for c in &table.cells {
        if !methods.contains(&c.method) {
            methods.push(c.method);
        }
    }
    let mut hyps: Vec<_> = Vec::new();
    for c in &table.cells {
        if !hyps.contains(&c.hypothesis) {
            hyps.push(c.hypothesis);
        }
    }

    let mut out = String::new();
    out.push_str(&format!("# schema: {TABLE_SCHEMA}\n"));
    out.push_str("hypothesis,method");
    for t in &taus {
        out.push_str(&format!(",tau_{}", render_float(*t)));
    }
    out.push_str(",failures\n");
    let find = |m, t, h| -> Option<&McCell> {
        table
            .cells
            .iter()
            .find(|c| c.method == m && c.tau == t && c.hypothesis == h)
    };
    for &h in &hyps {
        for &m in &methods {
            out.push_str(&format!("{},{}", h.as_str(), m.as_str()));
            let mut fails = 0usize;
            for &t in &taus {
                match find(m, t, h) {
                    Some(cell) => {
                        fails += cell.failures;
                        if cell.rejection_rate.is_nan() {
                            out.push_str(",NA");
                        } else {
                            out.push_str(&format!(",{:.1}", 100.0 * cell.rejection_rate));
                        }
                    }
                    None => out.push_str(","),
                }
            }
            out.push_str(&format!(",{fails}\n"));
        }
    }
    out
}
