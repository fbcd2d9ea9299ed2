//! CSV import/export for fields and experiment tables.
//!
//! Field layout: a header row with the spatial column names (x-coordinates
//! on segments, global node ids on trees), then one row per time step whose
//! first column is t. Values are written with a configurable number of
//! significant digits; the default 17 round-trips f64 exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::grid::{Geometry, TimeGrid};
use crate::tree::TreeGeometry;

pub const DEFAULT_PRECISION: usize = 17;

/// Scientific formatting with `sig` significant digits.
pub fn format_sig(x: f64, sig: usize) -> String {
    format!("{:.*e}", sig.saturating_sub(1), x)
}

/// Spatial column names for a geometry.
pub fn column_names(geometry: &Geometry) -> Vec<String> {
    match geometry {
        Geometry::Segment(g) => g.nodes().map(|x| format!("x={x}")).collect(),
        Geometry::Tree(t) => (0..t.n_global()).map(|g| format!("n{g}")).collect(),
    }
}

/// Writes a (time x node) field with a leading `t` column.
pub fn write_field_csv(
    path: &Path,
    values: &Array2<f64>,
    tgrid: &TimeGrid,
    columns: &[String],
    sig: usize,
) -> Result<()> {
    if values.ncols() != columns.len() {
        return Err(Error::Shape(format!(
            "field has {} columns, header has {}",
            values.ncols(),
            columns.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "t")?;
    for c in columns {
        write!(w, ",{c}")?;
    }
    writeln!(w)?;
    for (n, row) in values.rows().into_iter().enumerate() {
        write!(w, "{}", format_sig(tgrid.node(n), sig))?;
        for v in row {
            write!(w, ",{}", format_sig(*v, sig))?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a single spatial profile (static conductance) in the field layout.
pub fn write_profile_csv(path: &Path, profile: &[f64], columns: &[String], sig: usize) -> Result<()> {
    if profile.len() != columns.len() {
        return Err(Error::Shape("profile and header lengths differ".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "t")?;
    for c in columns {
        write!(w, ",{c}")?;
    }
    writeln!(w)?;
    write!(w, "{}", format_sig(0.0, sig))?;
    for v in profile {
        write!(w, ",{}", format_sig(*v, sig))?;
    }
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Reads a field written by [`write_field_csv`]; returns times and values.
pub fn read_field_csv(path: &Path) -> Result<(Vec<f64>, Array2<f64>)> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::CsvParse(format!("{}: empty file", path.display())))??;
    let n_cols = header.split(',').count().saturating_sub(1);
    if n_cols == 0 {
        return Err(Error::CsvParse(format!("{}: header has no data columns", path.display())));
    }
    let mut times = Vec::new();
    let mut flat = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let t: f64 = parts
            .next()
            .unwrap()
            .trim()
            .parse()
            .map_err(|e| Error::CsvParse(format!("{}:{}: bad t ({e})", path.display(), lineno + 2)))?;
        times.push(t);
        let mut count = 0;
        for p in parts {
            let v: f64 = p.trim().parse().map_err(|e| {
                Error::CsvParse(format!("{}:{}: bad value ({e})", path.display(), lineno + 2))
            })?;
            flat.push(v);
            count += 1;
        }
        if count != n_cols {
            return Err(Error::CsvParse(format!(
                "{}:{}: expected {} columns, found {}",
                path.display(),
                lineno + 2,
                n_cols,
                count
            )));
        }
    }
    let rows = times.len();
    let values = Array2::from_shape_vec((rows, n_cols), flat)
        .map_err(|e| Error::CsvParse(format!("{}: {e}", path.display())))?;
    Ok((times, values))
}

/// Tree node table: global index, owning edge id, arclength from its near end.
pub fn write_nodes_csv(path: &Path, tree: &TreeGeometry, sig: usize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "node,edge,arclength")?;
    for g in 0..tree.n_global() {
        let (e_idx, s) = tree.node_arclength(g);
        writeln!(w, "n{g},{},{}", tree.edges()[e_idx].id, format_sig(s, sig))?;
    }
    w.flush()?;
    Ok(())
}

/// Residual history as (k, residual) pairs, 1-based k.
pub fn write_residuals_csv(path: &Path, history: &[f64], sig: usize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "k,residual")?;
    for (k, r) in history.iter().enumerate() {
        writeln!(w, "{},{}", k + 1, format_sig(*r, sig))?;
    }
    w.flush()?;
    Ok(())
}

/// Summary table mirroring the paper's per-example tables plus diagnostics.
pub struct TableRow {
    pub delta_rel: f64,
    pub error_g_percent: f64,
    pub error_v_percent: f64,
    pub mean_iterations: f64,
    pub failed_trials: usize,
}

pub fn write_table_csv(path: &Path, rows: &[TableRow], sig: usize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "Delta,Error_G_percent,Error_V_percent,mean_iterations,failed_trials")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            format_sig(r.delta_rel, sig),
            format_sig(r.error_g_percent, sig),
            format_sig(r.error_v_percent, sig),
            format_sig(r.mean_iterations, sig),
            r.failed_trials
        )?;
    }
    w.flush()?;
    Ok(())
}
