//! Field CSV files and small tables.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{cell_gradient, norm2, Grid, ScalarField};

/// One time level (or a stationary field) of nodal output.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldFrame {
    pub t: Option<f64>,
    pub u: ScalarField,
    /// Per cell; averaged to nodes on output. NaN when absent.
    pub lambda: Option<Vec<f64>>,
    /// Per cell; averaged to nodes on output.
    pub g: Option<Vec<f64>>,
    /// Optional nodal comparison field (distance, obstacle).
    pub d: Option<ScalarField>,
}

impl FieldFrame {
    pub fn stationary(u: ScalarField) -> Self {
        Self { t: None, u, lambda: None, g: None, d: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub rows: usize,
    pub columns: Vec<String>,
}

fn node_average(grid: &Grid, cells: &[f64], n: usize) -> f64 {
    let cs = grid.node_cells(n);
    cs.iter().map(|&c| cells[c]).sum::<f64>() / cs.len() as f64
}

/// 17 significant digits, enough to read back the same f64.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.16e}")
    }
}

pub fn header(grid: &Grid, with_d: bool, with_t: bool) -> Vec<String> {
    let mut h = vec!["x".to_string()];
    if grid.dim() == 2 {
        h.push("y".into());
    }
    h.extend(["u", "lambda", "g", "grad_norm"].map(String::from));
    if with_d {
        h.push("d".into());
    }
    if with_t {
        h.push("t".into());
    }
    h
}

fn check_frames(frames: &[FieldFrame], grid: &Grid) -> Result<()> {
    if frames.is_empty() {
        return Err(invalid("no fields to write"));
    }
    let cells = grid.cell_count();
    for f in frames {
        f.u.check(grid)?;
        if f.lambda.as_ref().is_some_and(|l| l.len() != cells) || f.g.as_ref().is_some_and(|g| g.len() != cells) {
            return Err(crate::error::shape("cell field does not match the grid"));
        }
        if let Some(d) = &f.d {
            d.check(grid)?;
        }
    }
    Ok(())
}

/// Columns and rows of the long-format table: one row per node and frame.
pub fn field_table(frames: &[FieldFrame], grid: &Grid) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    check_frames(frames, grid)?;
    let with_d = frames.iter().any(|f| f.d.is_some());
    let with_t = frames.iter().any(|f| f.t.is_some());
    let mut rows = Vec::with_capacity(frames.len() * grid.node_count());
    for f in frames {
        let grad: Vec<f64> = (0..grid.cell_count()).map(|c| norm2(cell_gradient(grid, &f.u.0, c))).collect();
        for n in 0..grid.node_count() {
            let x = grid.node_coords(n);
            let mut row = vec![x[0]];
            if grid.dim() == 2 {
                row.push(x[1]);
            }
            row.push(f.u.0[n]);
            row.push(f.lambda.as_ref().map_or(f64::NAN, |l| node_average(grid, l, n)));
            row.push(f.g.as_ref().map_or(f64::NAN, |g| node_average(grid, g, n)));
            row.push(node_average(grid, &grad, n));
            if with_d {
                row.push(f.d.as_ref().map_or(f64::NAN, |d| d.0[n]));
            }
            if with_t {
                row.push(f.t.unwrap_or(f64::NAN));
            }
            rows.push(row);
        }
    }
    Ok((header(grid, with_d, with_t), rows))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(BufWriter::new(file))
}

fn entry(path: &Path, rows: usize, columns: Vec<String>) -> ManifestEntry {
    ManifestEntry { path: path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(), rows, columns }
}

/// Writes frames as CSV in long format.
pub fn write_fields(frames: &[FieldFrame], grid: &Grid, path: &Path) -> Result<ManifestEntry> {
    let (columns, rows) = field_table(frames, grid)?;
    let mut w = create(path)?;
    writeln!(w, "{}", columns.join(","))?;
    for r in &rows {
        let line: Vec<String> = r.iter().map(|v| fmt_f64(*v)).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(entry(path, rows.len(), columns))
}

/// Same table as JSON `{"columns": [...], "rows": [[...]]}`; NaN becomes null.
pub fn write_fields_json(frames: &[FieldFrame], grid: &Grid, path: &Path) -> Result<ManifestEntry> {
    let (columns, rows) = field_table(frames, grid)?;
    let body = serde_json::json!({ "columns": columns, "rows": rows });
    let mut w = create(path)?;
    serde_json::to_writer(&mut w, &body).map_err(|e| Error::Io(e.into()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(entry(path, rows.len(), columns))
}

/// Reads a field CSV back as (header, rows).
pub fn read_fields(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut lines = r.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| invalid("empty field file"))??
        .split(',')
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        let row = line
            .split(',')
            .map(|s| s.parse::<f64>().map_err(|e| invalid(format!("bad number `{s}`: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != header.len() {
            return Err(invalid("row length does not match the header"));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// Writes a plain CSV table of preformatted cells.
pub fn write_table(path: &Path, columns: &[String], rows: &[Vec<String>]) -> Result<ManifestEntry> {
    let mut w = create(path)?;
    writeln!(w, "{}", columns.join(","))?;
    for r in rows {
        writeln!(w, "{}", r.join(","))?;
    }
    w.flush()?;
    Ok(entry(path, rows.len(), columns.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_matches_layout() {
        let g1 = Grid::interval(0.0, 1.0, 5).unwrap();
        let g2 = Grid::unit_square(4).unwrap();
        assert_eq!(header(&g1, false, false).join(","), "x,u,lambda,g,grad_norm");
        assert_eq!(header(&g2, true, true).join(","), "x,y,u,lambda,g,grad_norm,d,t");
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid::unit_square(7).unwrap();
        let u = grid.sample_nodes(|x| (x[0] * 3.1).sin() * x[1] / 7.0);
        let g: Vec<f64> = (0..grid.cell_count()).map(|c| 0.1 + c as f64 / 3.0).collect();
        let third = u.scaled(1.0 / 3.0);
        let frames = vec![
            FieldFrame { t: Some(0.0), u: u.clone(), lambda: None, g: Some(g.clone()), d: None },
            FieldFrame { t: Some(0.1), u: third.clone(), lambda: None, g: Some(g), d: None },
        ];
        let path = dir.path().join("f.csv");
        let m = write_fields(&frames, &grid, &path).unwrap();
        assert_eq!(m.rows, 2 * grid.node_count());
        let (h, rows) = read_fields(&path).unwrap();
        assert_eq!(h.join(","), "x,y,u,lambda,g,grad_norm,t");
        assert_eq!(rows.len(), 2 * grid.node_count());
        for (n, r) in rows[..grid.node_count()].iter().enumerate() {
            assert_eq!(r[2].to_bits(), u.0[n].to_bits());
            assert_eq!(r[0].to_bits(), grid.node_coords(n)[0].to_bits());
            assert!(r[3].is_nan());
        }
        let second = &rows[grid.node_count()..];
        for (n, r) in second.iter().enumerate() {
            assert_eq!(r[2].to_bits(), third.0[n].to_bits());
            assert_eq!(r[6], 0.1);
        }
    }

    #[test]
    fn unwritable_path_errors() {
        let grid = Grid::interval(0.0, 1.0, 3).unwrap();
        let f = [FieldFrame::stationary(ScalarField::zeros(&grid))];
        assert!(write_fields(&f, &grid, Path::new("/nonexistent/dir/f.csv")).is_err());
    }
}
