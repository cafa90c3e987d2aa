//! CSV reading and writing for point clouds and diagnostic tables.
//!
//! Format: a mandatory header row, then one point per row, comma
//! separated, decimal points (never locale-dependent). Floats are written
//! with the shortest representation that round-trips.

use std::fmt::Write as _;
use std::path::Path;

use otflow::PointMatrix;

use crate::fail::{CliResult, Failure};

pub fn read_points(path: &Path) -> CliResult<PointMatrix> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    parse_points(&text).map_err(|m| Failure::Data(format!("{}: {m}", path.display())))
}

/// Parse a point CSV. The first non-empty line is always the header; data
/// rows are numbered from 1 in error messages.
pub fn parse_points(text: &str) -> Result<PointMatrix, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or("empty file")?;
    let d = header.split(',').count();
    let mut pts = PointMatrix::with_capacity(0, d);
    let mut vals = Vec::with_capacity(d);
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        vals.clear();
        for field in line.split(',') {
            let field = field.trim();
            let v: f64 = field
                .parse()
                .map_err(|_| format!("row {row}: not a number: {field:?}"))?;
            if !v.is_finite() {
                return Err(format!("row {row}: non-finite value"));
            }
            vals.push(v);
        }
        if vals.len() != d {
            return Err(format!("row {row}: expected {d} columns, got {}", vals.len()));
        }
        pts.push_row(&vals);
    }
    if pts.is_empty() {
        return Err("no data rows".into());
    }
    Ok(pts)
}

pub fn point_header(d: usize) -> String {
    let mut s = String::new();
    for i in 0..d {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "x{i}");
    }
    s
}

pub fn points_to_csv(pts: &PointMatrix) -> String {
    let mut s = point_header(pts.dim());
    s.push('\n');
    for r in pts.rows() {
        push_row(&mut s, r);
    }
    s
}

pub fn push_row(s: &mut String, vals: &[f64]) {
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{v}");
    }
    s.push('\n');
}

pub fn write_points(path: &Path, pts: &PointMatrix) -> CliResult<()> {
    write_text(path, &points_to_csv(pts))
}

pub fn write_text(path: &Path, content: &str) -> CliResult<()> {
    std::fs::write(path, content)
        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

pub fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_values() {
        let mut pts = PointMatrix::with_capacity(3, 2);
        pts.push_row(&[0.1, -2.5e-17]);
        pts.push_row(&[1.0 / 3.0, f64::MIN_POSITIVE]);
        pts.push_row(&[-0.0, 12345.678901234567]);
        let parsed = parse_points(&points_to_csv(&pts)).unwrap();
        assert_eq!(pts.as_flat(), parsed.as_flat());
    }

    #[test]
    fn bad_row_is_named() {
        let err = parse_points("x0\n1.0\n2.0\nnope\n").unwrap_err();
        assert!(err.contains("row 3"), "{err}");
    }

    #[test]
    fn missing_column_is_named() {
        let err = parse_points("x0,x1\n1.0,2.0\n3.0\n").unwrap_err();
        assert!(err.contains("row 2") && err.contains("expected 2"), "{err}");
    }

    #[test]
    fn non_finite_rejected() {
        let err = parse_points("x0\nNaN\n").unwrap_err();
        assert!(err.contains("non-finite"), "{err}");
    }

    #[test]
    fn empty_data_rejected() {
        assert_eq!(parse_points("x0\n").unwrap_err(), "no data rows");
    }
}
