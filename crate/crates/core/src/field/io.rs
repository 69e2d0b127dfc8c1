//! CSV field files.
//!
//! Header `x,y,<t_1>,...,<t_T>`; each following row `x,y,v_1,...,v_T`. Rows
//! may come in any order but must cover a complete rectangular lattice exactly
//! once. Values are written with Rust's shortest round-trip formatting, so
//! write-then-load reproduces every value bit for bit.

use std::io::{BufRead, BufReader, Read, Write};

use nalgebra::DMatrix;

use super::{check_time_grid, FunctionalField};
use crate::error::{Error, Result};
use crate::grid::SpatialGrid;

/// Relative tolerance (in units of the spacing) for snapping coordinates to
/// lattice positions.
const LATTICE_TOLERANCE: f64 = 1e-6;

struct Row {
    line: usize,
    x: f64,
    y: f64,
    values: Vec<f64>,
}

fn parse_number(text: &str, line: usize, column: usize) -> Result<f64> {
    let v: f64 = text
        .trim()
        .parse()
        .map_err(|_| Error::parse(line, column, format!("not a number: {:?}", text.trim())))?;
    if !v.is_finite() {
        return Err(Error::parse(line, column, format!("non-finite value {:?}", text.trim())));
    }
    Ok(v)
}

/// Read a field from CSV text.
pub fn load_field<R: Read>(source: R) -> Result<FunctionalField> {
    let reader = BufReader::new(source);
    let mut lines = reader.lines().enumerate();

    let (times, header_line) = loop {
        let Some((idx, line)) = lines.next() else {
            return Err(Error::parse(1, 1, "empty file"));
        };
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() < 3 {
            return Err(Error::parse(lineno, 1, "header needs x, y and at least one time column"));
        }
        if cells[0].trim() != "x" {
            return Err(Error::parse(lineno, 1, "header must start with `x`"));
        }
        if cells[1].trim() != "y" {
            return Err(Error::parse(lineno, 2, "second header column must be `y`"));
        }
        let times = cells[2..]
            .iter()
            .enumerate()
            .map(|(k, c)| parse_number(c, lineno, k + 3))
            .collect::<Result<Vec<f64>>>()?;
        break (times, lineno);
    };
    check_time_grid(&times).map_err(|e| Error::parse(header_line, 3, e.to_string()))?;

    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != times.len() + 2 {
            return Err(Error::parse(
                lineno,
                cells.len().min(times.len() + 2) + 1,
                format!("expected {} columns, found {}", times.len() + 2, cells.len()),
            ));
        }
        let x = parse_number(cells[0], lineno, 1)?;
        let y = parse_number(cells[1], lineno, 2)?;
        let values = cells[2..]
            .iter()
            .enumerate()
            .map(|(k, c)| parse_number(c, lineno, k + 3))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(Row {
            line: lineno,
            x,
            y,
            values,
        });
    }
    if rows.is_empty() {
        return Err(Error::parse(header_line + 1, 1, "no data rows"));
    }

    let grid = reconstruct_grid(&rows)?;
    let t = times.len();
    let mut values = DMatrix::<f64>::zeros(grid.len(), t);
    let (ox, oy) = grid.origin();
    for row in &rows {
        let ix = ((row.x - ox) / grid.spacing()).round() as usize;
        let iy = ((row.y - oy) / grid.spacing()).round() as usize;
        let i = grid.index(ix, iy);
        for (j, v) in row.values.iter().enumerate() {
            values[(i, j)] = *v;
        }
    }
    FunctionalField::new(grid, times, values).map_err(|e| Error::parse(header_line, 1, e.to_string()))
}

fn distinct_sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| a.total_cmp(b));
    v.dedup();
    v
}

fn reconstruct_grid(rows: &[Row]) -> Result<SpatialGrid> {
    let xs = distinct_sorted(rows.iter().map(|r| r.x).collect());
    let ys = distinct_sorted(rows.iter().map(|r| r.y).collect());
    let min_gap = |v: &[f64]| v.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let spacing = match (xs.len(), ys.len()) {
        (1, 1) => 1.0,
        (1, _) => min_gap(&ys),
        (_, 1) => min_gap(&xs),
        _ => min_gap(&xs).min(min_gap(&ys)),
    };
    let origin = (xs[0], ys[0]);
    let tol = LATTICE_TOLERANCE * spacing;
    let snap = |value: f64, base: f64, column: usize, line: usize| -> Result<usize> {
        let k = ((value - base) / spacing).round();
        if ((value - base) - k * spacing).abs() > tol {
            return Err(Error::parse(line, column, format!(
                "coordinate {value} is not on a lattice with spacing {spacing}"
            )));
        }
        Ok(k as usize)
    };
    let mut nx = 0;
    let mut ny = 0;
    let mut cells = std::collections::HashSet::new();
    for r in rows {
        let ix = snap(r.x, origin.0, 1, r.line)?;
        let iy = snap(r.y, origin.1, 2, r.line)?;
        if !cells.insert((ix, iy)) {
            return Err(Error::parse(r.line, 1, format!("duplicate location ({}, {})", r.x, r.y)));
        }
        nx = nx.max(ix + 1);
        ny = ny.max(iy + 1);
    }
    if nx * ny != rows.len() {
        let last = rows.last().map(|r| r.line).unwrap_or(2);
        return Err(Error::parse(last + 1, 1, format!(
            "incomplete lattice: {} rows for a {nx}x{ny} grid",
            rows.len()
        )));
    }
    // the smallest gap carries rounding from a single difference; the full
    // span averages it over the longest axis
    let spacing = if nx >= ny && nx > 1 {
        (xs[xs.len() - 1] - origin.0) / (nx - 1) as f64
    } else if ny > 1 {
        (ys[ys.len() - 1] - origin.1) / (ny - 1) as f64
    } else {
        spacing
    };
    SpatialGrid::with_origin(nx, ny, spacing, origin)
}

/// Write a field as CSV, one row per location in grid order.
pub fn write_field<W: Write>(field: &FunctionalField, mut sink: W) -> Result<()> {
    let mut header = String::from("x,y");
    for t in field.times() {
        header.push(',');
        header.push_str(&t.to_string());
    }
    writeln!(sink, "{header}")?;
    let grid = field.grid();
    let mut line = String::new();
    for i in 0..field.n_locations() {
        line.clear();
        let (x, y) = grid.location(i);
        line.push_str(&x.to_string());
        line.push(',');
        line.push_str(&y.to_string());
        for v in field.values().row(i).iter() {
            line.push(',');
            line.push_str(&v.to_string());
        }
        writeln!(sink, "{line}")?;
    }
    Ok(())
}
