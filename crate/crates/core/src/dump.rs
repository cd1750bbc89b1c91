//! Plain-text field dumps.
//!
//! ```text
//! # nx=<int>
//! # ny=<int>
//! # dx=<real>
//! # dy=<real>
//! # time=<real seconds>
//! <ny lines of nx whitespace-separated values, south row first>
//! ```
//!
//! Values are written with 17 significant digits so that a dump re-reads
//! bit-exactly. Dumps carry no origin; fields read back live on a grid
//! anchored at `(0, 0)`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{CtmError, Result};
use crate::grid::{Grid, ScalarField};

/// 17 significant digits in scientific notation.
pub(crate) fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn write_header(out: &mut String, grid: &Grid) {
    let _ = writeln!(out, "# nx={}", grid.nx);
    let _ = writeln!(out, "# ny={}", grid.ny);
    let _ = writeln!(out, "# dx={}", fmt_real(grid.dx));
    let _ = writeln!(out, "# dy={}", fmt_real(grid.dy));
}

/// Appends `rows` lines of `cols` values taken row-major from `values`.
pub(crate) fn write_block(out: &mut String, values: &[f64], cols: usize, rows: usize) {
    debug_assert_eq!(values.len(), cols * rows);
    for r in 0..rows {
        let line: Vec<String> = values[r * cols..(r + 1) * cols]
            .iter()
            .map(|&v| fmt_real(v))
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
}

pub fn format_field(field: &ScalarField, time: f64) -> String {
    let grid = field.grid();
    let mut out = String::new();
    write_header(&mut out, grid);
    let _ = writeln!(out, "# time={}", fmt_real(time));
    write_block(&mut out, field.values(), grid.nx, grid.ny);
    out
}

pub fn write_field(path: &Path, field: &ScalarField, time: f64) -> Result<()> {
    fs::write(path, format_field(field, time)).map_err(|e| CtmError::io(path, e))
}

/// Line cursor over a dump text that skips blank lines.
pub(crate) struct Lines<'a> {
    origin: &'a str,
    inner: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
}

impl<'a> Lines<'a> {
    pub(crate) fn new(origin: &'a str, text: &'a str) -> Self {
        Self {
            origin,
            inner: text.lines().enumerate().peekable(),
        }
    }

    pub(crate) fn err(&self, line: usize, reason: impl Into<String>) -> CtmError {
        CtmError::Parse {
            path: self.origin.to_string(),
            reason: format!("line {}: {}", line + 1, reason.into()),
        }
    }

    pub(crate) fn err_eof(&self, reason: impl Into<String>) -> CtmError {
        CtmError::Parse {
            path: self.origin.to_string(),
            reason: format!("end of input: {}", reason.into()),
        }
    }

    fn skip_blank(&mut self) {
        while let Some((_, l)) = self.inner.peek() {
            if l.trim().is_empty() {
                self.inner.next();
            } else {
                break;
            }
        }
    }

    pub(crate) fn at_end(&mut self) -> bool {
        self.skip_blank();
        self.inner.peek().is_none()
    }

    /// Reads a `# key=value` header line and returns the raw value.
    pub(crate) fn header(&mut self, key: &str) -> Result<String> {
        self.skip_blank();
        let (n, line) = self
            .inner
            .next()
            .ok_or_else(|| self.err_eof(format!("missing `# {key}=` header")))?;
        let body = line
            .trim()
            .strip_prefix('#')
            .ok_or_else(|| self.err(n, format!("expected `# {key}=...`")))?;
        let (k, v) = body
            .split_once('=')
            .ok_or_else(|| self.err(n, format!("expected `# {key}=...`")))?;
        if k.trim() != key {
            return Err(self.err(n, format!("expected header `{key}`, found `{}`", k.trim())));
        }
        Ok(v.trim().to_string())
    }

    pub(crate) fn header_usize(&mut self, key: &str) -> Result<usize> {
        let v = self.header(key)?;
        v.parse()
            .map_err(|_| self.err(0, format!("`{key}` is not an integer: {v}")))
    }

    pub(crate) fn header_f64(&mut self, key: &str) -> Result<f64> {
        let v = self.header(key)?;
        v.parse()
            .map_err(|_| self.err(0, format!("`{key}` is not a number: {v}")))
    }

    pub(crate) fn block(&mut self, cols: usize, rows: usize) -> Result<Vec<f64>> {
        let mut values = Vec::with_capacity(cols * rows);
        for r in 0..rows {
            self.skip_blank();
            let (n, line) = self
                .inner
                .next()
                .ok_or_else(|| self.err_eof(format!("expected {rows} data rows, found {r}")))?;
            if line.trim_start().starts_with('#') {
                return Err(self.err(n, format!("expected {rows} data rows, found {r}")));
            }
            let before = values.len();
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| self.err(n, format!("bad number `{tok}`")))?;
                values.push(v);
            }
            if values.len() - before != cols {
                return Err(self.err(
                    n,
                    format!("expected {cols} values, found {}", values.len() - before),
                ));
            }
        }
        Ok(values)
    }
}

pub(crate) fn read_grid_header(lines: &mut Lines<'_>) -> Result<Grid> {
    let nx = lines.header_usize("nx")?;
    let ny = lines.header_usize("ny")?;
    let dx = lines.header_f64("dx")?;
    let dy = lines.header_f64("dy")?;
    Grid::new(nx, ny, dx, dy, 0.0, 0.0)
}

/// Parses a dump; returns the field and its time stamp.
pub fn parse_field(origin: &str, text: &str) -> Result<(ScalarField, f64)> {
    let mut lines = Lines::new(origin, text);
    let grid = read_grid_header(&mut lines)?;
    let time = lines.header_f64("time")?;
    let values = lines.block(grid.nx, grid.ny)?;
    if !lines.at_end() {
        return Err(lines.err(0, "trailing content after data block"));
    }
    let field = ScalarField::new(grid, values).map_err(|e| CtmError::Parse {
        path: origin.to_string(),
        reason: e.to_string(),
    })?;
    Ok((field, time))
}

pub fn read_field(path: &Path) -> Result<(ScalarField, f64)> {
    let text = fs::read_to_string(path).map_err(|e| CtmError::io(path, e))?;
    parse_field(&path.display().to_string(), &text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_south_row_first() {
        let g = Grid::new(4, 4, 1.5, 2.0, 0.0, 0.0).unwrap();
        let f = ScalarField::from_fn(g, |x, y| 10.0 * y + x).unwrap();
        let text = format_field(&f, 3600.0);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# nx=4"));
        assert_eq!(lines.next(), Some("# ny=4"));
        assert!(lines.next().unwrap().starts_with("# dx=1.5"));
        assert!(lines.next().unwrap().starts_with("# dy=2.0"));
        assert!(lines.next().unwrap().starts_with("# time=3.6"));
        let first: Vec<f64> = lines
            .next()
            .unwrap()
            .split_whitespace()
            .map(|t| t.parse().unwrap())
            .collect();
        assert_eq!(first, vec![10.75, 12.25, 13.75, 15.25]);
        let first_tok = text.lines().nth(5).unwrap().split_whitespace().next().unwrap();
        // 17 significant digits
        assert_eq!(first_tok, "1.0750000000000000e1");
    }

    #[test]
    fn rejects_malformed() {
        let g = Grid::new(4, 4, 1.0, 1.0, 0.0, 0.0).unwrap();
        let good = format_field(&ScalarField::constant(g, 1.0), 0.0);
        assert!(parse_field("t", &good).is_ok());
        let short: String = good.lines().take(8).collect::<Vec<_>>().join("\n");
        assert!(parse_field("t", &short).is_err());
        let bad = good.replacen("# ny=4", "# ny=x", 1);
        assert!(parse_field("t", &bad).is_err());
        let nan = good.replacen("1.0000000000000000e0", "NaN", 1);
        assert!(parse_field("t", &nan).is_err());
    }

    proptest! {
        #[test]
        fn dump_roundtrip_is_bit_exact(
            vals in proptest::collection::vec(-1e300f64..1e300, 20),
            t in -1e9f64..1e9,
        ) {
            let g = Grid::new(5, 4, 0.1, 1e5, 0.0, 0.0).unwrap();
            let f = ScalarField::new(g, vals).unwrap();
            let (back, tb) = parse_field("mem", &format_field(&f, t)).unwrap();
            prop_assert_eq!(tb.to_bits(), t.to_bits());
            for (a, b) in f.values().iter().zip(back.values()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
