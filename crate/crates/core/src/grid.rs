//! Uniform planar channel grid, cell-averaged scalar fields and the
//! inner-product algebra used by transport, adjoint and inversion.
//!
//! The channel is periodic in x and closed (no-flux walls) in y. Cell
//! values are stored row-major starting from the southernmost row, so the
//! flat index of cell `(i, j)` is `j * nx + i`. Every reduction walks that
//! flat order once, which makes repeated evaluations bit-identical.

use crate::error::{CtmError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    pub x0: f64,
    pub y0: f64,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, dx: f64, dy: f64, x0: f64, y0: f64) -> Result<Self> {
        if nx < 4 {
            return Err(CtmError::invalid("nx", format!("need at least 4 cells, got {nx}")));
        }
        if ny < 4 {
            return Err(CtmError::invalid("ny", format!("need at least 4 cells, got {ny}")));
        }
        if !(dx.is_finite() && dx > 0.0) {
            return Err(CtmError::invalid("dx", format!("must be positive, got {dx}")));
        }
        if !(dy.is_finite() && dy > 0.0) {
            return Err(CtmError::invalid("dy", format!("must be positive, got {dy}")));
        }
        if !(x0.is_finite() && y0.is_finite()) {
            return Err(CtmError::invalid("x0/y0", "origin must be finite"));
        }
        Ok(Self { nx, ny, dx, dy, x0, y0 })
    }

    /// Grid covering `[x0, x0 + lx] x [y0, y0 + ly]` with `nx * ny` cells.
    pub fn from_extent(nx: usize, ny: usize, lx: f64, ly: f64, x0: f64, y0: f64) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(CtmError::invalid("nx/ny", "cell counts must be nonzero"));
        }
        Self::new(nx, ny, lx / nx as f64, ly / ny as f64, x0, y0)
    }

    pub fn lx(&self) -> f64 {
        self.nx as f64 * self.dx
    }

    pub fn ly(&self) -> f64 {
        self.ny as f64 * self.dy
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_area(&self) -> f64 {
        self.dx * self.dy
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.x0 + (i as f64 + 0.5) * self.dx,
            self.y0 + (j as f64 + 0.5) * self.dy,
        )
    }

    /// Grids match when their shape and spacing agree; the origin only
    /// shifts coordinates and is ignored so that dumps (which carry no
    /// origin) can be compared with configured grids.
    pub fn same_shape(&self, other: &Grid) -> bool {
        self.nx == other.nx && self.ny == other.ny && self.dx == other.dx && self.dy == other.dy
    }

    pub fn check_same(&self, other: &Grid) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(CtmError::Shape(format!(
                "grid {}x{} (dx={}, dy={}) vs {}x{} (dx={}, dy={})",
                self.nx, self.ny, self.dx, self.dy, other.nx, other.ny, other.dx, other.dy
            )))
        }
    }
}

/// Cell-averaged values on a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(CtmError::Shape(format!(
                "expected {} values for a {}x{} grid, got {}",
                grid.len(),
                grid.nx,
                grid.ny,
                values.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(CtmError::invalid(
                "values",
                format!("non-finite value at cell {k}"),
            ));
        }
        Ok(Self { grid, values })
    }

    /// Internal constructor for results of operations that cannot produce
    /// non-finite values from finite inputs.
    pub(crate) fn from_parts(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        Self::from_parts(grid, vec![value; grid.len()])
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.len());
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let (x, y) = grid.cell_center(i, j);
                values.push(f(x, y));
            }
        }
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }


    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.idx(i, j)]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self + alpha * other`.
    pub fn add_scaled(&self, alpha: f64, other: &ScalarField) -> Result<ScalarField> {
        self.grid.check_same(&other.grid)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + alpha * b)
            .collect();
        Ok(Self::from_parts(self.grid, values))
    }

    pub fn sub(&self, other: &ScalarField) -> Result<ScalarField> {
        self.add_scaled(-1.0, other)
    }

    pub fn scale(&self, alpha: f64) -> ScalarField {
        Self::from_parts(self.grid, self.values.iter().map(|v| alpha * v).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        Self::from_parts(self.grid, self.values.iter().map(|&v| f(v)).collect())
    }

    /// Sum of raw cell values times the cell area.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_area()
    }
}

/// Rectangular instantaneous release on top of a constant background.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlumeSpec {
    pub center: (f64, f64),
    pub side_x: f64,
    pub side_y: f64,
    pub background: f64,
    pub excess_factor: f64,
}

impl PlumeSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.side_x.is_finite() && self.side_x > 0.0) {
            return Err(CtmError::invalid("side_x", "must be positive"));
        }
        if !(self.side_y.is_finite() && self.side_y > 0.0) {
            return Err(CtmError::invalid("side_y", "must be positive"));
        }
        if !(self.excess_factor.is_finite() && self.excess_factor > 1.0) {
            return Err(CtmError::invalid(
                "excess_factor",
                format!("must exceed 1, got {}", self.excess_factor),
            ));
        }
        if !self.background.is_finite() {
            return Err(CtmError::invalid("background", "must be finite"));
        }
        if !(self.center.0.is_finite() && self.center.1.is_finite()) {
            return Err(CtmError::invalid("center", "must be finite"));
        }
        Ok(())
    }

    pub fn peak(&self) -> f64 {
        self.background * self.excess_factor
    }

    /// Concentration excess of the plume over the background.
    pub fn excess(&self) -> f64 {
        self.peak() - self.background
    }

    pub fn area(&self) -> f64 {
        self.side_x * self.side_y
    }

    fn check_fits(&self, grid: &Grid) -> Result<()> {
        self.validate()?;
        let (cx, cy) = self.center;
        let (hx, hy) = (0.5 * self.side_x, 0.5 * self.side_y);
        let inside = cx - hx >= grid.x0
            && cx + hx <= grid.x0 + grid.lx()
            && cy - hy >= grid.y0
            && cy + hy <= grid.y0 + grid.ly();
        if !inside {
            return Err(CtmError::Domain(format!(
                "plume [{}, {}] x [{}, {}] not inside domain [{}, {}] x [{}, {}]",
                cx - hx,
                cx + hx,
                cy - hy,
                cy + hy,
                grid.x0,
                grid.x0 + grid.lx(),
                grid.y0,
                grid.y0 + grid.ly()
            )));
        }
        if self.side_x < 2.0 * grid.dx || self.side_y < 2.0 * grid.dy {
            return Err(CtmError::Resolution(format!(
                "plume {} m x {} m spans fewer than 2 cells of {} m x {} m",
                self.side_x, self.side_y, grid.dx, grid.dy
            )));
        }
        Ok(())
    }

    /// Cells whose centers lie in the half-open rectangle
    /// `[cx - sx/2, cx + sx/2) x [cy - sy/2, cy + sy/2)`.
    pub fn footprint(&self, grid: &Grid) -> Result<Vec<bool>> {
        self.check_fits(grid)?;
        let (cx, cy) = self.center;
        let (xlo, xhi) = (cx - 0.5 * self.side_x, cx + 0.5 * self.side_x);
        let (ylo, yhi) = (cy - 0.5 * self.side_y, cy + 0.5 * self.side_y);
        let mut mask = Vec::with_capacity(grid.len());
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let (x, y) = grid.cell_center(i, j);
                mask.push(x >= xlo && x < xhi && y >= ylo && y < yhi);
            }
        }
        Ok(mask)
    }
}

pub fn make_plume(grid: &Grid, spec: &PlumeSpec) -> Result<ScalarField> {
    let mask = spec.footprint(grid)?;
    let values = mask
        .iter()
        .map(|&inside| if inside { spec.peak() } else { spec.background })
        .collect();
    ScalarField::new(*grid, values)
}

/// Area-weighted L2 inner product `sum a_ij b_ij dx dy`.
pub fn inner_product(a: &ScalarField, b: &ScalarField) -> Result<f64> {
    a.grid.check_same(&b.grid)?;
    let mut acc = 0.0;
    for (x, y) in a.values.iter().zip(&b.values) {
        acc += x * y;
    }
    Ok(acc * a.grid.cell_area())
}

pub fn l2_norm(a: &ScalarField) -> f64 {
    let mut acc = 0.0;
    for x in &a.values {
        acc += x * x;
    }
    (acc * a.grid.cell_area()).sqrt()
}

/// Excess mass above `background`: `sum max(c - background, 0) dx dy`.
pub fn total_mass(c: &ScalarField, background: f64) -> f64 {
    let mut acc = 0.0;
    for &v in &c.values {
        acc += (v - background).max(0.0);
    }
    acc * c.grid.cell_area()
}

/// Relative L2 error in percent, normalized by the excess of the truth
/// over the constant background.
pub fn rel_l2_error(estimate: &ScalarField, truth: &ScalarField, background: f64) -> Result<f64> {
    let reference = l2_norm(&truth.map(|v| v - background));
    if reference == 0.0 {
        return Err(CtmError::DegenerateReference(
            "truth equals the background everywhere".into(),
        ));
    }
    let diff = estimate.sub(truth)?;
    Ok(100.0 * l2_norm(&diff) / reference)
}
