//! Divergence-free wind fields on the staggered (C-grid) faces of a
//! [`Grid`].
//!
//! Analytic winds are derived from a streamfunction evaluated at cell
//! corners: `u = -dpsi/dy` on x-faces and `v = dpsi/dx` on y-faces. The
//! discrete divergence of every cell is then a telescoping sum of the four
//! corner values and vanishes up to rounding. File winds are stored as
//! snapshots and interpolated linearly in time, which keeps them
//! divergence-free as well.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dump::{self, Lines};
use crate::error::{CtmError, Result};
use crate::grid::Grid;

/// Relative divergence tolerance accepted for any sampled or loaded wind.
pub const DIVERGENCE_TOL: f64 = 1e-12;

/// Velocities on cell faces.
///
/// `u` has `(nx + 1) * ny` entries, index `j * (nx + 1) + i`, the face at
/// `x0 + i dx`; faces `0` and `nx` are the same periodic face. `v` has
/// `nx * (ny + 1)` entries, index `j * nx + i`, the face at `y0 + j dy`;
/// rows `0` and `ny` are the channel walls.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceVelocities {
    grid: Grid,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl FaceVelocities {
    pub fn new(grid: Grid, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if u.len() != (grid.nx + 1) * grid.ny || v.len() != grid.nx * (grid.ny + 1) {
            return Err(CtmError::Shape(format!(
                "face arrays {} / {} do not match a {}x{} grid",
                u.len(),
                v.len(),
                grid.nx,
                grid.ny
            )));
        }
        if u.iter().chain(&v).any(|s| !s.is_finite()) {
            return Err(CtmError::invalid("faces", "non-finite face velocity"));
        }
        Ok(Self { grid, u, v })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            u: vec![0.0; (grid.nx + 1) * grid.ny],
            v: vec![0.0; grid.nx * (grid.ny + 1)],
        }
    }

    /// Uniform zonal flow `(speed, 0)`.
    pub fn uniform(grid: Grid, speed: f64) -> Self {
        let mut f = Self::zeros(grid);
        f.u.iter_mut().for_each(|u| *u = speed);
        f
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn u_faces(&self) -> &[f64] {
        &self.u
    }

    pub fn v_faces(&self) -> &[f64] {
        &self.v
    }

    #[inline]
    pub fn u(&self, i: usize, j: usize) -> f64 {
        self.u[j * (self.grid.nx + 1) + i]
    }

    #[inline]
    pub fn v(&self, i: usize, j: usize) -> f64 {
        self.v[j * self.grid.nx + i]
    }

    pub fn negated(&self) -> Self {
        Self {
            grid: self.grid,
            u: self.u.iter().map(|s| -s).collect(),
            v: self.v.iter().map(|s| -s).collect(),
        }
    }

    /// `(1 - w) * a + w * b` face by face.
    pub fn lerp(a: &Self, b: &Self, w: f64) -> Result<Self> {
        a.grid.check_same(&b.grid)?;
        let mix = |x: &[f64], y: &[f64]| -> Vec<f64> {
            x.iter().zip(y).map(|(p, q)| (1.0 - w) * p + w * q).collect()
        };
        Ok(Self {
            grid: a.grid,
            u: mix(&a.u, &b.u),
            v: mix(&a.v, &b.v),
        })
    }

    pub fn max_speed(&self) -> f64 {
        self.u
            .iter()
            .chain(&self.v)
            .fold(0.0f64, |m, s| m.max(s.abs()))
    }

    /// Signed discrete divergence `(du)/dx + (dv)/dy` of every cell (s^-1).
    pub fn divergence(&self) -> Vec<f64> {
        let g = &self.grid;
        let mut out = Vec::with_capacity(g.len());
        for j in 0..g.ny {
            for i in 0..g.nx {
                out.push(
                    (self.u(i + 1, j) - self.u(i, j)) / g.dx
                        + (self.v(i, j + 1) - self.v(i, j)) / g.dy,
                );
            }
        }
        out
    }

    /// Largest cell flux imbalance relative to the largest face flux.
    pub fn max_relative_divergence(&self) -> f64 {
        let g = &self.grid;
        let max_u = self.u.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        let max_v = self.v.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        let scale = (max_u * g.dy).max(max_v * g.dx);
        if scale == 0.0 {
            return 0.0;
        }
        let mut worst = 0.0f64;
        for j in 0..g.ny {
            for i in 0..g.nx {
                let imbalance = (self.u(i + 1, j) - self.u(i, j)) * g.dy
                    + (self.v(i, j + 1) - self.v(i, j)) * g.dx;
                worst = worst.max(imbalance.abs());
            }
        }
        worst / scale
    }

    /// Courant number per unit time step (s^-1): for every cell the sum of
    /// outflow Courant numbers through its two x-faces, and separately its
    /// two y-faces; the maximum over cells and directions. It bounds
    /// `max(|u|/dx, |v|/dy)` from above.
    pub fn courant_rate(&self) -> f64 {
        let g = &self.grid;
        let mut worst = 0.0f64;
        for j in 0..g.ny {
            for i in 0..g.nx {
                let out_x = self.u(i + 1, j).max(0.0) + (-self.u(i, j)).max(0.0);
                let out_y = self.v(i, j + 1).max(0.0) + (-self.v(i, j)).max(0.0);
                worst = worst.max(out_x / g.dx).max(out_y / g.dy);
            }
        }
        worst
    }

    pub fn courant(&self, dt: f64) -> f64 {
        self.courant_rate() * dt
    }

    fn periodic_mismatch(&self) -> f64 {
        let nx = self.grid.nx;
        (0..self.grid.ny)
            .map(|j| (self.u(nx, j) - self.u(0, j)).abs())
            .fold(0.0, f64::max)
    }

    fn max_wall_speed(&self) -> f64 {
        let g = &self.grid;
        (0..g.nx)
            .map(|i| self.v(i, 0).abs().max(self.v(i, g.ny).abs()))
            .fold(0.0, f64::max)
    }

    /// Checks the invariants every wind sample must satisfy.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let scale = self.max_speed();
        let div = self.max_relative_divergence();
        if div > DIVERGENCE_TOL {
            return Err(format!("divergence {div:e} exceeds {DIVERGENCE_TOL:e} of max flux"));
        }
        if self.max_wall_speed() > DIVERGENCE_TOL * scale {
            return Err("nonzero normal velocity on a channel wall".into());
        }
        if self.periodic_mismatch() > DIVERGENCE_TOL * scale {
            return Err("u on the periodic faces 0 and nx differs".into());
        }
        Ok(())
    }
}

/// A streamfunction `psi(x, y, t)` (m^2 s^-1).
pub trait Streamfunction {
    fn psi(&self, x: f64, y: f64, t: f64) -> f64;
}

impl<F: Fn(f64, f64, f64) -> f64> Streamfunction for F {
    fn psi(&self, x: f64, y: f64, t: f64) -> f64 {
        self(x, y, t)
    }
}

fn corner_values(psi: &impl Streamfunction, grid: &Grid, t: f64) -> Vec<f64> {
    let (nx, ny) = (grid.nx, grid.ny);
    let mut corners = vec![0.0; (nx + 1) * (ny + 1)];
    for j in 0..=ny {
        let y = grid.y0 + j as f64 * grid.dy;
        for i in 0..nx {
            let x = grid.x0 + i as f64 * grid.dx;
            corners[j * (nx + 1) + i] = psi.psi(x, y, t);
        }
        // the periodic corner is the same point as corner 0
        corners[j * (nx + 1) + nx] = corners[j * (nx + 1)];
    }
    corners
}

fn faces_from_corners(grid: &Grid, corners: &[f64]) -> FaceVelocities {
    let (nx, ny) = (grid.nx, grid.ny);
    let c = |i: usize, j: usize| corners[j * (nx + 1) + i];
    let mut u = Vec::with_capacity((nx + 1) * ny);
    for j in 0..ny {
        for i in 0..=nx {
            u.push(-(c(i, j + 1) - c(i, j)) / grid.dy);
        }
    }
    let mut v = Vec::with_capacity(nx * (ny + 1));
    for j in 0..=ny {
        for i in 0..nx {
            v.push((c(i + 1, j) - c(i, j)) / grid.dx);
        }
    }
    FaceVelocities { grid: *grid, u, v }
}

/// Staggered face velocities from corner differences of `psi` at time `t`.
///
/// No wall condition is imposed here: a streamfunction that is not
/// constant along the channel walls yields nonzero wall-normal flow.
pub fn winds_from_streamfunction(psi: &impl Streamfunction, grid: &Grid, t: f64) -> FaceVelocities {
    faces_from_corners(grid, &corner_values(psi, grid, t))
}

/// Bickley-type meandering jet with travelling Rossby-wave perturbations.
#[derive(Debug, Clone, PartialEq)]
pub struct BickleyParams {
    /// Peak jet speed (m s^-1).
    pub u0: f64,
    /// Jet half-width (m).
    pub length: f64,
    /// Perturbation amplitudes, one per mode.
    pub eps: Vec<f64>,
    /// Phase speeds as fractions of `u0`, one per mode.
    pub c_ratio: Vec<f64>,
}

impl Default for BickleyParams {
    fn default() -> Self {
        Self {
            u0: 62.66,
            length: 1.77e6,
            eps: vec![0.075, 0.4, 0.3],
            c_ratio: vec![0.1446, 0.205, 0.461],
        }
    }
}

impl BickleyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.u0.is_finite()) {
            return Err(CtmError::invalid("u0", "must be finite"));
        }
        if !(self.length.is_finite() && self.length > 0.0) {
            return Err(CtmError::invalid("length", "must be positive"));
        }
        if self.eps.len() != self.c_ratio.len() {
            return Err(CtmError::invalid(
                "eps",
                format!(
                    "{} amplitudes but {} phase speeds",
                    self.eps.len(),
                    self.c_ratio.len()
                ),
            ));
        }
        if self.eps.iter().chain(&self.c_ratio).any(|v| !v.is_finite()) {
            return Err(CtmError::invalid("eps/c", "must be finite"));
        }
        Ok(())
    }
}

/// Analytic generators.
#[derive(Debug, Clone, PartialEq)]
pub enum AnalyticFlow {
    /// `psi = -speed * (y - y0)`.
    Uniform { speed: f64, y0: f64 },
    /// `psi = -rate * (y - yc)^2 / 2`, i.e. `u = rate * (y - yc)`.
    Shear { rate: f64, y_center: f64 },
    Bickley(BickleyJet),
}

/// Bickley jet bound to a channel: mode wavenumbers fit the periodic length
/// and the perturbation envelope vanishes on the walls.
#[derive(Debug, Clone, PartialEq)]
pub struct BickleyJet {
    pub params: BickleyParams,
    y_center: f64,
    wall_envelope: f64,
    k: Vec<f64>,
    c: Vec<f64>,
}

impl BickleyJet {
    pub fn new(params: BickleyParams, grid: &Grid) -> Result<Self> {
        params.validate()?;
        let half = 0.5 * grid.ly();
        let y_center = grid.y0 + half;
        let wall_envelope = sech2(half / params.length);
        let k = (1..=params.eps.len())
            .map(|n| 2.0 * PI * n as f64 / grid.lx())
            .collect();
        let c = params.c_ratio.iter().map(|r| r * params.u0).collect();
        Ok(Self {
            params,
            y_center,
            wall_envelope,
            k,
            c,
        })
    }

    fn psi(&self, x: f64, y: f64, t: f64) -> f64 {
        let p = &self.params;
        let eta = (y - self.y_center) / p.length;
        let mut waves = 0.0;
        for n in 0..self.k.len() {
            waves += p.eps[n] * (self.k[n] * (x - self.c[n] * t)).cos();
        }
        -p.u0 * p.length * eta.tanh() + p.u0 * p.length * (sech2(eta) - self.wall_envelope) * waves
    }

    fn velocity(&self, x: f64, y: f64, t: f64) -> (f64, f64) {
        let p = &self.params;
        let eta = (y - self.y_center) / p.length;
        let s2 = sech2(eta);
        let mut waves = 0.0;
        let mut dwaves_dx = 0.0;
        for n in 0..self.k.len() {
            let phase = self.k[n] * (x - self.c[n] * t);
            waves += p.eps[n] * phase.cos();
            dwaves_dx -= p.eps[n] * self.k[n] * phase.sin();
        }
        let u = p.u0 * s2 + 2.0 * p.u0 * s2 * eta.tanh() * waves;
        let v = p.u0 * p.length * (s2 - self.wall_envelope) * dwaves_dx;
        (u, v)
    }
}

fn sech2(z: f64) -> f64 {
    let c = z.cosh();
    1.0 / (c * c)
}

impl Streamfunction for AnalyticFlow {
    fn psi(&self, x: f64, y: f64, t: f64) -> f64 {
        match self {
            AnalyticFlow::Uniform { speed, y0 } => -speed * (y - y0),
            AnalyticFlow::Shear { rate, y_center } => -0.5 * rate * (y - y_center).powi(2),
            AnalyticFlow::Bickley(jet) => jet.psi(x, y, t),
        }
    }
}

impl AnalyticFlow {
    pub fn velocity(&self, x: f64, y: f64, t: f64) -> (f64, f64) {
        match self {
            AnalyticFlow::Uniform { speed, .. } => (*speed, 0.0),
            AnalyticFlow::Shear { rate, y_center } => (rate * (y - y_center), 0.0),
            AnalyticFlow::Bickley(jet) => jet.velocity(x, y, t),
        }
    }
}

/// Generator selection plus parameters, as read from configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum WindSpec {
    Uniform { speed: f64 },
    /// Linear shear about the channel center.
    Shear { rate: f64 },
    BickleyJet(BickleyParams),
    FromFile(std::path::PathBuf),
}

impl WindSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            WindSpec::Uniform { .. } => "uniform",
            WindSpec::Shear { .. } => "shear",
            WindSpec::BickleyJet(_) => "bickley_jet",
            WindSpec::FromFile(_) => "from_file",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    pub faces: FaceVelocities,
}

#[derive(Debug, Clone, PartialEq)]
enum WindSource {
    Analytic(AnalyticFlow),
    Snapshots(Vec<Snapshot>),
}

/// Time-dependent wind on a grid. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct WindField {
    grid: Grid,
    source: WindSource,
}

pub fn make_wind(spec: &WindSpec, grid: &Grid) -> Result<WindField> {
    let flow = match spec {
        WindSpec::Uniform { speed } => {
            if !speed.is_finite() {
                return Err(CtmError::invalid("speed", "must be finite"));
            }
            AnalyticFlow::Uniform {
                speed: *speed,
                y0: grid.y0,
            }
        }
        WindSpec::Shear { rate } => {
            if !rate.is_finite() {
                return Err(CtmError::invalid("rate", "must be finite"));
            }
            AnalyticFlow::Shear {
                rate: *rate,
                y_center: grid.y0 + 0.5 * grid.ly(),
            }
        }
        WindSpec::BickleyJet(params) => AnalyticFlow::Bickley(BickleyJet::new(params.clone(), grid)?),
        WindSpec::FromFile(path) => {
            let wind = load_wind_file(path)?;
            wind.grid.check_same(grid)?;
            return Ok(WindField {
                grid: *grid,
                source: wind.source,
            });
        }
    };
    Ok(WindField::analytic(*grid, flow))
}

impl WindField {
    pub fn analytic(grid: Grid, flow: AnalyticFlow) -> Self {
        Self {
            grid,
            source: WindSource::Analytic(flow),
        }
    }

    /// Builds a snapshot wind; snapshots must be strictly increasing in time
    /// and individually valid.
    pub fn from_snapshots(grid: Grid, snapshots: Vec<Snapshot>) -> Result<Self> {
        if snapshots.is_empty() {
            return Err(CtmError::Ingestion {
                snapshot: 0,
                reason: "no snapshots".into(),
            });
        }
        for (k, s) in snapshots.iter().enumerate() {
            if !s.time.is_finite() {
                return Err(CtmError::Ingestion {
                    snapshot: k,
                    reason: "non-finite time".into(),
                });
            }
            if k > 0 && s.time <= snapshots[k - 1].time {
                return Err(CtmError::Ingestion {
                    snapshot: k,
                    reason: format!(
                        "time {} not after previous snapshot time {}",
                        s.time,
                        snapshots[k - 1].time
                    ),
                });
            }
            if !s.faces.grid.same_shape(&grid) {
                return Err(CtmError::Ingestion {
                    snapshot: k,
                    reason: "grid shape mismatch".into(),
                });
            }
            s.faces
                .validate()
                .map_err(|reason| CtmError::Ingestion { snapshot: k, reason })?;
        }
        Ok(Self {
            grid,
            source: WindSource::Snapshots(snapshots),
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn kind_name(&self) -> &'static str {
        match &self.source {
            WindSource::Analytic(AnalyticFlow::Uniform { .. }) => "uniform",
            WindSource::Analytic(AnalyticFlow::Shear { .. }) => "shear",
            WindSource::Analytic(AnalyticFlow::Bickley(_)) => "bickley_jet",
            WindSource::Snapshots(_) => "from_file",
        }
    }

    pub fn snapshot_count(&self) -> usize {
        match &self.source {
            WindSource::Analytic(_) => 0,
            WindSource::Snapshots(s) => s.len(),
        }
    }

    /// Times for which the wind is defined.
    pub fn time_range(&self) -> (f64, f64) {
        match &self.source {
            WindSource::Analytic(_) => (f64::NEG_INFINITY, f64::INFINITY),
            WindSource::Snapshots(s) => (s[0].time, s[s.len() - 1].time),
        }
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        let (start, end) = self.time_range();
        if t.is_nan() || t < start || t > end {
            return Err(CtmError::TimeRange { t, start, end });
        }
        Ok(())
    }

    fn bracket(snaps: &[Snapshot], t: f64) -> (usize, f64) {
        if snaps.len() == 1 {
            return (0, 0.0);
        }
        // index of the last snapshot with time <= t, capped so that k + 1 exists
        let k = snaps
            .partition_point(|s| s.time <= t)
            .saturating_sub(1)
            .min(snaps.len() - 2);
        let (ta, tb) = (snaps[k].time, snaps[k + 1].time);
        (k, (t - ta) / (tb - ta))
    }

    pub fn sample(&self, t: f64) -> Result<FaceVelocities> {
        self.check_time(t)?;
        match &self.source {
            WindSource::Analytic(flow) => {
                let mut corners = corner_values(flow, &self.grid, t);
                // analytic generators have psi constant along each wall
                let (nx, ny) = (self.grid.nx, self.grid.ny);
                for j in [0, ny] {
                    let wall = corners[j * (nx + 1)];
                    corners[j * (nx + 1)..(j + 1) * (nx + 1)].fill(wall);
                }
                Ok(faces_from_corners(&self.grid, &corners))
            }
            WindSource::Snapshots(snaps) => {
                let (k, w) = Self::bracket(snaps, t);
                if w == 0.0 {
                    return Ok(snaps[k].faces.clone());
                }
                if w == 1.0 {
                    return Ok(snaps[k + 1].faces.clone());
                }
                FaceVelocities::lerp(&snaps[k].faces, &snaps[k + 1].faces, w)
            }
        }
    }

    /// Point velocity: exact for analytic winds, bilinear on the staggered
    /// faces (and linear in time) for snapshot winds.
    pub fn velocity_at(&self, x: f64, y: f64, t: f64) -> Result<(f64, f64)> {
        self.check_time(t)?;
        match &self.source {
            WindSource::Analytic(flow) => Ok(flow.velocity(x, y, t)),
            WindSource::Snapshots(snaps) => {
                let (k, w) = Self::bracket(snaps, t);
                let a = interpolate_faces(&snaps[k].faces, x, y);
                if snaps.len() == 1 || w == 0.0 {
                    return Ok(a);
                }
                let b = interpolate_faces(&snaps[k + 1].faces, x, y);
                Ok(((1.0 - w) * a.0 + w * b.0, (1.0 - w) * a.1 + w * b.1))
            }
        }
    }
}

/// Bilinear interpolation of C-grid face velocities at a point; periodic in
/// x, clamped in y.
pub fn interpolate_faces(faces: &FaceVelocities, x: f64, y: f64) -> (f64, f64) {
    let g = faces.grid();
    let (nx, ny) = (g.nx, g.ny);
    let wrap = |i: isize| i.rem_euclid(nx as isize) as usize;

    // u lives at (x0 + i dx, y0 + (j + 1/2) dy)
    let fx = (x - g.x0) / g.dx;
    let fy = ((y - g.y0) / g.dy - 0.5).clamp(0.0, (ny - 1) as f64);
    let i0 = fx.floor();
    let wx = fx - i0;
    let j0 = (fy.floor() as usize).min(ny - 2);
    let wy = fy - j0 as f64;
    let (ia, ib) = (wrap(i0 as isize), wrap(i0 as isize + 1));
    let u = (1.0 - wy) * ((1.0 - wx) * faces.u(ia, j0) + wx * faces.u(ib, j0))
        + wy * ((1.0 - wx) * faces.u(ia, j0 + 1) + wx * faces.u(ib, j0 + 1));

    // v lives at (x0 + (i + 1/2) dx, y0 + j dy)
    let fx = (x - g.x0) / g.dx - 0.5;
    let fy = ((y - g.y0) / g.dy).clamp(0.0, ny as f64);
    let i0 = fx.floor();
    let wx = fx - i0;
    let j0 = (fy.floor() as usize).min(ny - 1);
    let wy = fy - j0 as f64;
    let (ia, ib) = (wrap(i0 as isize), wrap(i0 as isize + 1));
    let v = (1.0 - wy) * ((1.0 - wx) * faces.v(ia, j0) + wx * faces.v(ib, j0))
        + wy * ((1.0 - wx) * faces.v(ia, j0 + 1) + wx * faces.v(ib, j0 + 1));
    (u, v)
}

pub fn format_wind(grid: &Grid, snapshots: &[Snapshot]) -> String {
    let mut out = String::new();
    dump::write_header(&mut out, grid);
    for s in snapshots {
        let _ = writeln!(out, "# time={}", dump::fmt_real(s.time));
        dump::write_block(&mut out, s.faces.u_faces(), grid.nx + 1, grid.ny);
        dump::write_block(&mut out, s.faces.v_faces(), grid.nx, grid.ny + 1);
    }
    out
}

pub fn write_wind_file(path: &Path, grid: &Grid, snapshots: &[Snapshot]) -> Result<()> {
    fs::write(path, format_wind(grid, snapshots)).map_err(|e| CtmError::io(path, e))
}

pub fn parse_wind(origin: &str, text: &str) -> Result<WindField> {
    let mut lines = Lines::new(origin, text);
    let grid = dump::read_grid_header(&mut lines)?;
    let mut snapshots = Vec::new();
    while !lines.at_end() {
        let k = snapshots.len();
        let wrap = |e: CtmError| CtmError::Ingestion {
            snapshot: k,
            reason: e.to_string(),
        };
        let time = lines.header_f64("time").map_err(wrap)?;
        let u = lines.block(grid.nx + 1, grid.ny).map_err(wrap)?;
        let v = lines.block(grid.nx, grid.ny + 1).map_err(wrap)?;
        let faces = FaceVelocities::new(grid, u, v).map_err(wrap)?;
        snapshots.push(Snapshot { time, faces });
    }
    WindField::from_snapshots(grid, snapshots)
}

pub fn load_wind_file(path: &Path) -> Result<WindField> {
    let text = fs::read_to_string(path).map_err(|e| CtmError::io(path, e))?;
    parse_wind(&path.display().to_string(), &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channel() -> Grid {
        Grid::from_extent(64, 32, 2.0e7, 6.0e6, 0.0, -3.0e6).unwrap()
    }

    #[test]
    fn constant_streamfunction_gives_rest() {
        let g = channel();
        let f = winds_from_streamfunction(&|_x: f64, _y: f64, _t: f64| 42.0, &g, 0.0);
        assert_eq!(f.max_speed(), 0.0);
    }

    #[test]
    fn linear_streamfunction_gives_uniform_flow() {
        let g = Grid::new(8, 6, 1.0e5, 1.0e5, 0.0, 0.0).unwrap();
        let f = winds_from_streamfunction(&|_x: f64, y: f64, _t: f64| -10.0 * y, &g, 0.0);
        for &u in f.u_faces() {
            assert!((u - 10.0).abs() < 1e-12);
        }
        assert!(f.v_faces().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn four_point_stencil_oracle() {
        // psi = x*y, one cell with corners at (1,2), (3,2), (1,5), (3,5)
        let g = Grid::new(4, 4, 2.0, 3.0, 1.0, 2.0).unwrap();
        let psi = |x: f64, y: f64, _t: f64| x * y;
        let f = winds_from_streamfunction(&psi, &g, 0.0);
        // west face of cell (0,0): -(psi(1,5) - psi(1,2)) / 3 = -1
        assert_eq!(f.u(0, 0), -(1.0 * 5.0 - 1.0 * 2.0) / 3.0);
        // east face: -(psi(3,5) - psi(3,2)) / 3 = -3
        assert_eq!(f.u(1, 0), -(3.0 * 5.0 - 3.0 * 2.0) / 3.0);
        // south face: (psi(3,2) - psi(1,2)) / 2 = 2
        assert_eq!(f.v(0, 0), (3.0 * 2.0 - 1.0 * 2.0) / 2.0);
        // north face: (psi(3,5) - psi(1,5)) / 2 = 5
        assert_eq!(f.v(0, 1), (3.0 * 5.0 - 1.0 * 5.0) / 2.0);
        let div = (f.u(1, 0) - f.u(0, 0)) / 2.0 + (f.v(0, 1) - f.v(0, 0)) / 3.0;
        assert_eq!(div, 0.0);
    }

    #[test]
    fn uniform_kind_is_ten_metres_per_second() {
        let g = channel();
        let w = make_wind(&WindSpec::Uniform { speed: 10.0 }, &g).unwrap();
        let f = w.sample(3600.0).unwrap();
        for &u in f.u_faces() {
            assert!((u - 10.0).abs() < 1e-12 * 10.0, "u = {u}");
        }
        assert!(f.v_faces().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shear_kind_is_linear_in_y() {
        let g = channel();
        let rate = 2.0e-5;
        let w = make_wind(&WindSpec::Shear { rate }, &g).unwrap();
        let f = w.sample(0.0).unwrap();
        let yc = g.y0 + 0.5 * g.ly();
        for j in 0..g.ny {
            let y = g.y0 + (j as f64 + 0.5) * g.dy;
            for i in 0..=g.nx {
                let expected = rate * (y - yc);
                assert!((f.u(i, j) - expected).abs() < 1e-9, "{} vs {}", f.u(i, j), expected);
            }
        }
        assert!(f.v_faces().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn every_generator_is_divergence_free() {
        let g = channel();
        let specs = [
            WindSpec::Uniform { speed: 10.0 },
            WindSpec::Shear { rate: 1e-5 },
            WindSpec::BickleyJet(BickleyParams::default()),
        ];
        for spec in &specs {
            let w = make_wind(spec, &g).unwrap();
            for k in 0..10 {
                let f = w.sample(k as f64 * 7200.0).unwrap();
                assert!(f.max_relative_divergence() <= DIVERGENCE_TOL, "{spec:?}");
                f.validate().unwrap();
                // reversed winds stay divergence-free
                let r = f.negated();
                let d = f.divergence();
                for (a, b) in d.iter().zip(r.divergence()) {
                    assert_eq!(*a, -b);
                }
                r.validate().unwrap();
            }
        }
    }

    #[test]
    fn bickley_without_waves_is_parallel() {
        let g = channel();
        let params = BickleyParams {
            eps: vec![0.0; 3],
            ..BickleyParams::default()
        };
        let w = make_wind(&WindSpec::BickleyJet(params), &g).unwrap();
        let f = w.sample(12345.0).unwrap();
        assert!(f.v_faces().iter().all(|&v| v == 0.0));
        // jet peak near the channel center
        let j_mid = g.ny / 2;
        assert!(f.u(0, j_mid) > 60.0);
    }

    #[test]
    fn bickley_point_velocity_matches_faces() {
        let g = Grid::from_extent(512, 256, 2.0e7, 6.0e6, 0.0, -3.0e6).unwrap();
        let w = make_wind(&WindSpec::BickleyJet(BickleyParams::default()), &g).unwrap();
        let t = 5.0e4;
        let f = w.sample(t).unwrap();
        for &(i, j) in &[(10usize, 100usize), (300, 40), (77, 200)] {
            let x = g.x0 + i as f64 * g.dx;
            let y = g.y0 + (j as f64 + 0.5) * g.dy;
            let (u, _) = w.velocity_at(x, y, t).unwrap();
            // face value is a cell-width average of u along the face
            assert!((u - f.u(i, j)).abs() < 0.05, "{u} vs {}", f.u(i, j));
        }
    }

    #[test]
    fn unknown_time_range_for_snapshots() {
        let g = Grid::new(6, 4, 1.0, 1.0, 0.0, 0.0).unwrap();
        let snaps = vec![
            Snapshot { time: 0.0, faces: FaceVelocities::uniform(g, 1.0) },
            Snapshot { time: 10.0, faces: FaceVelocities::uniform(g, 3.0) },
        ];
        let w = WindField::from_snapshots(g, snaps).unwrap();
        assert_eq!(w.snapshot_count(), 2);
        assert!(matches!(w.sample(-1.0), Err(CtmError::TimeRange { .. })));
        assert!(matches!(w.sample(10.5), Err(CtmError::TimeRange { .. })));
        assert_eq!(w.sample(0.0).unwrap(), FaceVelocities::uniform(g, 1.0));
        assert_eq!(w.sample(10.0).unwrap(), FaceVelocities::uniform(g, 3.0));
        let mid = w.sample(5.0).unwrap();
        assert!(mid.u_faces().iter().all(|&u| u == 2.0));
    }

    #[test]
    fn snapshot_midpoint_is_average_and_divergence_free() {
        let g = channel();
        let w = make_wind(&WindSpec::BickleyJet(BickleyParams::default()), &g).unwrap();
        let a = w.sample(0.0).unwrap();
        let b = w.sample(21600.0).unwrap();
        let file = WindField::from_snapshots(
            g,
            vec![
                Snapshot { time: 0.0, faces: a.clone() },
                Snapshot { time: 21600.0, faces: b.clone() },
            ],
        )
        .unwrap();
        let mid = file.sample(10800.0).unwrap();
        for k in 0..a.u_faces().len() {
            assert_eq!(mid.u_faces()[k], (a.u_faces()[k] + b.u_faces()[k]) / 2.0);
        }
        assert!(mid.max_relative_divergence() <= DIVERGENCE_TOL);
    }

    #[test]
    fn wind_file_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let g = channel();
        let w = make_wind(&WindSpec::BickleyJet(BickleyParams::default()), &g).unwrap();
        let snaps: Vec<Snapshot> = (0..3)
            .map(|k| Snapshot {
                time: k as f64 * 3600.0,
                faces: w.sample(k as f64 * 3600.0).unwrap(),
            })
            .collect();
        let path = dir.path().join("wind.txt");
        write_wind_file(&path, &g, &snaps).unwrap();
        let back = load_wind_file(&path).unwrap();
        assert_eq!(back.snapshot_count(), 3);
        for t in [0.0, 1800.0, 3600.0, 7000.0] {
            let a = w.sample(t).unwrap();
            let b = back.sample(t).unwrap();
            if t == 0.0 || t == 3600.0 {
                for (p, q) in a.u_faces().iter().zip(b.u_faces()) {
                    assert!((p - q).abs() <= 1e-15 * p.abs().max(1.0));
                }
            }
        }

        // uniform two-snapshot file
        let uni = vec![
            Snapshot { time: 0.0, faces: FaceVelocities::uniform(g, 10.0) },
            Snapshot { time: 3600.0, faces: FaceVelocities::uniform(g, 10.0) },
        ];
        write_wind_file(&path, &g, &uni).unwrap();
        assert_eq!(load_wind_file(&path).unwrap().snapshot_count(), 2);

        // divergent snapshot
        let mut bad = FaceVelocities::uniform(g, 10.0);
        bad.u[5] = 11.0;
        let divergent = vec![
            Snapshot { time: 0.0, faces: FaceVelocities::uniform(g, 10.0) },
            Snapshot { time: 3600.0, faces: bad },
        ];
        write_wind_file(&path, &g, &divergent).unwrap();
        match load_wind_file(&path) {
            Err(CtmError::Ingestion { snapshot, reason }) => {
                assert_eq!(snapshot, 1);
                assert!(reason.contains("divergence"), "{reason}");
            }
            other => panic!("expected ingestion error, got {other:?}"),
        }

        // unsorted times
        let unsorted = vec![
            Snapshot { time: 3600.0, faces: FaceVelocities::uniform(g, 10.0) },
            Snapshot { time: 0.0, faces: FaceVelocities::uniform(g, 10.0) },
        ];
        write_wind_file(&path, &g, &unsorted).unwrap();
        assert!(matches!(
            load_wind_file(&path),
            Err(CtmError::Ingestion { snapshot: 1, .. })
        ));
    }

    #[test]
    fn from_file_spec_requires_matching_grid() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::new(8, 4, 1.0, 1.0, 0.0, 0.0).unwrap();
        let path = dir.path().join("w.txt");
        write_wind_file(
            &path,
            &g,
            &[Snapshot { time: 0.0, faces: FaceVelocities::uniform(g, 1.0) }],
        )
        .unwrap();
        let other = Grid::new(8, 5, 1.0, 1.0, 0.0, 0.0).unwrap();
        assert!(matches!(
            make_wind(&WindSpec::FromFile(path.clone()), &other),
            Err(CtmError::Shape(_))
        ));
        let w = make_wind(&WindSpec::FromFile(path), &g).unwrap();
        assert_eq!(w.kind_name(), "from_file");
    }
}
