//! Finite-time Lyapunov exponents from trajectory clusters.

use rayon::prelude::*;

use crate::error::{CtmError, Result};
use crate::grid::ScalarField;
use crate::wind::WindField;

/// A velocity field that can be evaluated anywhere in its time range.
pub trait PointVelocity: Sync {
    fn velocity(&self, x: f64, y: f64, t: f64) -> Result<(f64, f64)>;
}

impl PointVelocity for WindField {
    fn velocity(&self, x: f64, y: f64, t: f64) -> Result<(f64, f64)> {
        self.velocity_at(x, y, t)
    }
}

impl<F> PointVelocity for F
where
    F: Fn(f64, f64, f64) -> (f64, f64) + Sync,
{
    fn velocity(&self, x: f64, y: f64, t: f64) -> Result<(f64, f64)> {
        Ok(self(x, y, t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FtleSpec {
    pub horizon: f64,
    /// Cluster half-spacing (m); `None` uses a tenth of the cell width.
    pub spacing: Option<f64>,
    /// Largest integration step (s).
    pub max_dt: f64,
}

impl FtleSpec {
    pub fn new(horizon: f64) -> Self {
        Self {
            horizon,
            spacing: None,
            max_dt: 600.0,
        }
    }

    fn steps(&self) -> usize {
        ((self.horizon / self.max_dt).ceil() as usize).max(16)
    }
}

/// Reflecting walls at `lo` and `hi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Walls {
    pub lo: f64,
    pub hi: f64,
}

impl Walls {
    fn reflect(&self, y: f64) -> f64 {
        let mut y = y;
        // a trajectory can only overshoot by a fraction of a step
        for _ in 0..4 {
            if y < self.lo {
                y = 2.0 * self.lo - y;
            } else if y > self.hi {
                y = 2.0 * self.hi - y;
            } else {
                break;
            }
        }
        y
    }
}

fn rk4_path<V: PointVelocity + ?Sized>(
    v: &V,
    mut x: f64,
    mut y: f64,
    t0: f64,
    dt: f64,
    steps: usize,
    walls: Option<Walls>,
) -> Result<(f64, f64)> {
    let fix = |y: f64| walls.map_or(y, |w| w.reflect(y));
    for k in 0..steps {
        let t = t0 + k as f64 * dt;
        let (u1, v1) = v.velocity(x, y, t)?;
        let (u2, v2) = v.velocity(x + 0.5 * dt * u1, fix(y + 0.5 * dt * v1), t + 0.5 * dt)?;
        let (u3, v3) = v.velocity(x + 0.5 * dt * u2, fix(y + 0.5 * dt * v2), t + 0.5 * dt)?;
        let (u4, v4) = v.velocity(x + dt * u3, fix(y + dt * v3), t + dt)?;
        x += dt / 6.0 * (u1 + 2.0 * u2 + 2.0 * u3 + u4);
        y = fix(y + dt / 6.0 * (v1 + 2.0 * v2 + 2.0 * v3 + v4));
    }
    Ok((x, y))
}

/// FTLE at one seed from a four-point cluster at distance `delta`.
pub fn ftle_at<V: PointVelocity + ?Sized>(
    v: &V,
    seed: (f64, f64),
    t0: f64,
    spec: &FtleSpec,
    delta: f64,
    walls: Option<Walls>,
) -> Result<f64> {
    if !(spec.horizon > 0.0) {
        return Err(CtmError::invalid("horizon", "must be positive"));
    }
    if !(delta > 0.0) {
        return Err(CtmError::invalid("spacing", "must be positive"));
    }
    let steps = spec.steps();
    let dt = spec.horizon / steps as f64;
    let (x0, y0) = seed;
    let end = |dx: f64, dy: f64| rk4_path(v, x0 + dx, y0 + dy, t0, dt, steps, walls);
    let e = end(delta, 0.0)?;
    let w = end(-delta, 0.0)?;
    let n = end(0.0, delta)?;
    let s = end(0.0, -delta)?;
    let j11 = (e.0 - w.0) / (2.0 * delta);
    let j21 = (e.1 - w.1) / (2.0 * delta);
    let j12 = (n.0 - s.0) / (2.0 * delta);
    let j22 = (n.1 - s.1) / (2.0 * delta);
    // right Cauchy-Green tensor J'J
    let c11 = j11 * j11 + j21 * j21;
    let c12 = j11 * j12 + j21 * j22;
    let c22 = j12 * j12 + j22 * j22;
    let tr = c11 + c22;
    let det = c11 * c22 - c12 * c12;
    let lam = 0.5 * (tr + (tr * tr - 4.0 * det).max(0.0).sqrt());
    Ok(lam.ln() / (2.0 * spec.horizon))
}

/// FTLE at every cell center of the wind's grid, seeds in parallel.
pub fn ftle_field(wind: &WindField, t0: f64, spec: &FtleSpec) -> Result<ScalarField> {
    wind.check_time(t0)?;
    wind.check_time(t0 + spec.horizon)?;
    let g = *wind.grid();
    let delta = spec.spacing.unwrap_or(g.dx / 10.0);
    let walls = Some(Walls {
        lo: g.y0,
        hi: g.y0 + g.ly(),
    });
    let values: Vec<f64> = (0..g.len())
        .into_par_iter()
        .map(|k| {
            let seed = g.cell_center(k % g.nx, k / g.nx);
            ftle_at(wind, seed, t0, spec, delta, walls)
        })
        .collect::<Result<_>>()?;
    ScalarField::new(g, values)
}

/// Mean of `field` over the cells flagged in `mask`.
pub fn masked_mean(field: &ScalarField, mask: &[bool]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (&v, &m) in field.values().iter().zip(mask) {
        if m {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::wind::{make_wind, AnalyticFlow, BickleyParams, WindSpec};

    #[test]
    fn uniform_flow_has_zero_exponent() {
        let g = Grid::from_extent(16, 8, 2.0e7, 6.0e6, 0.0, -3.0e6).unwrap();
        let w = WindField::analytic(g, AnalyticFlow::Uniform { speed: 20.0, y0: 0.0 });
        let f = ftle_field(&w, 0.0, &FtleSpec::new(86400.0)).unwrap();
        assert!(f.values().iter().all(|v| v.abs() <= 1e-12), "{}", f.max());
    }

    #[test]
    fn saddle_exponent_approaches_rate() {
        let a = 2e-5;
        let saddle = move |x: f64, y: f64, _t: f64| (a * x, -a * y);
        let spec = FtleSpec {
            horizon: 5.0 / a,
            spacing: None,
            max_dt: 0.01 / a,
        };
        let l = ftle_at(&saddle, (0.0, 0.0), 0.0, &spec, 1.0, None).unwrap();
        assert!((l - a).abs() <= 0.05 * a, "{l}");
    }

    #[test]
    fn shear_exponent_matches_closed_form_and_decays() {
        let a = 1e-5;
        let shear = move |_x: f64, y: f64, _t: f64| (a * y, 0.0);
        let mut last = f64::INFINITY;
        for h in [1e5, 2e5, 4e5, 8e5] {
            let l = ftle_at(&shear, (0.0, 0.0), 0.0, &FtleSpec::new(h), 100.0, None).unwrap();
            let exact = (a * h / 2.0).asinh() / h;
            assert!((l - exact).abs() <= 1e-9 * exact.max(1e-12), "{l} vs {exact}");
            assert!(l >= 0.0 && l <= last);
            last = l;
        }
    }

    #[test]
    fn bickley_exponent_magnitude() {
        let g = Grid::from_extent(32, 12, 2.0e7, 6.0e6, 0.0, -3.0e6).unwrap();
        let w = make_wind(&WindSpec::BickleyJet(BickleyParams::default()), &g).unwrap();
        let f = ftle_field(&w, 0.0, &FtleSpec::new(4.0 * 86400.0)).unwrap();
        let m = f.max();
        assert!((1e-6..1e-4).contains(&m), "max FTLE {m}");
    }

    #[test]
    fn walls_reflect() {
        let w = Walls { lo: 0.0, hi: 10.0 };
        assert_eq!(w.reflect(-1.0), 1.0);
        assert_eq!(w.reflect(12.0), 8.0);
        assert_eq!(w.reflect(5.0), 5.0);
    }
}
