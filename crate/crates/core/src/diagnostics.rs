//! Reconstruction error metrics, the numerical region of influence and the
//! closed-form estimators that predict information loss from it.

use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::adjoint::{run_adjoint, AdjointVariant};
use crate::error::{CtmError, Result};
use crate::grid::{total_mass, Grid, PlumeSpec, ScalarField};
use crate::transport::{plan_transport, DiffusionSpec, SchemeSpec, TransportPlan};
use crate::wind::WindField;

/// Influence boundary: a cell belongs to the region when its excess exceeds
/// this fraction of the original plume excess.
pub const INFLUENCE_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceRegion {
    pub mask: Vec<bool>,
    pub area: f64,
    /// Excess over the background above which a cell is inside.
    pub threshold: f64,
}

impl InfluenceRegion {
    /// Cells of `field` whose excess over the plume background exceeds
    /// `fraction` of the plume excess.
    pub fn from_field(field: &ScalarField, plume: &PlumeSpec, fraction: f64) -> Result<Self> {
        plume.validate()?;
        if !(fraction > 0.0 && fraction.is_finite()) {
            return Err(CtmError::invalid("influence_fraction", "must be positive"));
        }
        let threshold = fraction * plume.excess();
        let mask: Vec<bool> = field
            .values()
            .iter()
            .map(|&v| v - plume.background > threshold)
            .collect();
        let area = mask.iter().filter(|&&m| m).count() as f64 * field.grid().cell_area();
        Ok(Self {
            mask,
            area,
            threshold,
        })
    }

    pub fn cell_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// `A_h / A` against the plume's discrete footprint.
    pub fn area_ratio(&self, grid: &Grid, plume: &PlumeSpec) -> Result<f64> {
        let footprint = plume.footprint(grid)?.iter().filter(|&&m| m).count();
        Ok(self.cell_count() as f64 / footprint as f64)
    }

    /// The mask as a 0/1 field for dumping.
    pub fn to_field(&self, grid: &Grid) -> Result<ScalarField> {
        ScalarField::new(*grid, self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())
    }
}

/// Region of influence of the observations: one reversed-wind integration
/// of `obs` back over the plan's window.
pub fn influence_from_plan(
    obs: &ScalarField,
    plan: &TransportPlan,
    plume: &PlumeSpec,
    fraction: f64,
) -> Result<InfluenceRegion> {
    let window = (plan.schedule.t0, plan.schedule.tf);
    let back = run_adjoint(obs, plan, window, AdjointVariant::Continuous, None)?;
    InfluenceRegion::from_field(&back, plume, fraction)
}

/// Plans the window `[t0, t0 + window]` and measures the region of
/// influence of `obs` with the default threshold.
pub fn area_of_influence(
    obs: &ScalarField,
    wind: &WindField,
    t0: f64,
    window: f64,
    spec: &SchemeSpec,
    diffusion: &DiffusionSpec,
    plume: &PlumeSpec,
) -> Result<InfluenceRegion> {
    let plan = plan_transport(wind, t0, t0 + window, spec, diffusion, None)?;
    influence_from_plan(obs, &plan, plume, INFLUENCE_FRACTION)
}

/// Which elapsed time the broadening estimate uses for a window `t_f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BroadeningTime {
    /// Forward plus back integration, `2 t_f`.
    #[default]
    RoundTrip,
    ForwardOnly,
}

impl BroadeningTime {
    pub fn elapsed(&self, window: f64) -> f64 {
        match self {
            BroadeningTime::RoundTrip => 2.0 * window,
            BroadeningTime::ForwardOnly => window,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BroadeningTime::RoundTrip => "round_trip",
            BroadeningTime::ForwardOnly => "forward_only",
        }
    }
}

/// Area growth of a rectangle whose sides each grow by `2 sqrt(d_h t)`.
pub fn broadening_estimate(plume: &PlumeSpec, d_h: f64, t: f64) -> Result<f64> {
    if !(d_h >= 0.0 && t >= 0.0) {
        return Err(CtmError::invalid("d_h", "diffusivity and time must be nonnegative"));
    }
    let grow = 2.0 * (d_h * t).sqrt();
    Ok((plume.side_x + grow) * (plume.side_y + grow) / (plume.side_x * plume.side_y))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossEstimate {
    pub percent: f64,
    /// Set when the measured region was smaller than the truth.
    pub clamped: bool,
}

/// Predicted relative error `100 (1 - A / A_h)`.
pub fn loss_estimate(area_true: f64, area_influence: f64) -> Result<LossEstimate> {
    if !(area_true > 0.0 && area_influence.is_finite() && area_influence >= 0.0) {
        return Err(CtmError::invalid("area_true", "areas must be positive and finite"));
    }
    if area_influence < area_true {
        return Ok(LossEstimate {
            percent: 0.0,
            clamped: true,
        });
    }
    Ok(LossEstimate {
        percent: 100.0 * (1.0 - area_true / area_influence),
        clamped: false,
    })
}

/// Center of the positive excess; x is averaged on the periodic circle.
pub fn center_of_mass(c: &ScalarField, background: f64) -> Result<(f64, f64)> {
    let g = c.grid();
    let (mut w_sum, mut sin_sum, mut cos_sum, mut y_sum) = (0.0, 0.0, 0.0, 0.0);
    for j in 0..g.ny {
        for i in 0..g.nx {
            let w = (c.get(i, j) - background).max(0.0);
            if w == 0.0 {
                continue;
            }
            let (x, y) = g.cell_center(i, j);
            let theta = 2.0 * PI * (x - g.x0) / g.lx();
            w_sum += w;
            sin_sum += w * theta.sin();
            cos_sum += w * theta.cos();
            y_sum += w * y;
        }
    }
    if w_sum == 0.0 {
        return Err(CtmError::UndefinedCenter(
            "field has no positive excess over the background".into(),
        ));
    }
    let theta = sin_sum.atan2(cos_sum).rem_euclid(2.0 * PI);
    Ok((g.x0 + theta / (2.0 * PI) * g.lx(), y_sum / w_sum))
}

/// Normalization radius of the center-of-mass error for a plume.
pub fn default_r_max(plume: &PlumeSpec) -> f64 {
    plume.side_x.max(plume.side_y)
}

/// Distance between centers of mass as a percentage of `r_max`.
pub fn center_of_mass_error(estimate: &ScalarField, truth: &ScalarField, background: f64, r_max: f64) -> Result<f64> {
    estimate.grid().check_same(truth.grid())?;
    if !(r_max > 0.0) {
        return Err(CtmError::invalid("r_max", "must be positive"));
    }
    let (xt, yt) = center_of_mass(truth, background)?;
    let (xe, ye) = center_of_mass(estimate, background)?;
    let lx = truth.grid().lx();
    let dx = (xe - xt).rem_euclid(lx);
    let dx = dx.min(lx - dx);
    Ok(100.0 * dx.hypot(ye - yt) / r_max)
}

/// Signed relative error of the excess mass, in percent.
pub fn total_mass_error(estimate: &ScalarField, truth: &ScalarField, background: f64) -> Result<f64> {
    estimate.grid().check_same(truth.grid())?;
    let reference = total_mass(truth, background);
    if reference == 0.0 {
        return Err(CtmError::DegenerateReference("truth has no excess mass".into()));
    }
    Ok(100.0 * (total_mass(estimate, background) - reference) / reference)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusivityEstimate {
    pub lambda: f64,
    pub plume_width: f64,
    pub boundary_scale: f64,
    pub d_h: f64,
}

/// Stretching-driven diffusivity `lambda * W * r_b`.
pub fn effective_diffusivity(lambda: f64, plume_width: f64, boundary_scale: f64) -> Result<DiffusivityEstimate> {
    if !(lambda >= 0.0 && plume_width >= 0.0 && boundary_scale >= 0.0) {
        return Err(CtmError::invalid("lambda", "inputs must be nonnegative"));
    }
    Ok(DiffusivityEstimate {
        lambda,
        plume_width,
        boundary_scale,
        d_h: lambda * plume_width * boundary_scale,
    })
}

/// Downwind distance covered in `time_scale` at `mean_speed` (m).
pub fn reconstructible_length_scale(mean_speed: f64, time_scale: f64) -> Result<f64> {
    if !(mean_speed >= 0.0 && time_scale >= 0.0) {
        return Err(CtmError::invalid("mean_speed", "speed and time must be nonnegative"));
    }
    Ok(mean_speed * time_scale)
}

/// A length expressed in grid boxes of size `dx`.
pub fn length_in_cells(length: f64, dx: f64) -> f64 {
    length / dx
}

/// One row of the sweep report.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    pub window: f64,
    pub rel_l2_pct: f64,
    pub com_err_pct: f64,
    pub mass_err_pct: f64,
    pub area_ratio_measured: f64,
    pub area_ratio_estimated: f64,
    pub loss_est_pct: f64,
    pub cost_reduction_orders: f64,
    pub iterations: usize,
}

pub const REPORT_HEADER: &str = "window_hours,rel_l2_pct,com_err_pct,mass_err_pct,area_ratio_measured,area_ratio_estimated,loss_est_pct,cost_reduction_orders,iterations";

fn csv_real(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

impl DiagnosticsReport {
    pub fn csv_row(&self) -> String {
        let cols = [
            csv_real(self.window / 3600.0),
            csv_real(self.rel_l2_pct),
            csv_real(self.com_err_pct),
            csv_real(self.mass_err_pct),
            csv_real(self.area_ratio_measured),
            csv_real(self.area_ratio_estimated),
            csv_real(self.loss_est_pct),
            csv_real(self.cost_reduction_orders),
            self.iterations.to_string(),
        ];
        cols.join(",")
    }
}

pub fn format_report(rows: &[DiagnosticsReport]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}
