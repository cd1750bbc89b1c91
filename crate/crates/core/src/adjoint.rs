//! Backward-in-time adjoint transport.
//!
//! The continuous variant replays the forward schedule in reverse with
//! every face velocity negated and the split order of each sub-step
//! swapped. The discrete-transpose variant assembles the matrix of every
//! forward sub-step and applies its transpose; for the limited scheme the
//! matrix is the Jacobian about the recorded forward state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CtmError, Result};
use crate::grid::{inner_product, l2_norm, Grid, ScalarField};
use crate::transport::{
    advect_tangent, advect_values, diffuse_values, Scheme, SchemeSpec, SplitOrder, TransportPlan,
};
use crate::wind::FaceVelocities;

pub const DEFAULT_MATRIX_CAP: usize = 10_000;

/// Seed of the random fields used by [`dot_product_test`].
pub const DOT_TEST_SEED: u64 = 0x5eed_ad70;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjointVariant {
    Continuous,
    DiscreteTranspose { cap: usize },
}

impl Default for AdjointVariant {
    fn default() -> Self {
        AdjointVariant::Continuous
    }
}

impl AdjointVariant {
    pub fn discrete() -> Self {
        AdjointVariant::DiscreteTranspose {
            cap: DEFAULT_MATRIX_CAP,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AdjointVariant::Continuous => "continuous",
            AdjointVariant::DiscreteTranspose { .. } => "discrete_transpose",
        }
    }
}

fn check_cap(grid: &Grid, cap: usize) -> Result<()> {
    if grid.len() > cap {
        return Err(CtmError::Capacity {
            cells: grid.len(),
            cap,
        });
    }
    Ok(())
}

/// Sparse (CSR) matrix of one advection sub-step acting on flattened
/// cell values.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl StepMatrix {
    fn from_triplets(n: usize, mut entries: Vec<(usize, usize, f64)>) -> Self {
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0; n + 1];
        let mut cols = Vec::with_capacity(entries.len());
        let mut vals = Vec::with_capacity(entries.len());
        for (r, c, v) in entries {
            row_ptr[r + 1] += 1;
            cols.push(c);
            vals.push(v);
        }
        for r in 0..n {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let range = self.row_ptr[row]..self.row_ptr[row + 1];
        self.cols[range.clone()]
            .iter()
            .position(|&c| c == col)
            .map_or(0.0, |p| self.vals[range.start + p])
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        (0..self.n)
            .map(|r| {
                (self.row_ptr[r]..self.row_ptr[r + 1])
                    .map(|k| self.vals[k] * x[self.cols[k]])
                    .sum()
            })
            .collect()
    }

    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.n);
        let mut out = vec![0.0; self.n];
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                out[self.cols[k]] += self.vals[k] * y[r];
            }
        }
        out
    }

    pub fn column_sums(&self) -> Vec<f64> {
        self.apply_transpose(&vec![1.0; self.n])
    }
}

/// Probe colours: two cells share a colour only if their 5×5 stencil
/// boxes cannot overlap, periodic wrap included.
fn probe_colors(grid: &Grid) -> (Vec<usize>, usize) {
    const PERIOD: usize = 5;
    let full_x = grid.nx - grid.nx % PERIOD;
    let x_colors = PERIOD + grid.nx % PERIOD;
    let x_color = |i: usize| if i < full_x { i % PERIOD } else { PERIOD + (i - full_x) };
    let colors = (0..grid.len())
        .map(|k| {
            let (i, j) = (k % grid.nx, k / grid.nx);
            (j % PERIOD) * x_colors + x_color(i)
        })
        .collect();
    (colors, PERIOD * x_colors)
}

/// Distance-2 neighbourhood test, periodic in x.
fn within_stencil(grid: &Grid, a: usize, b: usize) -> bool {
    let (ia, ja) = (a % grid.nx, a / grid.nx);
    let (ib, jb) = (b % grid.nx, b / grid.nx);
    let dx = ia.abs_diff(ib);
    let dx = dx.min(grid.nx - dx);
    dx <= 2 && ja.abs_diff(jb) <= 2
}

fn assemble_by_probing(grid: &Grid, probe: impl Fn(&[f64]) -> Vec<f64>) -> StepMatrix {
    let n = grid.len();
    let (colors, count) = probe_colors(grid);
    let mut entries = Vec::new();
    for color in 0..count {
        let members: Vec<usize> = (0..n).filter(|&k| colors[k] == color).collect();
        if members.is_empty() {
            continue;
        }
        let mut e = vec![0.0; n];
        for &k in &members {
            e[k] = 1.0;
        }
        let response = probe(&e);
        for (row, &val) in response.iter().enumerate() {
            if val == 0.0 {
                continue;
            }
            if let Some(&col) = members.iter().find(|&&k| within_stencil(grid, row, k)) {
                entries.push((row, col, val));
            }
        }
    }
    StepMatrix::from_triplets(n, entries)
}

/// Matrix of one linear (donor-cell) advection sub-step.
pub fn assemble_step_matrix(
    faces: &FaceVelocities,
    dt: f64,
    spec: &SchemeSpec,
    order: SplitOrder,
    cap: usize,
) -> Result<StepMatrix> {
    let grid = faces.grid();
    check_cap(grid, cap)?;
    if spec.scheme != Scheme::Upwind1 {
        return Err(CtmError::invalid(
            "scheme",
            "exact step matrices exist only for upwind1; use assemble_linearized_step",
        ));
    }
    let g = *grid;
    Ok(assemble_by_probing(&g, |e| {
        advect_values(e, faces, dt, Scheme::Upwind1, order, false)
    }))
}

/// Jacobian of one advection sub-step about `base`, from coloured probes
/// of the tangent-linear step. Coincides with the step matrix for the
/// linear scheme.
pub fn assemble_linearized_step(
    faces: &FaceVelocities,
    dt: f64,
    spec: &SchemeSpec,
    order: SplitOrder,
    base: &[f64],
    cap: usize,
) -> Result<StepMatrix> {
    let g = *faces.grid();
    check_cap(&g, cap)?;
    if base.len() != g.len() {
        return Err(CtmError::Shape(format!(
            "base state has {} values, grid has {}",
            base.len(),
            g.len()
        )));
    }
    if spec.scheme == Scheme::Upwind1 {
        return assemble_step_matrix(faces, dt, spec, order, cap);
    }
    Ok(assemble_by_probing(&g, |e| {
        advect_tangent(base, e, faces, dt, spec.scheme, order)
    }))
}

/// Adjoint of one sub-step under the continuous variant: diffusion (self
/// adjoint) first, then advection with reversed winds in swapped order.
pub(crate) fn continuous_adjoint_step(
    values: &[f64],
    faces: &FaceVelocities,
    dt: f64,
    plan: &TransportPlan,
    order: SplitOrder,
) -> Vec<f64> {
    let grid = faces.grid();
    let lam = if plan.diffusion.is_active() {
        diffuse_values(values, grid, plan.diffusion.d_h, dt)
    } else {
        values.to_vec()
    };
    advect_values(&lam, faces, dt, plan.scheme.scheme, order.reversed(), true)
}

/// Integrates `lambda_f` from the end of `plan` back to its start.
///
/// `window` must match the plan's time window. `trajectory` holds the
/// forward state at the start of every sub-step and is required only by
/// the discrete-transpose variant of the limited scheme.
pub fn run_adjoint(
    lambda_f: &ScalarField,
    plan: &TransportPlan,
    window: (f64, f64),
    variant: AdjointVariant,
    trajectory: Option<&[ScalarField]>,
) -> Result<ScalarField> {
    let sched = &plan.schedule;
    if sched.t0 != window.0 || sched.tf != window.1 {
        return Err(CtmError::Pairing(format!(
            "schedule covers [{}, {}] s but the adjoint window is [{}, {}] s",
            sched.t0, sched.tf, window.0, window.1
        )));
    }
    if let Some(g) = plan.grid() {
        lambda_f.grid().check_same(g)?;
    }
    let grid = *lambda_f.grid();
    let mut lam = lambda_f.values().to_vec();
    match variant {
        AdjointVariant::Continuous => {
            for (step, faces) in sched.steps.iter().zip(plan.faces()).rev() {
                lam = continuous_adjoint_step(&lam, faces, step.dt, plan, step.order);
            }
        }
        AdjointVariant::DiscreteTranspose { cap } => {
            check_cap(&grid, cap)?;
            let needs_states = plan.scheme.scheme != Scheme::Upwind1;
            if needs_states {
                match trajectory {
                    Some(t) if t.len() == sched.steps.len() => {}
                    None if sched.steps.is_empty() => {}
                    Some(t) => {
                        return Err(CtmError::Pairing(format!(
                            "trajectory has {} states for {} sub-steps",
                            t.len(),
                            sched.steps.len()
                        )))
                    }
                    None => {
                        return Err(CtmError::Pairing(
                            "the linearized transpose needs the forward trajectory".into(),
                        ))
                    }
                }
            }
            for (k, (step, faces)) in sched.steps.iter().zip(plan.faces()).enumerate().rev() {
                if plan.diffusion.is_active() {
                    lam = diffuse_values(&lam, &grid, plan.diffusion.d_h, step.dt);
                }
                let m = match trajectory.filter(|_| needs_states) {
                    Some(states) => assemble_linearized_step(
                        faces,
                        step.dt,
                        &plan.scheme,
                        step.order,
                        states[k].values(),
                        cap,
                    )?,
                    None => assemble_step_matrix(faces, step.dt, &plan.scheme, step.order, cap)?,
                };
                lam = m.apply_transpose(&lam);
            }
        }
    }
    ScalarField::new(grid, lam)
}

/// Relative departure from identity of a forward run followed by the
/// continuous adjoint: `‖A* A c − c‖ / ‖c‖`.
pub fn round_trip_error(c: &ScalarField, plan: &TransportPlan) -> Result<f64> {
    let (fwd, _) = crate::transport::run_plan(c, plan, None)?;
    let back = run_adjoint(
        &fwd,
        plan,
        (plan.schedule.t0, plan.schedule.tf),
        AdjointVariant::Continuous,
        None,
    )?;
    Ok(l2_norm(&back.sub(c)?) / l2_norm(c))
}

/// Largest relative defect `|<Mu, v> − <u, M'v>| / (‖u‖‖v‖)` over random
/// pairs, where `M'` is the exact transpose or the reversed-wind step.
pub fn dot_product_test(
    faces: &FaceVelocities,
    dt: f64,
    spec: &SchemeSpec,
    order: SplitOrder,
    variant: AdjointVariant,
    trials: usize,
) -> Result<f64> {
    let grid = *faces.grid();
    let cap = match variant {
        AdjointVariant::DiscreteTranspose { cap } => cap,
        AdjointVariant::Continuous => DEFAULT_MATRIX_CAP,
    };
    check_cap(&grid, cap)?;
    let mut rng = ChaCha8Rng::seed_from_u64(DOT_TEST_SEED);
    let base: Vec<f64> = (0..grid.len()).map(|_| 1.0 + rng.gen::<f64>()).collect();
    let m = assemble_linearized_step(faces, dt, spec, order, &base, cap)?;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let u: Vec<f64> = (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mu = m.apply(&u);
        let mtv = match variant {
            AdjointVariant::DiscreteTranspose { .. } => m.apply_transpose(&v),
            AdjointVariant::Continuous => {
                advect_values(&v, faces, dt, spec.scheme, order.reversed(), true)
            }
        };
        let field = |x: Vec<f64>| ScalarField::from_parts(grid, x);
        let (u, v, mu, mtv) = (field(u), field(v), field(mu), field(mtv));
        let lhs = inner_product(&mu, &v)?;
        let rhs = inner_product(&u, &mtv)?;
        let defect = (lhs - rhs).abs() / (l2_norm(&u) * l2_norm(&v));
        worst = worst.max(defect);
    }
    Ok(worst)
}
