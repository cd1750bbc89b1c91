//! Initial-condition reconstruction by adjoint-gradient minimization of the
//! observation misfit.

use crate::adjoint::{run_adjoint, AdjointVariant};
use crate::error::{CtmError, Result};
use crate::grid::{inner_product, make_plume, PlumeSpec, ScalarField};
use crate::lbfgs;
pub use crate::lbfgs::{IterRecord, MinimizerSpec, Termination};
use crate::transport::{
    plan_transport, run_plan, run_plan_trajectory, DiffusionSpec, Scheme, SchemeSpec, TransportPlan,
};
use crate::wind::WindField;

/// Which cells are observed at the final time.
#[derive(Debug, Clone, PartialEq)]
pub enum ObsOperator {
    FullState,
    Mask(Vec<bool>),
}

impl ObsOperator {
    fn apply(&self, values: &mut [f64]) {
        if let ObsOperator::Mask(mask) = self {
            for (v, &keep) in values.iter_mut().zip(mask) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    pub observations: ScalarField,
    pub obs_operator: ObsOperator,
    /// Background concentration; the default first guess.
    pub background: f64,
}

impl CostSpec {
    pub fn full_state(observations: ScalarField, background: f64) -> Self {
        Self {
            observations,
            obs_operator: ObsOperator::FullState,
            background,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let ObsOperator::Mask(m) = &self.obs_operator {
            if m.len() != self.observations.grid().len() {
                return Err(CtmError::Shape(format!(
                    "observation mask has {} cells, grid has {}",
                    m.len(),
                    self.observations.grid().len()
                )));
            }
        }
        if !self.background.is_finite() {
            return Err(CtmError::invalid("background", "must be finite"));
        }
        Ok(())
    }
}

/// Forward model and adjoint configuration over one window. The sub-step
/// schedule is fixed at construction, so every forward/adjoint pair in an
/// inversion replays the same steps.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    plan: TransportPlan,
    variant: AdjointVariant,
}

impl ForwardModel {
    pub fn new(
        wind: &WindField,
        t0: f64,
        tf: f64,
        scheme: &SchemeSpec,
        diffusion: &DiffusionSpec,
        variant: AdjointVariant,
    ) -> Result<Self> {
        let plan = plan_transport(wind, t0, tf, scheme, diffusion, None)?;
        Ok(Self { plan, variant })
    }

    pub fn from_plan(plan: TransportPlan, variant: AdjointVariant) -> Self {
        Self { plan, variant }
    }

    pub fn plan(&self) -> &TransportPlan {
        &self.plan
    }

    pub fn variant(&self) -> AdjointVariant {
        self.variant
    }

    pub fn window(&self) -> (f64, f64) {
        (self.plan.schedule.t0, self.plan.schedule.tf)
    }

    pub fn forward(&self, c0: &ScalarField) -> Result<ScalarField> {
        Ok(run_plan(c0, &self.plan, None)?.0)
    }

    fn needs_trajectory(&self) -> bool {
        matches!(self.variant, AdjointVariant::DiscreteTranspose { .. })
            && self.plan.scheme.scheme != Scheme::Upwind1
    }
}

/// Cost `½<H(Fc − y), H(Fc − y)>` and its L2 gradient (one forward and one
/// adjoint integration).
pub fn cost_and_gradient(c0: &ScalarField, cost: &CostSpec, model: &ForwardModel) -> Result<(f64, ScalarField)> {
    c0.grid().check_same(cost.observations.grid())?;
    let (final_state, trajectory) = if model.needs_trajectory() {
        let (out, states) = run_plan_trajectory(c0, &model.plan)?;
        (out, Some(states))
    } else {
        (model.forward(c0)?, None)
    };
    let mut residual = final_state.sub(&cost.observations)?.into_values();
    cost.obs_operator.apply(&mut residual);
    let residual = ScalarField::new(*c0.grid(), residual)?;
    let j = 0.5 * inner_product(&residual, &residual)?;
    let g = run_adjoint(&residual, &model.plan, model.window(), model.variant, trajectory.as_deref())?;
    Ok((j, g))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionResult {
    pub c0_hat: ScalarField,
    pub history: Vec<IterRecord>,
    pub iterations: usize,
    pub termination: Termination,
    /// Cost/gradient evaluations, each one forward plus one adjoint run.
    pub evaluations: usize,
}

impl InversionResult {
    pub fn initial_cost(&self) -> f64 {
        self.history[0].cost
    }

    pub fn final_normalized_cost(&self) -> f64 {
        self.history.last().map_or(1.0, |r| r.normalized_cost)
    }

    /// Orders of magnitude by which the accepted cost fell.
    pub fn cost_reduction_orders(&self) -> f64 {
        let n = self.final_normalized_cost();
        if self.initial_cost() == 0.0 {
            return 0.0;
        }
        if n <= 0.0 {
            return f64::INFINITY;
        }
        -n.log10()
    }

    /// Smallest reconstructed value, reported to monitor negativity.
    pub fn min_value(&self) -> f64 {
        self.c0_hat.min()
    }
}

/// Minimizes the cost from `c0_init` (by default the uniform background).
pub fn minimize(
    c0_init: Option<&ScalarField>,
    cost: &CostSpec,
    model: &ForwardModel,
    spec: &MinimizerSpec,
) -> Result<InversionResult> {
    cost.validate()?;
    let grid = *cost.observations.grid();
    let start = match c0_init {
        Some(c) => {
            c.grid().check_same(&grid)?;
            c.clone()
        }
        None => ScalarField::constant(grid, cost.background),
    };
    let objective = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let c = ScalarField::new(grid, x.to_vec())?;
        let (j, g) = cost_and_gradient(&c, cost, model)?;
        Ok((j, g.into_values()))
    };
    let m = lbfgs::minimize(start.into_values(), grid.cell_area(), spec, objective)?;
    Ok(InversionResult {
        c0_hat: ScalarField::new(grid, m.x)?,
        history: m.history,
        iterations: m.iterations,
        termination: m.termination,
        evaluations: m.evaluations,
    })
}

pub const HISTORY_HEADER: &str = "iter,cost,normalized_cost,grad_norm,step_length";

/// Cost history as CSV, one row per accepted iteration.
pub fn format_cost_history(history: &[IterRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{:e}\n",
            r.iter, r.cost, r.normalized_cost, r.grad_norm, r.step_length
        ));
    }
    out
}

/// One identical-twin experiment.
#[derive(Debug, Clone)]
pub struct TwinOutcome {
    pub truth: ScalarField,
    pub observations: ScalarField,
    pub result: InversionResult,
    pub model: ForwardModel,
}

/// Model settings shared by every window of a twin experiment.
#[derive(Debug, Clone, Copy)]
pub struct ModelConfig {
    pub t0: f64,
    pub scheme: SchemeSpec,
    pub diffusion: DiffusionSpec,
    pub adjoint: AdjointVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            t0: 0.0,
            scheme: SchemeSpec::default(),
            diffusion: DiffusionSpec::default(),
            adjoint: AdjointVariant::Continuous,
        }
    }
}

/// Builds the true plume, observes it after `window` seconds with the same
/// forward model, and reconstructs it from a uniform background guess.
pub fn run_inversion(
    truth_plume: &PlumeSpec,
    window: f64,
    wind: &WindField,
    config: &ModelConfig,
    spec: &MinimizerSpec,
) -> Result<TwinOutcome> {
    if !(window >= 0.0 && window.is_finite()) {
        return Err(CtmError::invalid("window", "must be finite and nonnegative"));
    }
    let truth = make_plume(wind.grid(), truth_plume)?;
    let model = ForwardModel::new(
        wind,
        config.t0,
        config.t0 + window,
        &config.scheme,
        &config.diffusion,
        config.adjoint,
    )?;
    let observations = model.forward(&truth)?;
    let cost = CostSpec::full_state(observations.clone(), truth_plume.background);
    let result = minimize(None, &cost, &model, spec)?;
    Ok(TwinOutcome {
        truth,
        observations,
        result,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{rel_l2_error, Grid};
    use crate::wind::{make_wind, AnalyticFlow, BickleyParams, WindSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn jet_grid(nx: usize, ny: usize) -> (Grid, WindField) {
        let g = Grid::from_extent(nx, ny, 2.0e7, 6.0e6, 0.0, -3.0e6).unwrap();
        let w = make_wind(&WindSpec::BickleyJet(BickleyParams::default()), &g).unwrap();
        (g, w)
    }

    fn random_field(g: Grid, seed: u64) -> ScalarField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScalarField::new(g, (0..g.len()).map(|_| 1.0 + rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn perfect_fit_has_zero_cost_and_gradient() {
        let (g, w) = jet_grid(16, 8);
        let model = ForwardModel::new(&w, 0.0, 6.0 * 3600.0, &SchemeSpec::default(), &DiffusionSpec::default(), AdjointVariant::Continuous).unwrap();
        let truth = random_field(g, 1);
        let cost = CostSpec::full_state(model.forward(&truth).unwrap(), 1.0);
        let (j, grad) = cost_and_gradient(&truth, &cost, &model).unwrap();
        assert_eq!(j, 0.0);
        assert!(grad.values().iter().all(|&v| v == 0.0));
        let r = minimize(Some(&truth), &cost, &model, &MinimizerSpec::default()).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.c0_hat, truth);
    }

    #[test]
    fn empty_window_cost_is_plain_misfit() {
        let (g, w) = jet_grid(8, 8);
        let model = ForwardModel::new(&w, 0.0, 0.0, &SchemeSpec::default(), &DiffusionSpec::default(), AdjointVariant::Continuous).unwrap();
        let c = random_field(g, 2);
        let y = random_field(g, 3);
        let cost = CostSpec::full_state(y.clone(), 1.0);
        let (j, grad) = cost_and_gradient(&c, &cost, &model).unwrap();
        let diff = c.sub(&y).unwrap();
        let expected = 0.5 * diff.values().iter().map(|v| v * v).sum::<f64>() * g.cell_area();
        assert!(((j - expected) / expected).abs() < 1e-13);
        assert_eq!(grad, diff);
    }

    fn fd_check(scheme: Scheme, tol: f64) {
        let (g, w) = jet_grid(8, 8);
        let spec = SchemeSpec::with_scheme(scheme);
        let model = ForwardModel::new(&w, 0.0, 12.0 * 3600.0, &spec, &DiffusionSpec::default(), AdjointVariant::discrete()).unwrap();
        assert!(model.plan().len() >= 2);
        let background = 1.0;
        let truth = random_field(g, 4);
        let cost = CostSpec::full_state(model.forward(&truth).unwrap(), background);
        let c = random_field(g, 5);
        let (_, grad) = cost_and_gradient(&c, &cost, &model).unwrap();
        let h = 1e-6 * background;
        let mut worst = 0.0f64;
        let gmax = grad.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for k in 0..g.len() {
            let mut plus = c.values().to_vec();
            let mut minus = c.values().to_vec();
            plus[k] += h;
            minus[k] -= h;
            let jp = cost_and_gradient(&ScalarField::new(g, plus).unwrap(), &cost, &model).unwrap().0;
            let jm = cost_and_gradient(&ScalarField::new(g, minus).unwrap(), &cost, &model).unwrap().0;
            let fd = (jp - jm) / (2.0 * h) / g.cell_area();
            worst = worst.max((fd - grad.values()[k]).abs() / gmax);
        }
        assert!(worst <= tol, "{scheme:?}: relative gradient error {worst}");
    }

    #[test]
    fn discrete_gradient_matches_finite_differences_upwind() {
        fd_check(Scheme::Upwind1, 1e-6);
    }

    #[test]
    fn discrete_gradient_matches_finite_differences_vanleer() {
        fd_check(Scheme::VanLeer2, 1e-4);
    }

    #[test]
    fn masked_observations_only_see_observed_cells() {
        let (g, w) = jet_grid(8, 8);
        let model = ForwardModel::new(&w, 0.0, 0.0, &SchemeSpec::default(), &DiffusionSpec::default(), AdjointVariant::Continuous).unwrap();
        let c = random_field(g, 6);
        let y = random_field(g, 7);
        let mask: Vec<bool> = (0..g.len()).map(|k| k % 3 == 0).collect();
        let cost = CostSpec {
            observations: y.clone(),
            obs_operator: ObsOperator::Mask(mask.clone()),
            background: 1.0,
        };
        let (_, grad) = cost_and_gradient(&c, &cost, &model).unwrap();
        for k in 0..g.len() {
            let expected = if mask[k] { c.values()[k] - y.values()[k] } else { 0.0 };
            assert_eq!(grad.values()[k], expected);
        }
        let bad = CostSpec {
            obs_operator: ObsOperator::Mask(vec![true; 3]),
            ..cost
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn linear_model_converges_deeply() {
        let (g, w) = jet_grid(12, 8);
        let spec = SchemeSpec::with_scheme(Scheme::Upwind1);
        let model = ForwardModel::new(&w, 0.0, 1800.0, &spec, &DiffusionSpec::default(), AdjointVariant::discrete()).unwrap();
        let truth = random_field(g, 8);
        let cost = CostSpec::full_state(model.forward(&truth).unwrap(), 1.0);
        let min_spec = MinimizerSpec {
            cost_tol: 0.0,
            grad_tol: 1e-10,
            ..MinimizerSpec::default()
        };
        let r = minimize(None, &cost, &model, &min_spec).unwrap();
        let g0 = r.history[0].grad_norm;
        let gf = r.history.last().unwrap().grad_norm;
        assert!(gf <= 1e-10 * g0, "{gf} vs {g0}, {:?}", r.termination);
        for pair in r.history.windows(2) {
            assert!(pair[1].cost <= pair[0].cost);
        }
    }

    #[test]
    fn history_csv_layout() {
        let rows = [IterRecord {
            iter: 0,
            cost: 2.0,
            normalized_cost: 1.0,
            grad_norm: 0.5,
            step_length: 0.0,
        }];
        assert_eq!(format_cost_history(&rows), "iter,cost,normalized_cost,grad_norm,step_length\n0,2e0,1e0,5e-1,0e0\n");
    }

    #[test]
    fn zero_window_twin_recovers_truth_exactly() {
        let (g, w) = jet_grid(32, 16);
        let plume = PlumeSpec {
            center: (1.0e7, 0.0),
            side_x: 2.0e6,
            side_y: 1.5e6,
            background: 1.0,
            excess_factor: 2.0,
        };
        let out = run_inversion(&plume, 0.0, &w, &ModelConfig::default(), &MinimizerSpec::default()).unwrap();
        assert_eq!(out.observations, out.truth);
        assert_eq!(rel_l2_error(&out.result.c0_hat, &out.truth, 1.0).unwrap(), 0.0);
        let _ = g;
    }

    #[test]
    fn uniform_flow_twin_is_well_posed() {
        let g = Grid::new(16, 8, 1.0e5, 1.0e5, 0.0, 0.0).unwrap();
        let w = WindField::analytic(g, AnalyticFlow::Uniform { speed: 10.0, y0: 0.0 });
        let plume = PlumeSpec {
            center: (5.0e5, 4.0e5),
            side_x: 4.0e5,
            side_y: 4.0e5,
            background: 1.0,
            excess_factor: 2.0,
        };
        // a fifth of a cell of displacement keeps the problem well conditioned
        let out = run_inversion(&plume, 1800.0, &w, &ModelConfig::default(), &MinimizerSpec::default()).unwrap();
        let err = rel_l2_error(&out.result.c0_hat, &out.truth, 1.0).unwrap();
        assert!(err < 1.0, "rel l2 {err}%");
        assert!(out.result.cost_reduction_orders() >= 8.0);
    }
}
