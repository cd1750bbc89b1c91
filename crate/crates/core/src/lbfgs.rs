//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! Vectors live in a weighted Euclidean space: every inner product is the
//! plain dot product times a constant `weight` (the cell area for fields),
//! and gradients are Riesz representers in that inner product.

use std::collections::VecDeque;

use crate::error::{CtmError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinimizerSpec {
    pub max_iters: usize,
    pub memory: usize,
    pub c1: f64,
    pub c2: f64,
    /// Stop once ‖g‖ ≤ grad_tol·‖g₀‖.
    pub grad_tol: f64,
    /// Stop once J/J₀ ≤ cost_tol.
    pub cost_tol: f64,
    /// Function evaluations allowed per line search.
    pub max_line_evals: usize,
}

impl Default for MinimizerSpec {
    fn default() -> Self {
        Self {
            max_iters: 99,
            memory: 8,
            c1: 1e-4,
            c2: 0.9,
            grad_tol: 1e-12,
            cost_tol: 1e-16,
            max_line_evals: 30,
        }
    }
}

impl MinimizerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(CtmError::invalid("max_iters", "must be at least 1"));
        }
        if self.memory < 1 {
            return Err(CtmError::invalid("memory", "must be at least 1"));
        }
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(CtmError::invalid(
                "c1",
                format!("need 0 < c1 < c2 < 1, got c1={} c2={}", self.c1, self.c2),
            ));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(CtmError::invalid("grad_tol", "must be nonnegative"));
        }
        if !(self.cost_tol >= 0.0) {
            return Err(CtmError::invalid("cost_tol", "must be nonnegative"));
        }
        if self.max_line_evals < 2 {
            return Err(CtmError::invalid("max_line_evals", "must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    MaxIters,
    GradTol,
    CostTol,
    LineSearchFailure,
}

impl Termination {
    pub fn name(&self) -> &'static str {
        match self {
            Termination::MaxIters => "max_iters",
            Termination::GradTol => "grad_tol",
            Termination::CostTol => "cost_tol",
            Termination::LineSearchFailure => "line_search_failure",
        }
    }
}

/// State after an accepted iteration (iteration 0 is the starting point).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub cost: f64,
    pub normalized_cost: f64,
    pub grad_norm: f64,
    pub step_length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub cost: f64,
    pub history: Vec<IterRecord>,
    pub iterations: usize,
    pub termination: Termination,
    pub evaluations: usize,
}

struct Space {
    weight: f64,
}

impl Space {
    fn dot(&self, a: &[f64], b: &[f64]) -> f64 {
        self.weight * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
    }
}

fn axpy(x: &[f64], alpha: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(a, b)| a + alpha * b).collect()
}

struct Eval {
    alpha: f64,
    f: f64,
    g: Vec<f64>,
    dg: f64,
}

/// Minimizer of the cubic through (a, fa, da) and (b, fb, db), if any.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> Option<f64> {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if !(disc >= 0.0) {
        return None;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    t.is_finite().then_some(t)
}

struct LineSearch<'a, F> {
    f: &'a mut F,
    x: &'a [f64],
    d: &'a [f64],
    f0: f64,
    dg0: f64,
    spec: &'a MinimizerSpec,
    space: &'a Space,
    evals: usize,
    best: Option<Eval>,
}

impl<F> LineSearch<'_, F>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn eval(&mut self, alpha: f64) -> Result<Eval> {
        self.evals += 1;
        let (f, g) = (self.f)(&axpy(self.x, alpha, self.d))?;
        let dg = self.space.dot(&g, self.d);
        let e = Eval { alpha, f, g, dg };
        if f.is_finite() && self.best.as_ref().map_or(true, |b| f < b.f) {
            self.best = Some(Eval {
                alpha,
                f,
                g: e.g.clone(),
                dg,
            });
        }
        Ok(e)
    }

    fn armijo_fails(&self, e: &Eval) -> bool {
        !(e.f <= self.f0 + self.spec.c1 * e.alpha * self.dg0)
    }

    fn curvature_holds(&self, e: &Eval) -> bool {
        e.dg.abs() <= -self.spec.c2 * self.dg0
    }

    fn search(&mut self, alpha0: f64) -> Result<Option<Eval>> {
        let mut prev = Eval {
            alpha: 0.0,
            f: self.f0,
            g: Vec::new(),
            dg: self.dg0,
        };
        let mut alpha = alpha0;
        let mut first = true;
        while self.evals < self.spec.max_line_evals {
            let cur = self.eval(alpha)?;
            if self.armijo_fails(&cur) || (!first && cur.f >= prev.f) {
                return self.zoom(prev, cur);
            }
            if self.curvature_holds(&cur) {
                return Ok(Some(cur));
            }
            if cur.dg >= 0.0 {
                return self.zoom(cur, prev);
            }
            // extrapolate, using the cubic when it points further out
            let next = cubic_min(prev.alpha, prev.f, prev.dg, cur.alpha, cur.f, cur.dg)
                .filter(|t| *t > 1.1 * cur.alpha && *t < 10.0 * cur.alpha)
                .unwrap_or(4.0 * cur.alpha);
            prev = cur;
            alpha = next;
            first = false;
        }
        Ok(None)
    }

    fn zoom(&mut self, mut lo: Eval, mut hi: Eval) -> Result<Option<Eval>> {
        while self.evals < self.spec.max_line_evals {
            let (a, b) = (lo.alpha.min(hi.alpha), lo.alpha.max(hi.alpha));
            let width = b - a;
            if width <= f64::EPSILON * b.max(1e-300) {
                return Ok(None);
            }
            let guard = 0.1 * width;
            let trial = if hi.g.is_empty() && hi.alpha == 0.0 {
                None
            } else {
                cubic_min(lo.alpha, lo.f, lo.dg, hi.alpha, hi.f, hi.dg)
            };
            let alpha = match trial {
                Some(t) if t >= a + guard && t <= b - guard => t,
                Some(t) if t > a && t < b => t.clamp(a + guard, b - guard),
                _ => 0.5 * (a + b),
            };
            let cur = self.eval(alpha)?;
            if self.armijo_fails(&cur) || cur.f >= lo.f {
                hi = cur;
            } else {
                if self.curvature_holds(&cur) {
                    return Ok(Some(cur));
                }
                if cur.dg * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = cur;
            }
        }
        Ok(None)
    }
}

/// L-BFGS two-loop recursion: `-H g` for the stored curvature pairs.
fn search_direction(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>, space: &Space) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * space.dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = space.dot(s, y) / space.dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
        let b = rho * space.dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Minimizes `f` from `x0`. `f` returns the cost and its gradient.
pub fn minimize<F>(x0: Vec<f64>, weight: f64, spec: &MinimizerSpec, mut f: F) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    spec.validate()?;
    let space = Space { weight };
    let mut x = x0;
    let (mut fx, mut g) = f(&x)?;
    let mut evaluations = 1;
    let f0 = fx;
    let normalize = |v: f64| if f0 > 0.0 { v / f0 } else { 0.0 };
    let g0_norm = space.dot(&g, &g).sqrt();
    let mut history = vec![IterRecord {
        iter: 0,
        cost: fx,
        normalized_cost: normalize(fx),
        grad_norm: g0_norm,
        step_length: 0.0,
    }];
    let finish = |x, cost, history, iterations, termination, evaluations| {
        Ok(Minimum {
            x,
            cost,
            history,
            iterations,
            termination,
            evaluations,
        })
    };
    if g0_norm == 0.0 || fx == 0.0 {
        let term = if fx == 0.0 { Termination::CostTol } else { Termination::GradTol };
        return finish(x, fx, history, 0, term, evaluations);
    }

    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(spec.memory);
    for iter in 1..=spec.max_iters {
        // on a failed search with curvature memory, retry once along -g
        let (d, step) = loop {
            let d = search_direction(&g, &pairs, &space);
            let (d, dg0) = match space.dot(&g, &d) {
                dg0 if dg0 < 0.0 => (d, dg0),
                _ => {
                    pairs.clear();
                    (g.iter().map(|v| -v).collect(), -space.dot(&g, &g))
                }
            };
            let mut ls = LineSearch {
                f: &mut f,
                x: &x,
                d: &d,
                f0: fx,
                dg0,
                spec,
                space: &space,
                evals: 0,
                best: None,
            };
            let found = ls.search(1.0)?;
            evaluations += ls.evals;
            let best = ls.best.take();
            match found {
                Some(step) => break (d, step),
                None if !pairs.is_empty() => pairs.clear(),
                None => {
                    if let Some(b) = best.filter(|b| b.f < fx) {
                        x = axpy(&x, b.alpha, &d);
                        fx = b.f;
                    }
                    return finish(x, fx, history, iter - 1, Termination::LineSearchFailure, evaluations);
                }
            }
        };

        let x_new = axpy(&x, step.alpha, &d);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = step.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = space.dot(&s, &y);
        if sy > 0.0 {
            if pairs.len() == spec.memory {
                pairs.pop_front();
            }
            pairs.push_back((s.clone(), y, 1.0 / sy));
        }
        let step_length = space.dot(&s, &s).sqrt();
        x = x_new;
        fx = step.f;
        g = step.g;
        let grad_norm = space.dot(&g, &g).sqrt();
        history.push(IterRecord {
            iter,
            cost: fx,
            normalized_cost: normalize(fx),
            grad_norm,
            step_length,
        });
        if normalize(fx) <= spec.cost_tol {
            return finish(x, fx, history, iter, Termination::CostTol, evaluations);
        }
        if grad_norm <= spec.grad_tol * g0_norm {
            return finish(x, fx, history, iter, Termination::GradTol, evaluations);
        }
    }
    finish(x, fx, history, spec.max_iters, Termination::MaxIters, evaluations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn diag_quadratic(h: Vec<f64>, target: Vec<f64>) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> {
        weighted_quadratic(h, target, 1.0)
    }

    /// Gradient returned as the representer in the `weight`-scaled product.
    fn weighted_quadratic(h: Vec<f64>, target: Vec<f64>, weight: f64) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> {
        move |x: &[f64]| {
            let mut f = 0.0;
            let mut g = vec![0.0; x.len()];
            for k in 0..x.len() {
                let r = x[k] - target[k];
                f += 0.5 * h[k] * r * r;
                g[k] = h[k] * r / weight;
            }
            Ok((f, g))
        }
    }

    #[test]
    fn separable_quadratic_in_three_iterations() {
        // three distinct curvatures: conjugate directions finish in three steps
        let h = vec![1.0, 4.0, 9.0, 4.0, 1.0, 9.0];
        let target = vec![1.0, -2.0, 0.5, 3.0, -1.0, 2.0];
        let spec = MinimizerSpec {
            c2: 2e-4,
            ..MinimizerSpec::default()
        };
        let m = minimize(vec![0.0; 6], 1.0, &spec, diag_quadratic(h, target.clone())).unwrap();
        assert!(m.iterations <= 3, "{} iterations, {:?}", m.iterations, m.termination);
        for (a, b) in m.x.iter().zip(&target) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn start_at_minimum_stops_immediately() {
        let m = minimize(vec![1.0, 2.0], 1.0, &MinimizerSpec::default(), diag_quadratic(vec![1.0, 2.0], vec![1.0, 2.0])).unwrap();
        assert_eq!(m.iterations, 0);
        assert_eq!(m.evaluations, 1);
        assert_eq!(m.history.len(), 1);
    }

    #[test]
    fn rosenbrock_converges() {
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let (a, b) = (x[0], x[1]);
            let fv = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            Ok((fv, g))
        };
        let m = minimize(vec![-1.2, 1.0], 1.0, &MinimizerSpec::default(), f).unwrap();
        assert!((m.x[0] - 1.0).abs() < 1e-5 && (m.x[1] - 1.0).abs() < 1e-5, "{:?} {:?}", m.x, m.termination);
    }

    #[test]
    fn invalid_constants_rejected() {
        let spec = MinimizerSpec {
            c1: 0.5,
            c2: 0.4,
            ..MinimizerSpec::default()
        };
        assert!(spec.validate().is_err());
        let spec = MinimizerSpec {
            max_iters: 0,
            ..MinimizerSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    proptest! {
        #[test]
        fn history_is_monotone(
            h in proptest::collection::vec(0.1f64..50.0, 8),
            t in proptest::collection::vec(-5.0f64..5.0, 8),
            w in 0.01f64..100.0,
        ) {
            let m = minimize(vec![0.0; 8], w, &MinimizerSpec::default(), weighted_quadratic(h, t.clone(), w)).unwrap();
            for pair in m.history.windows(2) {
                prop_assert!(pair[1].cost <= pair[0].cost);
            }
            for (a, b) in m.x.iter().zip(&t) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
