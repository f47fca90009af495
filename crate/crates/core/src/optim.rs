//! Limited-memory BFGS minimizer with a strong-Wolfe line search
//! (bracketing + zoom, cubic interpolation), plus a central-difference
//! gradient checker used to validate the analytic objectives.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Objective with analytic gradient: `eval(x) -> (loss, grad)`.
pub struct OptimProblem<'a> {
    pub dim: usize,
    pub eval: Box<dyn Fn(&[f64]) -> (f64, Vec<f64>) + 'a>,
}

impl<'a> OptimProblem<'a> {
    pub fn new(dim: usize, eval: impl Fn(&[f64]) -> (f64, Vec<f64>) + 'a) -> OptimProblem<'a> {
        OptimProblem {
            dim,
            eval: Box::new(eval),
        }
    }

    fn eval_checked(&self, x: &[f64], iteration: usize) -> Result<(f64, Vec<f64>)> {
        let (loss, grad) = (self.eval)(x);
        assert_eq!(grad.len(), self.dim, "objective returned gradient of wrong length");
        if !loss.is_finite() {
            return Err(Error::NonFiniteObjective {
                what: "loss",
                iteration,
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteObjective {
                what: "gradient",
                iteration,
            });
        }
        Ok((loss, grad))
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsConfig {
    /// Number of curvature pairs retained (must be >= 1).
    pub memory: usize,
    pub max_iters: usize,
    /// Terminate when the gradient 2-norm drops below this.
    pub grad_tol: f64,
    /// Terminate when the relative loss decrease of an accepted step
    /// drops below this.
    pub loss_rel_tol: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            memory: 10,
            max_iters: 500,
            grad_tol: 1e-8,
            loss_rel_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimReport {
    pub final_params: Vec<f64>,
    pub final_loss: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
    /// Loss at the start plus after every accepted step (non-increasing).
    pub loss_history: Vec<f64>,
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;
const MAX_LINE_SEARCH_EVALS: usize = 50;

struct CurvaturePair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimize `problem` starting from `x0`.
///
/// Line-search failure is not an error: the best accepted iterate is
/// returned with `converged = false`. A non-finite loss or gradient from
/// the objective is an error.
pub fn lbfgs_minimize(
    problem: &OptimProblem,
    x0: &[f64],
    config: &LbfgsConfig,
) -> Result<OptimReport> {
    if x0.len() != problem.dim {
        return Err(Error::InvalidParameter(format!(
            "x0 length {} != problem dim {}",
            x0.len(),
            problem.dim
        )));
    }
    if config.memory == 0 {
        return Err(Error::InvalidParameter("lbfgs memory must be >= 1".into()));
    }

    let mut x = x0.to_vec();
    let (mut f, mut g) = problem.eval_checked(&x, 0)?;
    let mut g_norm = norm(&g);
    let mut history: VecDeque<CurvaturePair> = VecDeque::with_capacity(config.memory);
    let mut loss_history = vec![f];

    let mut iterations = 0;
    let mut converged = g_norm <= config.grad_tol;

    while !converged && iterations < config.max_iters {
        let mut d = two_loop_direction(&history, &g);
        let mut gtd = dot(&g, &d);
        if gtd >= 0.0 {
            // curvature information is unusable; fall back to steepest descent
            history.clear();
            d = g.iter().map(|v| -v).collect();
            gtd = dot(&g, &d);
        }
        debug_assert!(gtd < 0.0, "search direction must be a descent direction");

        let ls = strong_wolfe(problem, &x, f, &d, gtd, iterations + 1)?;
        let accepted = match ls {
            Some(a) => a,
            None => break, // keep the best iterate, converged stays false
        };

        let s: Vec<f64> = accepted
            .x
            .iter()
            .zip(&x)
            .map(|(new, old)| new - old)
            .collect();
        let y: Vec<f64> = accepted
            .grad
            .iter()
            .zip(&g)
            .map(|(new, old)| new - old)
            .collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * norm(&s) * norm(&y) {
            if history.len() == config.memory {
                history.pop_front();
            }
            history.push_back(CurvaturePair {
                rho: 1.0 / sy,
                s,
                y,
            });
        }

        let prev_f = f;
        x = accepted.x;
        f = accepted.loss;
        g = accepted.grad;
        g_norm = norm(&g);
        iterations += 1;
        loss_history.push(f);

        if g_norm <= config.grad_tol {
            converged = true;
        } else if prev_f - f <= config.loss_rel_tol * prev_f.abs().max(1.0) {
            converged = true;
        }
    }

    Ok(OptimReport {
        final_params: x,
        final_loss: f,
        iterations,
        converged,
        grad_norm: g_norm,
        loss_history,
    })
}

/// Two-loop recursion with the usual gamma = s.y / y.y initial scaling.
fn two_loop_direction(history: &VecDeque<CurvaturePair>, g: &[f64]) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for pair in history.iter().rev() {
        let alpha = pair.rho * dot(&pair.s, &q);
        for (qi, yi) in q.iter_mut().zip(&pair.y) {
            *qi -= alpha * yi;
        }
        alphas.push(alpha);
    }
    let gamma = history
        .back()
        .map(|p| dot(&p.s, &p.y) / dot(&p.y, &p.y))
        .unwrap_or(1.0);
    for qi in q.iter_mut() {
        *qi *= gamma;
    }
    for (pair, alpha) in history.iter().zip(alphas.iter().rev()) {
        let beta = pair.rho * dot(&pair.y, &q);
        for (qi, si) in q.iter_mut().zip(&pair.s) {
            *qi += (alpha - beta) * si;
        }
    }
    for qi in q.iter_mut() {
        *qi = -*qi;
    }
    q
}

struct Accepted {
    x: Vec<f64>,
    loss: f64,
    grad: Vec<f64>,
}

struct Probe {
    alpha: f64,
    loss: f64,
    dphi: f64,
    x: Vec<f64>,
    grad: Vec<f64>,
}

/// Strong-Wolfe line search (Nocedal & Wright, algorithms 3.5/3.6).
/// Returns `None` when the evaluation budget is exhausted without finding
/// an acceptable step.
fn strong_wolfe(
    problem: &OptimProblem,
    x: &[f64],
    f0: f64,
    d: &[f64],
    dphi0: f64,
    iteration: usize,
) -> Result<Option<Accepted>> {
    let mut evals = 0usize;
    let mut probe = |alpha: f64, evals: &mut usize| -> Result<Probe> {
        let xa: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect();
        let (loss, grad) = problem.eval_checked(&xa, iteration)?;
        *evals += 1;
        Ok(Probe {
            alpha,
            loss,
            dphi: dot(&grad, d),
            x: xa,
            grad,
        })
    };

    // bracketing phase
    let mut prev = Probe {
        alpha: 0.0,
        loss: f0,
        dphi: dphi0,
        x: x.to_vec(),
        grad: Vec::new(), // never returned: alpha = 0 is not an acceptable step
    };
    let mut alpha = 1.0;
    let (mut lo, mut hi);
    loop {
        if evals >= MAX_LINE_SEARCH_EVALS {
            return Ok(None);
        }
        let cur = probe(alpha, &mut evals)?;
        if cur.loss > f0 + C1 * cur.alpha * dphi0 || (prev.alpha > 0.0 && cur.loss >= prev.loss) {
            lo = prev;
            hi = cur;
            break;
        }
        if cur.dphi.abs() <= -C2 * dphi0 {
            return Ok(Some(Accepted {
                x: cur.x,
                loss: cur.loss,
                grad: cur.grad,
            }));
        }
        if cur.dphi >= 0.0 {
            hi = prev;
            lo = cur;
            break;
        }
        alpha = (cur.alpha * 2.0).min(1e10);
        prev = cur;
    }

    // zoom phase: lo holds the lower-loss end of the bracket
    while evals < MAX_LINE_SEARCH_EVALS {
        let span = (hi.alpha - lo.alpha).abs();
        if span < 1e-16 * lo.alpha.abs().max(1.0) {
            return Ok(None);
        }
        let mut alpha_j = cubic_interpolate(&lo, &hi);
        let (a_min, a_max) = if lo.alpha < hi.alpha {
            (lo.alpha, hi.alpha)
        } else {
            (hi.alpha, lo.alpha)
        };
        // keep clear of the bracket ends
        let margin = 0.1 * span;
        if !alpha_j.is_finite() || alpha_j < a_min + margin || alpha_j > a_max - margin {
            alpha_j = 0.5 * (a_min + a_max);
        }
        let cur = probe(alpha_j, &mut evals)?;
        if cur.loss <= f0 + C1 * cur.alpha * dphi0 && cur.dphi.abs() <= -C2 * dphi0 {
            return Ok(Some(Accepted {
                x: cur.x,
                loss: cur.loss,
                grad: cur.grad,
            }));
        }
        if cur.loss > f0 + C1 * cur.alpha * dphi0 || cur.loss >= lo.loss {
            hi = cur;
        } else {
            if cur.dphi * (hi.alpha - lo.alpha) >= 0.0 {
                hi = Probe {
                    alpha: lo.alpha,
                    loss: lo.loss,
                    dphi: lo.dphi,
                    x: lo.x.clone(),
                    grad: lo.grad.clone(),
                };
            }
            lo = cur;
        }
    }
    Ok(None)
}

/// Minimizer of the cubic matching both endpoints' value and slope.
fn cubic_interpolate(a: &Probe, b: &Probe) -> f64 {
    let d1 = a.dphi + b.dphi - 3.0 * (a.loss - b.loss) / (a.alpha - b.alpha);
    let d2_sq = d1 * d1 - a.dphi * b.dphi;
    if d2_sq < 0.0 {
        return f64::NAN;
    }
    let d2 = d2_sq.sqrt().copysign(b.alpha - a.alpha);
    b.alpha - (b.alpha - a.alpha) * (b.dphi + d2 - d1) / (b.dphi - a.dphi + 2.0 * d2)
}

/// Max relative error between the analytic gradient and central finite
/// differences: `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn check_gradient(problem: &OptimProblem, x: &[f64], h: f64) -> f64 {
    assert!(h > 0.0);
    let (_, analytic) = (problem.eval)(x);
    let mut max_rel = 0.0f64;
    let mut xp = x.to_vec();
    for i in 0..problem.dim {
        xp[i] = x[i] + h;
        let (fp, _) = (problem.eval)(&xp);
        xp[i] = x[i] - h;
        let (fm, _) = (problem.eval)(&xp);
        xp[i] = x[i];
        let numeric = (fp - fm) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(center: &[f64]) -> OptimProblem<'_> {
        OptimProblem::new(center.len(), move |x| {
            let diff: Vec<f64> = x.iter().zip(center).map(|(a, b)| a - b).collect();
            let loss = 0.5 * dot(&diff, &diff);
            (loss, diff)
        })
    }

    fn rosenbrock<'a>() -> OptimProblem<'a> {
        OptimProblem::new(2, |x| {
            let (a, b) = (1.0, 100.0);
            let f = (a - x[0]).powi(2) + b * (x[1] - x[0] * x[0]).powi(2);
            let g = vec![
                -2.0 * (a - x[0]) - 4.0 * b * (x[1] - x[0] * x[0]) * x[0],
                2.0 * b * (x[1] - x[0] * x[0]),
            ];
            (f, g)
        })
    }

    #[test]
    fn quadratic_is_exact_in_few_iterations() {
        let c = [3.0, -1.5, 0.25, 7.0];
        let report = lbfgs_minimize(
            &quadratic(&c),
            &[0.0, 0.0, 0.0, 0.0],
            &LbfgsConfig::default(),
        )
        .unwrap();
        assert!(report.converged);
        assert!(report.iterations <= 5, "{} iterations", report.iterations);
        for (got, want) in report.final_params.iter().zip(&c) {
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn rosenbrock_converges() {
        let report = lbfgs_minimize(&rosenbrock(), &[-1.2, 1.0], &LbfgsConfig::default()).unwrap();
        assert!(report.converged);
        assert!(report.iterations <= 200, "{} iterations", report.iterations);
        assert!((report.final_params[0] - 1.0).abs() < 1e-6);
        assert!((report.final_params[1] - 1.0).abs() < 1e-6);
        // verify the reported loss by plugging the iterate back in
        let (f, _) = (rosenbrock().eval)(&report.final_params);
        assert!((f - report.final_loss).abs() < 1e-12);
        assert!(f < 1e-10);
    }

    #[test]
    fn stationary_start_converges_immediately() {
        let problem = OptimProblem::new(3, |x| (1.0 + 0.0 * x[0], vec![0.0; 3]));
        let report = lbfgs_minimize(&problem, &[0.3, 0.4, 0.5], &LbfgsConfig::default()).unwrap();
        assert!(report.converged);
        assert_eq!(report.iterations, 0);
        assert_eq!(report.final_params, vec![0.3, 0.4, 0.5]);
    }

    #[test]
    fn memory_one_still_converges_on_quadratic() {
        let c = [1.0, 2.0, 3.0];
        let cfg = LbfgsConfig {
            memory: 1,
            ..LbfgsConfig::default()
        };
        let report = lbfgs_minimize(&quadratic(&c), &[9.0, -4.0, 0.1], &cfg).unwrap();
        assert!(report.converged);
        for (got, want) in report.final_params.iter().zip(&c) {
            assert!((got - want).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_memory_is_rejected() {
        let cfg = LbfgsConfig {
            memory: 0,
            ..LbfgsConfig::default()
        };
        assert!(matches!(
            lbfgs_minimize(&quadratic(&[0.0]), &[1.0], &cfg),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn loss_history_is_monotone_non_increasing() {
        let report = lbfgs_minimize(&rosenbrock(), &[-1.2, 1.0], &LbfgsConfig::default()).unwrap();
        for w in report.loss_history.windows(2) {
            assert!(w[1] <= w[0], "loss increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn identical_inputs_give_identical_iterates() {
        let r1 = lbfgs_minimize(&rosenbrock(), &[-1.2, 1.0], &LbfgsConfig::default()).unwrap();
        let r2 = lbfgs_minimize(&rosenbrock(), &[-1.2, 1.0], &LbfgsConfig::default()).unwrap();
        assert_eq!(r1.final_params, r2.final_params);
        assert_eq!(r1.loss_history, r2.loss_history);
        assert_eq!(r1.iterations, r2.iterations);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let problem = OptimProblem::new(1, |x| {
            if x[0] > 0.5 {
                (f64::NAN, vec![0.0])
            } else {
                (x[0] * x[0], vec![2.0 * x[0]])
            }
        });
        let err = lbfgs_minimize(&problem, &[10.0], &LbfgsConfig::default());
        assert!(matches!(err, Err(Error::NonFiniteObjective { .. })));
    }

    #[test]
    fn check_gradient_on_quadratic_is_tight() {
        let c = [0.7, -0.3];
        let problem = quadratic(&c);
        let err = check_gradient(&problem, &[1.0, 2.0], 1e-6);
        assert!(err < 1e-7, "rel error {err}");
    }

    #[test]
    fn check_gradient_flags_a_wrong_gradient() {
        let problem = OptimProblem::new(1, |x| (x[0] * x[0], vec![3.0 * x[0]]));
        let err = check_gradient(&problem, &[1.0], 1e-6);
        assert!(err > 0.3);
    }
}
