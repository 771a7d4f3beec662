//! Quasi-Newton minimization with a strong-Wolfe line search.
//!
//! [`lbfgs_minimize`] minimizes a smooth function given a closure returning
//! value and gradient. The default method is limited-memory BFGS; a dense
//! inverse-Hessian BFGS and a plain gradient-descent fallback are selectable
//! through [`OptimMethod`].

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest parameter count accepted by [`OptimMethod::Bfgs`].
pub const DENSE_BFGS_MAX_PARAMS: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimMethod {
    Lbfgs,
    /// Dense inverse-Hessian BFGS.
    Bfgs,
    /// Steepest descent with a fixed step, halved until the value decreases.
    GradientDescent {
        step: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub max_iterations: usize,
    /// Sup-norm threshold on the gradient.
    pub gradient_tolerance: f64,
    pub lbfgs_memory: usize,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
    pub max_line_search_steps: usize,
    pub method: OptimMethod,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            max_iterations: 500,
            gradient_tolerance: 1e-5,
            lbfgs_memory: 10,
            wolfe_c1: 1e-4,
            wolfe_c2: 0.9,
            max_line_search_steps: 40,
            method: OptimMethod::Lbfgs,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.gradient_tolerance > 0.0) {
            return bad("gradient_tolerance must be positive");
        }
        if self.lbfgs_memory == 0 {
            return bad("lbfgs_memory must be at least 1");
        }
        if !(self.wolfe_c1 > 0.0 && self.wolfe_c1 < 1.0) {
            return bad("wolfe_c1 must lie in (0, 1)");
        }
        if !(self.wolfe_c2 > self.wolfe_c1 && self.wolfe_c2 < 1.0) {
            return bad("wolfe_c2 must lie in (c1, 1)");
        }
        if self.max_line_search_steps == 0 {
            return bad("max_line_search_steps must be positive");
        }
        if let OptimMethod::GradientDescent { step } = self.method {
            if !(step > 0.0 && step.is_finite()) {
                return bad("gradient descent step must be positive");
            }
        }
        Ok(())
    }
}

/// One accepted step: `x_new = x + step · direction`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: f64,
    pub value_before: f64,
    /// Directional derivative at the start of the step.
    pub slope_before: f64,
    pub value_after: f64,
    /// Directional derivative at the accepted point.
    pub slope_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimReport {
    pub iterations_used: usize,
    pub final_objective: f64,
    /// Sup-norm of the final gradient.
    pub final_gradient_norm: f64,
    /// Value at the initial point followed by the value after every
    /// accepted step.
    pub objective_trace: Vec<f64>,
    pub steps: Vec<StepRecord>,
    pub converged: bool,
    pub diagnostic: Option<String>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn axpy(x: &[f64], alpha: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(a, b)| a + alpha * b).collect()
}

struct Evaluator<F> {
    f: F,
    iteration: usize,
}

impl<F> Evaluator<F>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn eval(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (value, grad) = (self.f)(x)?;
        if grad.len() != x.len() {
            return Err(Error::DimensionMismatch(format!(
                "gradient has length {}, parameters {}",
                grad.len(),
                x.len()
            )));
        }
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteIterate {
                iteration: self.iteration,
            });
        }
        Ok((value, grad))
    }
}

struct Trial {
    step: f64,
    value: f64,
    grad: Vec<f64>,
    slope: f64,
}

enum Search {
    Accepted(Trial),
    Failed(String),
}

/// Minimizer of the cubic interpolating `(a, fa, da)` and `(b, fb, db)`,
/// clamped into `[lo, hi]`; bisection when the cubic has no minimizer.
fn cubic_minimizer(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64, lo: f64, hi: f64) -> f64 {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    let t = if disc >= 0.0 {
        let d2 = disc.sqrt().copysign(b - a);
        b - (b - a) * ((db + d2 - d1) / (db - da + 2.0 * d2))
    } else {
        f64::NAN
    };
    if t.is_finite() {
        t.clamp(lo, hi)
    } else {
        0.5 * (lo + hi)
    }
}

/// Strong-Wolfe line search along `dir` from `x`.
#[allow(clippy::too_many_arguments)]
fn strong_wolfe<F>(
    eval: &mut Evaluator<F>,
    x: &[f64],
    dir: &[f64],
    f0: f64,
    slope0: f64,
    initial_step: f64,
    config: &OptimConfig,
) -> Result<Search>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (c1, c2) = (config.wolfe_c1, config.wolfe_c2);
    let mut evals = 0usize;
    let probe = |eval: &mut Evaluator<F>, step: f64| -> Result<Trial> {
        let (value, grad) = eval.eval(&axpy(x, step, dir))?;
        let slope = dot(&grad, dir);
        Ok(Trial {
            step,
            value,
            grad,
            slope,
        })
    };
    let armijo = |t: &Trial| t.value <= f0 + c1 * t.step * slope0;
    let curvature = |t: &Trial| t.slope.abs() <= -c2 * slope0;

    let mut prev = Trial {
        step: 0.0,
        value: f0,
        grad: Vec::new(),
        slope: slope0,
    };
    let mut step = initial_step;
    let bracket = loop {
        if evals >= config.max_line_search_steps {
            return Ok(Search::Failed(format!(
                "line search did not bracket a Wolfe point in {evals} evaluations"
            )));
        }
        let cur = probe(eval, step)?;
        evals += 1;
        if !armijo(&cur) || (prev.step > 0.0 && cur.value >= prev.value) {
            break (prev, cur);
        }
        if curvature(&cur) {
            return Ok(Search::Accepted(cur));
        }
        if cur.slope >= 0.0 {
            break (cur, prev);
        }
        let next = step * 2.0;
        prev = cur;
        step = next;
    };

    // Zoom: `lo` satisfies sufficient decrease and has the lowest value seen;
    // the interval between lo and hi contains a Wolfe point.
    let (mut lo, mut hi) = bracket;
    while evals < config.max_line_search_steps {
        let (a, b) = (lo.step.min(hi.step), lo.step.max(hi.step));
        let width = b - a;
        if width <= f64::EPSILON * b.max(1.0) {
            break;
        }
        let step = cubic_minimizer(
            lo.step,
            lo.value,
            lo.slope,
            hi.step,
            hi.value,
            hi.slope,
            a + 0.1 * width,
            b - 0.1 * width,
        );
        let cur = probe(eval, step)?;
        evals += 1;
        if !armijo(&cur) || cur.value >= lo.value {
            hi = cur;
        } else {
            if curvature(&cur) {
                return Ok(Search::Accepted(cur));
            }
            if cur.slope * (hi.step - lo.step) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
    }
    Ok(Search::Failed(format!(
        "line search zoom did not satisfy the strong Wolfe conditions in {evals} evaluations"
    )))
}

/// Two-loop recursion: returns `-H g` for the L-BFGS inverse-Hessian
/// approximation built from the stored `(s, y)` pairs.
fn lbfgs_direction(grad: &[f64], memory: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = memory.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in memory.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Dense inverse-Hessian approximation for [`OptimMethod::Bfgs`].
struct DenseInverseHessian {
    n: usize,
    h: Option<Vec<f64>>,
}

impl DenseInverseHessian {
    fn direction(&self, grad: &[f64]) -> Vec<f64> {
        match &self.h {
            None => grad.iter().map(|g| -g).collect(),
            Some(h) => (0..self.n)
                .map(|i| -dot(&h[i * self.n..(i + 1) * self.n], grad))
                .collect(),
        }
    }

    fn update(&mut self, s: &[f64], y: &[f64]) {
        let n = self.n;
        let sy = dot(s, y);
        let rho = 1.0 / sy;
        let h = self.h.get_or_insert_with(|| {
            let gamma = sy / dot(y, y);
            let mut h = vec![0.0; n * n];
            for i in 0..n {
                h[i * n + i] = gamma;
            }
            h
        });
        // H+ = (I - ρ s yᵀ) H (I - ρ y sᵀ) + ρ s sᵀ
        let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], y)).collect();
        let yhy = dot(y, &hy);
        for i in 0..n {
            for j in 0..n {
                h[i * n + j] += -rho * (s[i] * hy[j] + hy[i] * s[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
            }
        }
    }
}

/// Minimizes `f_and_grad` from `init`.
///
/// Every accepted quasi-Newton step satisfies the strong Wolfe conditions
/// with the configured `c1`, `c2`. A line-search failure stops the run and
/// returns the last accepted point with `converged = false`.
pub fn lbfgs_minimize<F>(f_and_grad: F, init: &[f64], config: &OptimConfig) -> Result<(Vec<f64>, OptimReport)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    config.validate()?;
    let n = init.len();
    if config.method == OptimMethod::Bfgs && n > DENSE_BFGS_MAX_PARAMS {
        return Err(Error::InvalidConfig(format!(
            "dense BFGS is limited to {DENSE_BFGS_MAX_PARAMS} parameters, got {n}"
        )));
    }

    let mut eval = Evaluator {
        f: f_and_grad,
        iteration: 0,
    };
    let mut x = init.to_vec();
    let (mut value, mut grad) = eval.eval(&x)?;
    let mut report = OptimReport {
        iterations_used: 0,
        final_objective: value,
        final_gradient_norm: sup_norm(&grad),
        objective_trace: vec![value],
        steps: Vec::new(),
        converged: false,
        diagnostic: None,
    };

    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut dense = DenseInverseHessian { n, h: None };

    while report.final_gradient_norm > config.gradient_tolerance {
        if report.iterations_used >= config.max_iterations {
            report.diagnostic = Some(format!("iteration limit {} reached", config.max_iterations));
            break;
        }
        eval.iteration = report.iterations_used + 1;

        if let OptimMethod::GradientDescent { step } = config.method {
            let mut step = step;
            let mut accepted = None;
            for _ in 0..config.max_line_search_steps {
                let cand = axpy(&x, -step, &grad);
                let (v, g) = eval.eval(&cand)?;
                if v < value {
                    accepted = Some((cand, v, g));
                    break;
                }
                step *= 0.5;
            }
            let Some((cand, v, g)) = accepted else {
                report.diagnostic = Some("gradient descent could not decrease the objective".into());
                break;
            };
            report.steps.push(StepRecord {
                step,
                value_before: value,
                slope_before: -dot(&grad, &grad),
                value_after: v,
                slope_after: -dot(&g, &grad),
            });
            x = cand;
            value = v;
            grad = g;
        } else {
            let mut dir = match config.method {
                OptimMethod::Bfgs => dense.direction(&grad),
                _ => lbfgs_direction(&grad, &memory),
            };
            let mut slope = dot(&grad, &dir);
            if !(slope < 0.0) {
                memory.clear();
                dense.h = None;
                dir = grad.iter().map(|g| -g).collect();
                slope = dot(&grad, &dir);
            }
            let initial_step = if memory.is_empty() && dense.h.is_none() {
                (1.0 / dot(&grad, &grad).sqrt()).min(1.0)
            } else {
                1.0
            };
            let trial = match strong_wolfe(&mut eval, &x, &dir, value, slope, initial_step, config)? {
                Search::Accepted(t) => t,
                Search::Failed(msg) => {
                    report.diagnostic = Some(msg);
                    break;
                }
            };
            let s: Vec<f64> = dir.iter().map(|d| trial.step * d).collect();
            let y: Vec<f64> = trial.grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
                match config.method {
                    OptimMethod::Bfgs => dense.update(&s, &y),
                    _ => {
                        if memory.len() == config.lbfgs_memory {
                            memory.pop_front();
                        }
                        memory.push_back((s, y, 1.0 / sy));
                    }
                }
            }
            report.steps.push(StepRecord {
                step: trial.step,
                value_before: value,
                slope_before: slope,
                value_after: trial.value,
                slope_after: trial.slope,
            });
            x = axpy(&x, trial.step, &dir);
            value = trial.value;
            grad = trial.grad;
        }

        report.iterations_used += 1;
        report.objective_trace.push(value);
        report.final_objective = value;
        report.final_gradient_norm = sup_norm(&grad);
    }

    report.converged = report.final_gradient_norm <= config.gradient_tolerance;
    if report.converged {
        report.diagnostic = None;
    }
    Ok((x, report))
}
