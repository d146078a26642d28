//! Box-constrained limited-memory BFGS.
//!
//! Each iteration fixes the variables sitting on an active bound (gradient
//! pointing out of the box), builds the two-loop L-BFGS direction on the
//! remaining free variables, and backtracks along the projected path
//! `P(x + α d)` until the Armijo condition holds.

use std::collections::VecDeque;

use nalgebra::DVector;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimStatus {
    /// `‖P(x − ∇f) − x‖_∞` below tolerance.
    ProjectedGradient,
    /// Relative cost decrease of the last step below tolerance.
    RelativeDecrease,
    MaxIterations,
    /// Line search failed along steepest descent; best iterate returned.
    Stalled,
}

impl std::fmt::Display for OptimStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            OptimStatus::ProjectedGradient => "projected_gradient",
            OptimStatus::RelativeDecrease => "relative_decrease",
            OptimStatus::MaxIterations => "max_iterations",
            OptimStatus::Stalled => "stalled",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxMinimizerOptions {
    pub memory: usize,
    pub max_iterations: usize,
    pub projected_gradient_tol: f64,
    pub relative_decrease_tol: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for BoxMinimizerOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iterations: 200,
            projected_gradient_tol: 1e-5,
            relative_decrease_tol: 1e-9,
            armijo: 1e-4,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub x: DVector<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub status: OptimStatus,
    pub evaluations: usize,
}

pub fn project(x: &DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) -> DVector<f64> {
    x.zip_zip_map(lower, upper, |v, lo, hi| v.clamp(lo, hi))
}

fn projected_gradient(x: &DVector<f64>, g: &DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) -> DVector<f64> {
    project(&(x - g), lower, upper) - x
}

fn two_loop(grad: &DVector<f64>, history: &VecDeque<(DVector<f64>, DVector<f64>, f64)>) -> DVector<f64> {
    let mut q = grad.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * s.dot(&q);
        q -= y * a;
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        q *= s.dot(y) / y.dot(y);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q += s * (a - b);
    }
    q
}

/// Minimizes `cost` over the box `[lower, upper]` starting from the
/// projection of `x0`. The returned cost never exceeds `cost(P(x0))`.
pub fn minimize_box<F, G>(
    mut cost: F,
    mut gradient: G,
    x0: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    options: &BoxMinimizerOptions,
) -> OptimResult
where
    F: FnMut(&DVector<f64>) -> f64,
    G: FnMut(&DVector<f64>) -> DVector<f64>,
{
    let mut x = project(x0, lower, upper);
    let mut fx = cost(&x);
    let mut g = gradient(&x);
    let mut evaluations = 1;
    let mut history: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::with_capacity(options.memory);

    let done = |x: DVector<f64>, cost: f64, iterations: usize, status: OptimStatus, evaluations: usize| OptimResult {
        x,
        cost,
        iterations,
        status,
        evaluations,
    };

    for iteration in 0..options.max_iterations {
        if projected_gradient(&x, &g, lower, upper).amax() < options.projected_gradient_tol {
            return done(x, fx, iteration, OptimStatus::ProjectedGradient, evaluations);
        }
        let free: Vec<bool> = (0..x.len())
            .map(|i| !((x[i] <= lower[i] && g[i] > 0.0) || (x[i] >= upper[i] && g[i] < 0.0)))
            .collect();
        let mask = |v: DVector<f64>| DVector::from_fn(v.len(), |i, _| if free[i] { v[i] } else { 0.0 });
        let g_free = mask(g.clone());

        let mut direction = -mask(two_loop(&g_free, &history));
        if direction.dot(&g_free) >= 0.0 || !direction.iter().all(|d| d.is_finite()) {
            history.clear();
            direction = -g_free.clone();
        }

        let mut accepted = None;
        loop {
            let mut alpha = if history.is_empty() {
                (1.0 / g_free.amax()).min(1.0)
            } else {
                1.0
            };
            for _ in 0..options.max_backtracks {
                let trial = project(&(&x + &direction * alpha), lower, upper);
                let predicted = g.dot(&(&trial - &x));
                if predicted < 0.0 {
                    let f_trial = cost(&trial);
                    evaluations += 1;
                    if f_trial <= fx + options.armijo * predicted {
                        accepted = Some((trial, f_trial));
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if accepted.is_some() || history.is_empty() {
                break;
            }
            // quasi-Newton direction failed; retry along steepest descent
            history.clear();
            direction = -g_free.clone();
        }

        let Some((x_new, f_new)) = accepted else {
            return done(x, fx, iteration, OptimStatus::Stalled, evaluations);
        };
        let g_new = gradient(&x_new);
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-10 * y.dot(&y) && sy > 0.0 {
            if history.len() == options.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let relative = (fx - f_new) / fx.abs().max(f_new.abs()).max(1.0);
        x = x_new;
        fx = f_new;
        g = g_new;
        if relative < options.relative_decrease_tol {
            let status = if projected_gradient(&x, &g, lower, upper).amax() < options.projected_gradient_tol {
                OptimStatus::ProjectedGradient
            } else {
                OptimStatus::RelativeDecrease
            };
            return done(x, fx, iteration + 1, status, evaluations);
        }
    }
    let status = if projected_gradient(&x, &g, lower, upper).amax() < options.projected_gradient_tol {
        OptimStatus::ProjectedGradient
    } else {
        OptimStatus::MaxIterations
    };
    done(x, fx, options.max_iterations, status, evaluations)
}
