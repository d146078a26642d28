//! Strong-constraint variational estimate over one observation window and
//! the deterministic pseudo-observation path built from it.
//!
//! The cost is
//! `J(x) = ½⟨x − μ, Σ⁻¹(x − μ)⟩ + ½⟨Y − h(X(t₁; x)), Σ_y⁻¹(Y − h(X(t₁; x)))⟩`
//! where `X(t₁; x)` is the noise-free flow of `x` over the window and
//! `(μ, Σ)` are the ensemble moments at the window start.

use nalgebra::{DMatrix, DVector};

use crate::ensemble::{EnsembleMoments, ObservationModel};
use crate::error::{FilterError, Result};
use crate::optimizer::{self, BoxMinimizerOptions, OptimResult};
use crate::sde::{self, SdeModel};

/// Cost returned when the flow blows up.
pub const BLOWUP_COST: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariationalSettings {
    /// Diagonal shift for poorly conditioned prior covariances.
    pub regularization: f64,
    /// Box half-width in prior standard deviations.
    pub bound_width: f64,
    pub memory: usize,
    pub max_iterations: usize,
    pub projected_gradient_tol: f64,
    pub relative_decrease_tol: f64,
}

impl Default for VariationalSettings {
    fn default() -> Self {
        Self {
            regularization: 1e-6,
            bound_width: 10.0,
            memory: 10,
            max_iterations: 200,
            projected_gradient_tol: 1e-5,
            relative_decrease_tol: 1e-9,
        }
    }
}

impl VariationalSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.regularization > 0.0) || !(self.bound_width > 0.0) || self.memory == 0 || self.max_iterations == 0
        {
            return Err(FilterError::Config(
                "variational settings need positive regularization, bound_width, memory and max_iterations".into(),
            ));
        }
        Ok(())
    }

    fn optimizer_options(&self) -> BoxMinimizerOptions {
        BoxMinimizerOptions {
            memory: self.memory,
            max_iterations: self.max_iterations,
            projected_gradient_tol: self.projected_gradient_tol,
            relative_decrease_tol: self.relative_decrease_tol,
            ..Default::default()
        }
    }
}

/// Adds `eps·Id` when the smallest eigenvalue is below `eps` or the condition
/// number exceeds 1e8. An indefinite input is shifted by `eps − λ_min`
/// instead, so the result is always SPD with smallest eigenvalue `≥ eps`.
pub fn regularize_covariance(cov: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigenvalues();
    let lo = eig.min();
    let hi = eig.max();
    let ill = lo < eps || hi / lo > 1e8;
    if !ill {
        return sym;
    }
    let shift = eps + (-lo).max(0.0);
    &sym + DMatrix::identity(sym.nrows(), sym.ncols()) * shift
}

/// One window of the variational problem.
pub struct VariationalProblem<'a, M: SdeModel + ?Sized> {
    pub model: &'a M,
    pub obs_model: &'a ObservationModel,
    pub prior_mean: DVector<f64>,
    /// Regularized prior covariance.
    pub prior_cov: DMatrix<f64>,
    prior_precision: DMatrix<f64>,
    pub observation: DVector<f64>,
    pub steps: usize,
    pub dt: f64,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl<'a, M: SdeModel + ?Sized> VariationalProblem<'a, M> {
    /// Window `[t0, t1]` with the default box `μ ± width·√diag(Σ)`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &'a M,
        obs_model: &'a ObservationModel,
        moments: &EnsembleMoments,
        observation: &DVector<f64>,
        t0: f64,
        t1: f64,
        dt: f64,
        settings: &VariationalSettings,
    ) -> Result<Self> {
        settings.validate()?;
        let steps = sde::step_count(t0, t1, dt)?;
        let prior_cov = regularize_covariance(&moments.covariance, settings.regularization);
        let prior_precision = prior_cov
            .clone()
            .cholesky()
            .ok_or_else(|| FilterError::Config("regularized prior covariance is not SPD".into()))?
            .inverse();
        let half = prior_cov.diagonal().map(|d| settings.bound_width * d.sqrt());
        Ok(Self {
            model,
            obs_model,
            lower: &moments.mean - &half,
            upper: &moments.mean + &half,
            prior_mean: moments.mean.clone(),
            prior_cov,
            prior_precision,
            observation: observation.clone(),
            steps,
            dt,
        })
    }

    pub fn with_bounds(mut self, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    /// Noise-free flow of `x` to the window end.
    pub fn flow(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        sde::deterministic_flow(self.model, x, self.steps, self.dt).ok()
    }
}

pub fn variational_cost<M: SdeModel + ?Sized>(x: &DVector<f64>, problem: &VariationalProblem<'_, M>) -> f64 {
    let Some(end) = problem.flow(x) else {
        return BLOWUP_COST;
    };
    let dx = x - &problem.prior_mean;
    let dy = &problem.observation - problem.obs_model.observe(&end);
    let j = 0.5 * dx.dot(&(&problem.prior_precision * &dx)) + 0.5 * dy.dot(&(problem.obs_model.precision() * &dy));
    if j.is_finite() {
        j
    } else {
        BLOWUP_COST
    }
}

/// Central differences with per-coordinate step `max(1e-6, 1e-8·|xᵢ|)`.
pub fn variational_gradient<M: SdeModel + ?Sized>(
    x: &DVector<f64>,
    problem: &VariationalProblem<'_, M>,
) -> DVector<f64> {
    let mut probe = x.clone();
    DVector::from_fn(x.len(), |i, _| {
        let h = (1e-8 * x[i].abs()).max(1e-6);
        probe[i] = x[i] + h;
        let up = variational_cost(&probe, problem);
        probe[i] = x[i] - h;
        let down = variational_cost(&probe, problem);
        probe[i] = x[i];
        (up - down) / (2.0 * h)
    })
}

/// Box-constrained L-BFGS from `x_init` (projected onto the box).
pub fn minimize_cost<M: SdeModel + ?Sized>(
    problem: &VariationalProblem<'_, M>,
    x_init: &DVector<f64>,
    settings: &VariationalSettings,
) -> OptimResult {
    optimizer::minimize_box(
        |x| variational_cost(x, problem),
        |x| variational_gradient(x, problem),
        x_init,
        &problem.lower,
        &problem.upper,
        &settings.optimizer_options(),
    )
}

/// Deterministic path sampled at the `M + 1` subinterval endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoObservationPath {
    pub times: Vec<f64>,
    /// Integrator step index of every endpoint, counted from the window start.
    pub steps: Vec<usize>,
    pub states: Vec<DVector<f64>>,
    pub pseudo_observations: Vec<DVector<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub fn build_pseudo_path<M: SdeModel + ?Sized>(
    x_opt: &DVector<f64>,
    model: &M,
    obs_model: &ObservationModel,
    t0: f64,
    t1: f64,
    dt: f64,
    subintervals: usize,
) -> Result<PseudoObservationPath> {
    if subintervals == 0 {
        return Err(FilterError::Config("pseudo-observation path needs at least one subinterval".into()));
    }
    let total = sde::step_count(t0, t1, dt)?;
    if total % subintervals != 0 {
        return Err(FilterError::Config(format!(
            "{total} steps do not split into {subintervals} subintervals"
        )));
    }
    let per = total / subintervals;
    let mut states = vec![x_opt.clone()];
    for _ in 0..subintervals {
        let next = sde::deterministic_flow(model, states.last().unwrap(), per, dt)?;
        states.push(next);
    }
    let steps: Vec<usize> = (0..=subintervals).map(|j| j * per).collect();
    Ok(PseudoObservationPath {
        times: steps.iter().map(|&s| t0 + s as f64 * dt).collect(),
        pseudo_observations: states.iter().map(|x| obs_model.observe(x)).collect(),
        steps,
        states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::{LinearSde, Lorenz63};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn still_model() -> LinearSde {
        LinearSde::new(DMatrix::zeros(3, 3), DMatrix::zeros(3, 3)).unwrap()
    }

    fn moments(mean: DVector<f64>, cov: DMatrix<f64>) -> EnsembleMoments {
        EnsembleMoments { mean, covariance: cov }
    }

    #[test]
    fn cost_vanishes_when_mean_flows_onto_observation() {
        let model = Lorenz63::standard();
        let obs = ObservationModel::identity(3, 2.0).unwrap();
        let mu = v(&[1.0, 2.0, 20.0]);
        let y = sde::deterministic_flow(&model, &mu, 50, 0.01).unwrap();
        let p = VariationalProblem::new(
            &model,
            &obs,
            &moments(mu.clone(), DMatrix::identity(3, 3)),
            &y,
            0.0,
            0.5,
            0.01,
            &VariationalSettings::default(),
        )
        .unwrap();
        assert_eq!(variational_cost(&mu, &p), 0.0);
    }

    #[test]
    fn zero_drift_cost_and_gradient_match_closed_form() {
        let model = still_model();
        let obs = ObservationModel::identity(3, 1.0).unwrap();
        let mu = v(&[1.0, -2.0, 0.5]);
        let y = v(&[3.0, 0.0, -1.5]);
        let p = VariationalProblem::new(
            &model,
            &obs,
            &moments(mu.clone(), DMatrix::identity(3, 3)),
            &y,
            0.0,
            0.5,
            0.01,
            &VariationalSettings::default(),
        )
        .unwrap();
        let x = v(&[0.3, 0.7, -0.2]);
        let expected = 0.5 * (&x - &mu).norm_squared() + 0.5 * (&y - &x).norm_squared();
        assert!((variational_cost(&x, &p) - expected).abs() < 1e-12);
        let grad = variational_gradient(&x, &p);
        let exact = (&x - &mu) - (&y - &x);
        assert!((grad - exact).amax() < 1e-5);
        let mid = (&mu + &y) / 2.0;
        assert!(variational_gradient(&mid, &p).norm() < 1e-5);
    }

    #[test]
    fn regularization_barely_moves_a_well_conditioned_cost() {
        let model = Lorenz63::standard();
        let obs = ObservationModel::identity(3, 2.0).unwrap();
        let cov = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.3, 1.5, 0.2, 0.0, 0.2, 1.0]);
        let eps = 1e-6;
        let mu = v(&[1.0, 2.0, 20.0]);
        let y = v(&[0.0, 0.0, 20.0]);
        let s = VariationalSettings::default();
        let a = VariationalProblem::new(&model, &obs, &moments(mu.clone(), cov.clone()), &y, 0.0, 0.5, 0.01, &s).unwrap();
        let shifted = &cov + DMatrix::identity(3, 3) * eps;
        let b = VariationalProblem::new(&model, &obs, &moments(mu.clone(), shifted), &y, 0.0, 0.5, 0.01, &s).unwrap();
        let x = v(&[1.5, 1.0, 21.0]);
        let (ja, jb) = (variational_cost(&x, &a), variational_cost(&x, &b));
        // prior term changes by at most eps·‖Σ⁻¹Δx‖² / 2
        let dx = &x - &mu;
        let bound = eps * (a.prior_precision.clone() * &dx).norm_squared();
        assert!((ja - jb).abs() <= bound, "{ja} {jb} {bound}");
    }

    #[test]
    fn directional_derivative_consistency() {
        let model = Lorenz63::standard();
        let obs = ObservationModel::identity(3, 2.0).unwrap();
        let mu = v(&[1.5, -1.5, 25.0]);
        let y = v(&[-2.0, -4.0, 22.0]);
        let cov = DMatrix::from_diagonal_element(3, 3, 2.0);
        let p = VariationalProblem::new(&model, &obs, &moments(mu, cov), &y, 0.0, 0.5, 0.01, &VariationalSettings::default())
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let x = v(&[rng.random_range(-1.0..3.0), rng.random_range(-3.0..0.0), rng.random_range(23.0..27.0)]);
            let d = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)).normalize();
            let t = 1e-4;
            let fd = (variational_cost(&(&x + &d * t), &p) - variational_cost(&(&x - &d * t), &p)) / (2.0 * t);
            let an = variational_gradient(&x, &p).dot(&d);
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1.0), "{fd} vs {an}");
        }
    }

    #[test]
    fn quadratic_minimizer_is_midpoint() {
        let model = still_model();
        let obs = ObservationModel::identity(3, 1.0).unwrap();
        let mu = v(&[1.0, -2.0, 0.5]);
        let y = v(&[3.0, 0.0, -1.5]);
        let s = VariationalSettings::default();
        let p = VariationalProblem::new(&model, &obs, &moments(mu.clone(), DMatrix::identity(3, 3)), &y, 0.0, 0.5, 0.01, &s)
            .unwrap();
        let r = minimize_cost(&p, &mu, &s);
        assert!((r.x - (&mu + &y) / 2.0).amax() < 1e-6, "{:?}", r.status);
        assert!(r.cost <= variational_cost(&mu, &p));

        let opt = (&mu + &y) / 2.0;
        let again = minimize_cost(&p, &opt, &s);
        assert!(again.iterations <= 1);
    }

    #[test]
    fn box_excluding_minimizer_lands_on_nearest_face() {
        let model = still_model();
        let obs = ObservationModel::identity(3, 1.0).unwrap();
        let mu = v(&[0.0, 0.0, 0.0]);
        let y = v(&[4.0, 2.0, -2.0]);
        let s = VariationalSettings::default();
        // unconstrained minimizer (2, 1, −1); box caps the first coordinate at 1
        let p = VariationalProblem::new(&model, &obs, &moments(mu.clone(), DMatrix::identity(3, 3)), &y, 0.0, 0.5, 0.01, &s)
            .unwrap()
            .with_bounds(v(&[-5.0, -5.0, -5.0]), v(&[1.0, 5.0, 5.0]));
        let r = minimize_cost(&p, &mu, &s);
        assert!((&r.x - v(&[1.0, 1.0, -1.0])).amax() < 1e-6, "{}", r.x);
    }

    #[test]
    fn default_box_is_ten_prior_deviations() {
        let model = still_model();
        let obs = ObservationModel::identity(3, 1.0).unwrap();
        let cov = DMatrix::from_diagonal(&v(&[4.0, 1.0, 0.25]));
        let p = VariationalProblem::new(
            &model,
            &obs,
            &moments(v(&[1.0, 0.0, 0.0]), cov),
            &v(&[0.0; 3]),
            0.0,
            0.5,
            0.01,
            &VariationalSettings::default(),
        )
        .unwrap();
        assert_eq!(p.upper, v(&[21.0, 10.0, 5.0]));
        assert_eq!(p.lower, v(&[-19.0, -10.0, -5.0]));
    }

    #[test]
    fn blown_up_flow_costs_the_sentinel() {
        let model = LinearSde::new(DMatrix::from_diagonal_element(3, 3, 1e300), DMatrix::zeros(3, 3)).unwrap();
        let obs = ObservationModel::identity(3, 1.0).unwrap();
        let p = VariationalProblem::new(
            &model,
            &obs,
            &moments(v(&[1.0, 1.0, 1.0]), DMatrix::identity(3, 3)),
            &v(&[0.0; 3]),
            0.0,
            0.5,
            0.01,
            &VariationalSettings::default(),
        )
        .unwrap();
        assert_eq!(variational_cost(&v(&[1.0, 1.0, 1.0]), &p), BLOWUP_COST);
    }

    #[test]
    fn pseudo_path_examples() {
        let model = Lorenz63::standard();
        let obs = ObservationModel::identity(3, 2.0).unwrap();
        let x = v(&[1.0, 2.0, 20.0]);
        let one = build_pseudo_path(&x, &model, &obs, 0.5, 1.0, 0.01, 1).unwrap();
        assert_eq!(one.times.len(), 2);
        assert!((one.times[0] - 0.5).abs() < 1e-15 && (one.times[1] - 1.0).abs() < 1e-12);
        assert_eq!(one.steps, vec![0, 50]);

        let five = build_pseudo_path(&x, &model, &obs, 0.0, 0.5, 0.01, 5).unwrap();
        assert_eq!(five.states, five.pseudo_observations);
        assert_eq!(five.steps, vec![0, 10, 20, 30, 40, 50]);
        let direct = sde::deterministic_flow(&model, &x, 50, 0.01).unwrap();
        assert!((five.states[5].clone() - direct).amax() < 1e-12);
        assert_eq!(five, build_pseudo_path(&x, &model, &obs, 0.0, 0.5, 0.01, 5).unwrap());

        let still = build_pseudo_path(&x, &still_model(), &obs, 0.0, 0.5, 0.01, 5).unwrap();
        assert!(still.states.iter().all(|s| *s == x));
        assert!(build_pseudo_path(&x, &model, &obs, 0.0, 0.5, 0.01, 3).is_err());
    }

    #[test]
    fn regularize_examples() {
        let id = DMatrix::<f64>::identity(3, 3);
        assert_eq!(regularize_covariance(&id, 1e-6), id);

        let u = v(&[1.0, 2.0, -1.0]);
        let rank_one = &u * u.transpose();
        let r = regularize_covariance(&rank_one, 1e-6);
        assert!(r.symmetric_eigenvalues().min() >= 1e-6 * (1.0 - 1e-6));

        let q = DMatrix::from_row_slice(3, 3, &[0.6, 0.8, 0.0, -0.8, 0.6, 0.0, 0.0, 0.0, 1.0]);
        let d = DMatrix::from_diagonal(&v(&[2.0, 1.0, -1e-9]));
        let indefinite = &q * d * q.transpose();
        let r = regularize_covariance(&indefinite, 1e-6);
        assert!(r.clone().cholesky().is_some());
        assert!(r.symmetric_eigenvalues().min() > 0.0);
    }
}
