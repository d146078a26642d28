//! Nudged particle filter.
//!
//! Between observations every particle is steered by the feedback control
//! `u = R ∇Φ / Φ`, where `Φ(t, x) = E[exp(−g(η_T, Y))]` over uncontrolled
//! realizations `η` started at `(t, x)` and `g` is the Gaussian negative
//! log-likelihood of the target. `∇Φ` is estimated along the same
//! realizations with the fundamental matrix `Ψ` of the linearized flow:
//! `∇Φ = −E[exp(−g) Ψᵀ ∇g(η_T)]`.
//!
//! The observation interval is split into `M` subintervals. The control is
//! solved at the start of each one, held constant over it, and the particle
//! weight picks up the Girsanov factor
//! `exp(−Σ⟨v, ΔW⟩ − ½Σ‖v‖²dt)` with `v = σᵀ ∇log Φ`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::bootstrap_pf::{advance_steps, complete_cycle, cycle_grid};
use crate::diagnostics::{
    compute_nudging_bm_ratio, CycleDiagnostics, CycleNoise, CycleOptions, NudgingDiagnostics, SubintervalRecord,
};
use crate::ensemble::{ObservationModel, ParticleEnsemble};
use crate::error::{FilterError, Result};
use crate::sde::{self, SdeError, SdeModel};
use crate::streams;

/// Smallest value reported for `Φ`.
pub const PHI_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NudgingConfig {
    /// Control subintervals per observation interval (`M`).
    pub subintervals: usize,
    /// Realizations per batch (`K`).
    pub batch_size: usize,
    /// Convergence tolerance on the normalized control variation.
    pub tolerance: f64,
    pub max_batches: usize,
    /// Zero control is applied when `−½‖v‖²Δt_sub` falls below this value.
    /// `+inf` forces zero control everywhere, `-inf` disables rollback. The
    /// default leaves roughly one nPF control in ten rolled back on the
    /// standard Lorenz-63 twin experiment.
    pub rollback_log_threshold: f64,
    /// Lower bound on the drift magnitude used to normalize the control.
    pub min_drift_scale: f64,
}

impl Default for NudgingConfig {
    fn default() -> Self {
        Self {
            subintervals: 5,
            batch_size: 2,
            tolerance: 0.1,
            max_batches: 50,
            rollback_log_threshold: -300.0,
            min_drift_scale: 1.0,
        }
    }
}

impl NudgingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FilterError::Config(m.to_string()));
        if self.subintervals < 1 {
            return bad("nudging.subintervals must be >= 1");
        }
        if self.batch_size < 1 {
            return bad("nudging.batch_size must be >= 1");
        }
        if !(self.tolerance > 0.0) {
            return bad("nudging.tolerance must be > 0");
        }
        if self.max_batches < 1 {
            return bad("nudging.max_batches must be >= 1");
        }
        if self.rollback_log_threshold.is_nan() {
            return bad("nudging.rollback_log_threshold must not be NaN");
        }
        if !(self.min_drift_scale > 0.0) {
            return bad("nudging.min_drift_scale must be > 0");
        }
        Ok(())
    }
}

/// One uncontrolled realization: terminal cost and `Ψᵀ ∇g` at its endpoint.
#[derive(Debug, Clone)]
struct Realization {
    #[cfg_attr(not(test), allow(dead_code))]
    endpoint: DVector<f64>,
    cost: f64,
    tangent_gradient: DVector<f64>,
}

fn draw_realization<M: SdeModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    obs_model: &ObservationModel,
    x: &DVector<f64>,
    target: &DVector<f64>,
    steps: usize,
    dt: f64,
    rng: &mut R,
) -> Realization {
    let dim = model.dimension();
    let scale = dt.sqrt();
    let mut state = x.clone();
    let mut psi = DMatrix::identity(dim, dim);
    for _ in 0..steps {
        let dw = DVector::from_iterator(dim, (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)));
        match sde::integrate_step_tangent(model, &state, &psi, dt, Some(&dw)) {
            Ok((s, p)) => {
                state = s;
                psi = p;
            }
            Err(_) => {
                return Realization {
                    endpoint: state,
                    cost: f64::INFINITY,
                    tangent_gradient: DVector::zeros(dim),
                }
            }
        }
    }
    let cost = obs_model.neg_log_likelihood(&state, target);
    let grad = obs_model.neg_log_likelihood_gradient(&state, target);
    Realization {
        endpoint: state,
        cost,
        tangent_gradient: psi.transpose() * grad,
    }
}

/// Monte Carlo estimate of `Φ` and `∇Φ` at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiGradEstimate {
    /// `Φ`, floored at [`PHI_FLOOR`].
    pub phi: f64,
    pub log_phi: f64,
    pub grad_phi: DVector<f64>,
    /// `∇Φ / Φ`, computed without forming `Φ`.
    pub grad_log_phi: DVector<f64>,
    /// Every `exp(−g)` underflowed.
    pub underflow: bool,
    pub realizations: usize,
    /// Standard error of the `Φ` estimate.
    pub phi_std_error: f64,
    /// Delta-method standard error of each component of `∇Φ / Φ`.
    pub grad_log_phi_std_error: DVector<f64>,
}

fn summarize(realizations: &[Realization], dim: usize) -> PhiGradEstimate {
    let n = realizations.len() as f64;
    let max = realizations
        .iter()
        .map(|r| -r.cost)
        .fold(f64::NEG_INFINITY, f64::max);
    let underflow_estimate = |underflow: bool| PhiGradEstimate {
        phi: PHI_FLOOR,
        log_phi: PHI_FLOOR.ln(),
        grad_phi: DVector::zeros(dim),
        grad_log_phi: DVector::zeros(dim),
        underflow,
        realizations: realizations.len(),
        phi_std_error: 0.0,
        grad_log_phi_std_error: DVector::zeros(dim),
    };
    if !max.is_finite() {
        return underflow_estimate(true);
    }
    // shifted weights a_i = exp(−g_i − max), mean ā
    let shifted: Vec<f64> = realizations.iter().map(|r| (-r.cost - max).exp()).collect();
    let total: f64 = shifted.iter().sum();
    let log_phi = max + (total / n).ln();
    if log_phi < PHI_FLOOR.ln() {
        return underflow_estimate(true);
    }
    let grad_log_phi = realizations
        .iter()
        .zip(&shifted)
        .fold(DVector::zeros(dim), |acc, (r, &a)| acc - &r.tangent_gradient * (a / total));
    let phi = log_phi.exp();

    let (phi_std_error, grad_log_phi_std_error) = if realizations.len() > 1 {
        let raw: Vec<f64> = realizations.iter().map(|r| (-r.cost).exp()).collect();
        let var = raw.iter().map(|a| (a - phi).powi(2)).sum::<f64>() / (n - 1.0);
        let mean_shifted = total / n;
        let mut ratio_var = DVector::zeros(dim);
        for (r, &a) in realizations.iter().zip(&shifted) {
            let z = (-&r.tangent_gradient - &grad_log_phi) * a;
            ratio_var += z.component_mul(&z);
        }
        let se = ratio_var.map(|s| (s / (n * (n - 1.0))).sqrt() / mean_shifted);
        ((var / n).sqrt(), se)
    } else {
        (f64::NAN, DVector::from_element(dim, f64::NAN))
    };

    PhiGradEstimate {
        phi,
        log_phi,
        grad_phi: &grad_log_phi * phi,
        grad_log_phi,
        underflow: false,
        realizations: realizations.len(),
        phi_std_error,
        grad_log_phi_std_error,
    }
}

/// Estimates `Φ(t, x)` and `∇Φ(t, x)` from `n_realizations` uncontrolled
/// paths of length `horizon_end − t` drawn from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_phi_grad<M: SdeModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    obs_model: &ObservationModel,
    t: f64,
    x: &DVector<f64>,
    horizon_end: f64,
    target_obs: &DVector<f64>,
    n_realizations: usize,
    dt: f64,
    rng: &mut R,
) -> Result<PhiGradEstimate> {
    let steps = horizon_steps(t, horizon_end, dt)?;
    let realizations: Vec<Realization> = (0..n_realizations.max(1))
        .map(|_| draw_realization(model, obs_model, x, target_obs, steps, dt, rng))
        .collect();
    Ok(summarize(&realizations, model.dimension()))
}

fn horizon_steps(t: f64, horizon_end: f64, dt: f64) -> Result<usize> {
    let steps = sde::step_count(t, horizon_end, dt)?;
    if steps == 0 {
        return Err(FilterError::Config("control horizon must be longer than one step".into()));
    }
    Ok(steps)
}

/// `u = R ∇Φ / Φ`.
pub fn feedback_control(phi: f64, grad_phi: &DVector<f64>, diffusion: &DMatrix<f64>) -> DVector<f64> {
    diffusion * grad_phi / phi
}

/// Result of the adaptive batch solve at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlEstimate {
    pub phi: f64,
    pub grad_phi: DVector<f64>,
    pub grad_log_phi: DVector<f64>,
    pub control: DVector<f64>,
    pub realizations_used: usize,
    pub batches: usize,
    pub converged: bool,
    pub underflow: bool,
    /// `δû` after every batch from the second on.
    pub normalized_variation_history: Vec<f64>,
    /// Drift magnitude that normalizes the control.
    pub drift_scale: f64,
    pub horizon_steps: usize,
}

/// Adds batches of `K` realizations until two consecutive normalized
/// controls differ by at most `tolerance` (Euclidean norm) or `max_batches`
/// is reached. The normalization is the drift magnitude `‖f(x)‖` at the
/// solve point (every realization starts there), floored at
/// `min_drift_scale`.
#[allow(clippy::too_many_arguments)]
pub fn adaptive_control<M: SdeModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    obs_model: &ObservationModel,
    t: f64,
    x: &DVector<f64>,
    horizon_end: f64,
    target_obs: &DVector<f64>,
    config: &NudgingConfig,
    dt: f64,
    rng: &mut R,
) -> Result<ControlEstimate> {
    let steps = horizon_steps(t, horizon_end, dt)?;
    adaptive_control_steps(model, obs_model, x, steps, target_obs, config, dt, rng)
}

#[allow(clippy::too_many_arguments)]
fn adaptive_control_steps<M: SdeModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    obs_model: &ObservationModel,
    x: &DVector<f64>,
    steps: usize,
    target_obs: &DVector<f64>,
    config: &NudgingConfig,
    dt: f64,
    rng: &mut R,
) -> Result<ControlEstimate> {
    let dim = model.dimension();
    let diffusion = model.diffusion();
    let drift_scale = model.drift(x).norm().max(config.min_drift_scale);
    let mut realizations = Vec::with_capacity(config.batch_size * 4);
    let mut draw_batch = |realizations: &mut Vec<Realization>| {
        for _ in 0..config.batch_size {
            realizations.push(draw_realization(model, obs_model, x, target_obs, steps, dt, rng));
        }
    };

    draw_batch(&mut realizations);
    let mut batches = 1;
    let mut estimate = summarize(&realizations, dim);
    let mut control = &diffusion * &estimate.grad_log_phi;
    let mut history = Vec::new();
    let mut converged = false;
    while batches < config.max_batches {
        draw_batch(&mut realizations);
        batches += 1;
        let next = summarize(&realizations, dim);
        let next_control = &diffusion * &next.grad_log_phi;
        let variation = (&next_control - &control).norm() / drift_scale;
        history.push(variation);
        estimate = next;
        control = next_control;
        if variation <= config.tolerance {
            converged = true;
            break;
        }
    }

    Ok(ControlEstimate {
        phi: estimate.phi,
        grad_phi: estimate.grad_phi,
        grad_log_phi: estimate.grad_log_phi,
        control,
        realizations_used: realizations.len(),
        batches,
        converged,
        underflow: estimate.underflow,
        normalized_variation_history: history,
        drift_scale,
        horizon_steps: steps,
    })
}

/// `−Σ⟨v_s, ΔW_s⟩ − ½Σ⟨v_s, v_s⟩ dt` over aligned steps (left-point rule).
pub fn rn_log_increment(v_values: &[DVector<f64>], dw_steps: &[DVector<f64>], dt: f64) -> f64 {
    v_values
        .iter()
        .zip(dw_steps)
        .map(|(v, dw)| -v.dot(dw) - 0.5 * v.norm_squared() * dt)
        .sum()
}

/// Deterministic part of the log-RN increment of a subinterval of length `duration`.
pub fn expected_log_rn_increment(v: &DVector<f64>, duration: f64) -> f64 {
    -0.5 * v.norm_squared() * duration
}

/// True when the control should be discarded in favour of zero control.
pub fn rollback_test(expected_log_increment: f64, config: &NudgingConfig) -> bool {
    expected_log_increment < config.rollback_log_threshold
}

/// Running log Radon-Nikodym derivative of one particle.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RnAccumulator {
    pub log_rn: f64,
}

impl RnAccumulator {
    pub fn add(&mut self, v: &DVector<f64>, dw_steps: &[DVector<f64>], dt: f64) {
        let vs = vec![v.clone(); dw_steps.len()];
        self.log_rn += rn_log_increment(&vs, dw_steps, dt);
    }
}

/// Where the control of one subinterval aims: the step index (from the cycle
/// start) at which its realizations end, and the observation-space target.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct SubintervalTarget {
    pub end_step: usize,
    pub target: DVector<f64>,
}

pub(crate) struct NudgedOutcome {
    pub ensemble: ParticleEnsemble,
    pub diagnostics: CycleDiagnostics,
}

/// Subinterval loop shared by nPF and Var-nPF. `target_for(j, states)` is
/// called once per subinterval with the particle states at its start.
#[allow(clippy::too_many_arguments)]
pub(crate) fn nudged_cycle<M, F>(
    ensemble: &ParticleEnsemble,
    model: &M,
    obs_model: &ObservationModel,
    reweight_observation: &DVector<f64>,
    t_end: f64,
    config: &NudgingConfig,
    noise: &CycleNoise,
    options: CycleOptions,
    mut target_for: F,
) -> Result<NudgedOutcome>
where
    M: SdeModel + ?Sized,
    F: FnMut(usize, usize, &[DVector<f64>]) -> Result<SubintervalTarget>,
{
    config.validate()?;
    let clock = Instant::now();
    let grid = cycle_grid(ensemble, t_end, noise)?;
    let m = config.subintervals;
    if grid.steps % m != 0 {
        return Err(FilterError::Config(format!(
            "{} integrator steps per observation interval do not split into {} subintervals",
            grid.steps, m
        )));
    }
    let per_sub = grid.steps / m;
    let sub_duration = per_sub as f64 * grid.dt;
    let n = ensemble.len();
    let dispersion = model.dispersion().clone();
    let sigma_t = dispersion.transpose();

    let mut trajectories: Vec<Vec<DVector<f64>>> = ensemble
        .states()
        .iter()
        .map(|x| {
            let mut t = Vec::with_capacity(grid.steps + 1);
            t.push(x.clone());
            t
        })
        .collect();
    let mut failed = vec![false; n];
    let mut rn = vec![RnAccumulator::default(); n];
    let mut diag = NudgingDiagnostics {
        step_ratios: vec![Vec::with_capacity(grid.steps); n],
        step_control_norms: vec![Vec::with_capacity(grid.steps); n],
        ..Default::default()
    };
    let mut nudging_secs = 0.0;

    for j in 0..m {
        let start_step = j * per_sub;
        let current: Vec<DVector<f64>> = trajectories.iter().map(|t| t.last().unwrap().clone()).collect();
        let target = target_for(j, start_step, &current)?;
        if target.end_step <= start_step {
            return Err(FilterError::Config("control target must lie after the subinterval start".into()));
        }
        let horizon = target.end_step - start_step;
        for i in 0..n {
            let dws = &noise.paths[i].increments[start_step..start_step + per_sub];
            if failed[i] {
                advance_steps(model, None, dws, grid.dt, &mut trajectories[i]).ok();
                diag.step_ratios[i].extend(std::iter::repeat_n(None, per_sub));
                diag.step_control_norms[i].extend(std::iter::repeat_n(0.0, per_sub));
                continue;
            }
            let solve_clock = Instant::now();
            let mut rng = streams::stream_rng(noise.realization_stream(i, j));
            let est = adaptive_control_steps(
                model,
                obs_model,
                &current[i],
                horizon,
                &target.target,
                config,
                grid.dt,
                &mut rng,
            )?;
            nudging_secs += solve_clock.elapsed().as_secs_f64();

            let v = &sigma_t * &est.grad_log_phi;
            let rolled_back = est.underflow || rollback_test(expected_log_rn_increment(&v, sub_duration), config);
            diag.subintervals.push(SubintervalRecord {
                particle: i,
                subinterval: j,
                control_norm: est.control.norm(),
                rolled_back,
                underflow: est.underflow,
                realizations: est.realizations_used,
                batches: est.batches,
                converged: est.converged,
                horizon_steps: horizon,
                realization_steps: horizon * est.realizations_used,
            });

            let control = (!rolled_back).then_some(&est.control);
            if advance_steps(model, control, dws, grid.dt, &mut trajectories[i]).is_err() {
                failed[i] = true;
            }
            match control {
                Some(u) => {
                    rn[i].add(&v, dws, grid.dt);
                    let unorm = u.norm();
                    for dw in dws {
                        diag.step_ratios[i].push(compute_nudging_bm_ratio(u, dw, grid.dt, &dispersion));
                        diag.step_control_norms[i].push(unorm);
                    }
                }
                None => {
                    diag.step_ratios[i].extend(std::iter::repeat_n(None, per_sub));
                    diag.step_control_norms[i].extend(std::iter::repeat_n(0.0, per_sub));
                }
            }
        }
    }

    diag.log_rn = rn.iter().map(|r| r.log_rn).collect();
    let log_factors = diag.log_rn.clone();
    let (out, mut cycle_diag) = complete_cycle(
        ensemble,
        grid,
        trajectories,
        &failed,
        log_factors,
        reweight_observation,
        obs_model,
        noise,
        options,
    )?;
    cycle_diag.nudging = Some(diag);
    cycle_diag.timing.nudging_secs = nudging_secs;
    cycle_diag.timing.total_secs = clock.elapsed().as_secs_f64();
    Ok(NudgedOutcome {
        ensemble: out,
        diagnostics: cycle_diag,
    })
}

/// One nPF cycle: every subinterval's control problem runs to `t_end` and
/// targets the actual observation.
#[allow(clippy::too_many_arguments)]
pub fn npf_assimilation_cycle<M: SdeModel + ?Sized>(
    ensemble: &ParticleEnsemble,
    model: &M,
    obs_model: &ObservationModel,
    observation: &DVector<f64>,
    t_end: f64,
    config: &NudgingConfig,
    noise: &CycleNoise,
    options: CycleOptions,
) -> Result<(ParticleEnsemble, CycleDiagnostics)> {
    let total_steps = sde::step_count(ensemble.time, t_end, noise.paths.first().map_or(1.0, |p| p.dt))
        .map_err(|e: SdeError| FilterError::Sde(e))?;
    let out = nudged_cycle(
        ensemble,
        model,
        obs_model,
        observation,
        t_end,
        config,
        noise,
        options,
        |_, _, _| {
            Ok(SubintervalTarget {
                end_step: total_steps,
                target: observation.clone(),
            })
        },
    )?;
    Ok((out.ensemble, out.diagnostics))
}
